#pragma once

#include <span>
#include <vector>

#include "fastio/types.hpp"

namespace fastio {

// Byte pattern subtracted from guest code: two exact prefix bytes followed by
// one masked byte. The default is the cr3-write encoding: 0x0f, 0x20, then
// any third byte selecting cr3 in bits 3-5. The encoding is configurable; the
// scanner never assumes instruction boundaries.
struct OpcodePredicate {
  std::vector<Byte> prefix{0x0f, 0x20};
  Byte mask = 0x38;
  Byte value = 0x18;

  std::size_t length() const { return prefix.size() + 1; }

  // window must hold at least length() bytes.
  bool matches(std::span<const Byte> window) const {
    for (std::size_t i = 0; i < prefix.size(); ++i)
      if (window[i] != prefix[i]) return false;
    return (window[prefix.size()] & mask) == value;
  }
};

struct SequenceHit {
  GpaPage page_index = 0;
  std::uint32_t offset = 0;  // first matched byte, relative to page_index
  std::vector<Byte> matched_bytes;
  bool straddles_boundary = false;

  bool operator==(const SequenceHit&) const = default;
};

// All matches that lie entirely inside one page. Overlapping matches are all
// reported; a match may start inside another instruction's immediate.
std::vector<SequenceHit> scan_page(std::span<const Byte> page,
                                   const OpcodePredicate& pred,
                                   GpaPage page_index = 0);

// Matches that straddle the boundary between two virtually adjacent pages:
// the first matched byte lies in the predecessor, the last in the successor.
// Offsets are relative to the predecessor page.
std::vector<SequenceHit> scan_pair(std::span<const Byte> predecessor,
                                   std::span<const Byte> successor,
                                   const OpcodePredicate& pred,
                                   GpaPage predecessor_index = 0);

}  // namespace fastio
