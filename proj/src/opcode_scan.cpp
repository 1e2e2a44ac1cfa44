#include "fastio/opcode_scan.hpp"

#include <cstdio>

namespace fastio {

std::string hex_bytes(std::span<const Byte> bytes) {
  std::string out;
  out.reserve(bytes.size() * 2);
  char buf[3];
  for (Byte b : bytes) {
    std::snprintf(buf, sizeof buf, "%02x", b);
    out += buf;
  }
  return out;
}

std::vector<SequenceHit> scan_page(std::span<const Byte> page,
                                   const OpcodePredicate& pred,
                                   GpaPage page_index) {
  std::vector<SequenceHit> hits;
  const std::size_t len = pred.length();
  if (page.size() < len) return hits;
  for (std::size_t off = 0; off + len <= page.size(); ++off) {
    if (!pred.matches(page.subspan(off))) continue;
    SequenceHit h;
    h.page_index = page_index;
    h.offset = std::uint32_t(off);
    h.matched_bytes.assign(page.begin() + long(off), page.begin() + long(off + len));
    h.straddles_boundary = false;
    hits.push_back(std::move(h));
  }
  return hits;
}

std::vector<SequenceHit> scan_pair(std::span<const Byte> predecessor,
                                   std::span<const Byte> successor,
                                   const OpcodePredicate& pred,
                                   GpaPage predecessor_index) {
  std::vector<SequenceHit> hits;
  const std::size_t len = pred.length();
  if (predecessor.empty() || successor.size() + 1 < len) {
    // a straddle needs at least one byte on each side
  }
  if (predecessor.size() < 1 || len < 2) return hits;

  // Stitch the last len-1 predecessor bytes onto the first len-1 successor
  // bytes; matches starting in the window straddle the boundary.
  std::vector<Byte> window;
  const std::size_t lead = std::min(predecessor.size(), len - 1);
  window.insert(window.end(), predecessor.end() - long(lead), predecessor.end());
  const std::size_t tail = std::min(successor.size(), len - 1);
  window.insert(window.end(), successor.begin(), successor.begin() + long(tail));

  for (std::size_t w = 0; w + len <= window.size(); ++w) {
    if (!pred.matches(std::span<const Byte>(window).subspan(w))) continue;
    SequenceHit h;
    h.page_index = predecessor_index;
    h.offset = std::uint32_t(predecessor.size() - lead + w);
    h.matched_bytes.assign(window.begin() + long(w), window.begin() + long(w + len));
    h.straddles_boundary = true;
    hits.push_back(std::move(h));
  }
  return hits;
}

}  // namespace fastio
