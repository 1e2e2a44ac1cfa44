#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "fastio/machine_state.hpp"
#include "fastio/opcode_scan.hpp"
#include "fastio/x86_decode.hpp"

namespace fastio {

struct BoundaryResult {
  bool known = false;
  std::uint32_t instr_start = 0;  // only meaningful when known

  static BoundaryResult Known(std::uint32_t start) { return {true, start}; }
  static BoundaryResult Unknown() { return {false, 0}; }
};

// Walk instruction lengths forward from a known good eip until the
// instruction containing hit_offset is found. Any byte outside the decoder's
// subset before that point means the boundary cannot be trusted.
// Offsets are relative to `window`, which may span two adjacent pages.
BoundaryResult find_boundary(std::span<const Byte> window,
                             std::uint32_t known_predecessor_eip,
                             std::uint32_t hit_offset);

// One int3 patch covering one matched sequence. Offsets are relative to
// page_index; values >= kPageSize continue into the virtually adjacent
// successor page (straddling matches).
struct PatchRecord {
  GpaPage page_index = 0;
  std::optional<GpaPage> successor_page;
  std::uint32_t hit_offset = 0;
  std::vector<std::uint32_t> patch_offsets;
  std::vector<Byte> original_bytes;
  BoundaryResult boundary;
  std::uint32_t deferred_exits = 0;  // exec attempts while boundary unknown
  bool applied = false;
  std::optional<Decoded> emulation;
};

// Plan the int3 patch for a hit. For a known boundary the patch covers the
// full instruction start plus the sequence bytes, so a later int3 at the
// instruction start can re-execute the original faithfully. For an unknown
// boundary the record starts in the deferred state (no bytes patched, page
// held non-executable); see convert_deferred.
//
// `window` is the live content the hit was found in (one page, or predecessor
// + successor for straddles). Straddling hits name the successor's physical
// page explicitly since virtual neighbors need not be physically adjacent.
// Throws std::invalid_argument if the hit no longer matches the window
// (stale hit).
PatchRecord plan_patch(std::span<const Byte> window, const SequenceHit& hit,
                       const BoundaryResult& boundary,
                       const OpcodePredicate& pred,
                       std::optional<GpaPage> successor_page = std::nullopt);

// After enough deferred exits, give up on boundary recovery and patch just
// the sequence bytes. When those bytes alone form a complete instruction
// (the bare cr3 write), emulation still works; otherwise the record carries
// no emulation and execution of the site surfaces as a guest fault.
void convert_deferred(PatchRecord& rec, std::span<const Byte> window,
                      const OpcodePredicate& pred);

// Write int3 over patch_offsets / restore original_bytes. `pages` addresses
// the record's page (and successor when present) as mutable spans.
struct PatchTarget {
  std::span<Byte> page;
  std::span<Byte> successor;  // empty unless the record straddles
};
void apply_patch(PatchRecord& rec, PatchTarget target);
void revert_patch(PatchRecord& rec, PatchTarget target);

struct EmulateResult {
  MachineState state;
  bool guest_fault = false;
};

// Re-execute the original instruction a patch displaced. cr3 writes go
// through the supplied policy hook so target-control checks and page-table
// validation stay with the machine; a missing emulation spec is a guest
// fault, not a crash.
using Cr3WriteHook = std::function<void(std::uint32_t value, MachineState& st)>;
EmulateResult emulate_patched(const PatchRecord& rec, MachineState machine,
                              const Cr3WriteHook& cr3_write);

}  // namespace fastio
