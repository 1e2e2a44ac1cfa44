#include "fastio/patch.hpp"

#include <algorithm>
#include <stdexcept>

namespace fastio {

BoundaryResult find_boundary(std::span<const Byte> window,
                             std::uint32_t known_predecessor_eip,
                             std::uint32_t hit_offset) {
  std::uint32_t at = known_predecessor_eip;
  while (at <= hit_offset && at < window.size()) {
    auto len = instruction_length(window.subspan(at));
    if (!len) return BoundaryResult::Unknown();
    if (at + *len > hit_offset) return BoundaryResult::Known(at);
    at += std::uint32_t(*len);
  }
  return BoundaryResult::Unknown();
}

namespace {

void check_fresh(std::span<const Byte> window, const SequenceHit& hit,
                 const OpcodePredicate& pred) {
  const std::size_t len = pred.length();
  if (hit.offset + len > window.size() || hit.matched_bytes.size() != len)
    throw std::invalid_argument("stale hit: window too small");
  for (std::size_t i = 0; i < len; ++i)
    if (window[hit.offset + i] != hit.matched_bytes[i])
      throw std::invalid_argument("stale hit: page content changed");
}

}  // namespace

PatchRecord plan_patch(std::span<const Byte> window, const SequenceHit& hit,
                       const BoundaryResult& boundary,
                       const OpcodePredicate& pred,
                       std::optional<GpaPage> successor_page) {
  check_fresh(window, hit, pred);

  PatchRecord rec;
  rec.page_index = hit.page_index;
  rec.hit_offset = hit.offset;
  rec.boundary = boundary;
  if (hit.straddles_boundary)
    rec.successor_page = successor_page ? *successor_page : hit.page_index + 1;

  if (!boundary.known) return rec;  // deferred: nothing patched yet

  // Patch the instruction's first byte plus every sequence byte. If the
  // sequence starts mid-instruction (inside an immediate), the leading byte
  // forces the trap to land on the real boundary.
  std::vector<std::uint32_t> offs;
  if (boundary.instr_start < hit.offset) offs.push_back(boundary.instr_start);
  for (std::size_t i = 0; i < pred.length(); ++i)
    offs.push_back(hit.offset + std::uint32_t(i));
  rec.patch_offsets = std::move(offs);
  rec.original_bytes.reserve(rec.patch_offsets.size());
  for (auto off : rec.patch_offsets) rec.original_bytes.push_back(window[off]);

  rec.emulation = decode_instruction(window.subspan(boundary.instr_start));
  return rec;
}

void convert_deferred(PatchRecord& rec, std::span<const Byte> window,
                      const OpcodePredicate& pred) {
  rec.patch_offsets.clear();
  rec.original_bytes.clear();
  for (std::size_t i = 0; i < pred.length(); ++i) {
    rec.patch_offsets.push_back(rec.hit_offset + std::uint32_t(i));
    rec.original_bytes.push_back(window[rec.hit_offset + i]);
  }
  // Emulation is only possible if the patched span is a whole instruction.
  auto d = decode_instruction(window.subspan(rec.hit_offset));
  if (d && d->length == pred.length()) rec.emulation = d;
}

namespace {

Byte& byte_at(PatchTarget& t, std::uint32_t off) {
  if (off < kPageSize) return t.page[off];
  return t.successor[off - kPageSize];
}

}  // namespace

void apply_patch(PatchRecord& rec, PatchTarget target) {
  if (rec.applied || rec.patch_offsets.empty()) return;
  for (auto off : rec.patch_offsets) byte_at(target, off) = 0xcc;
  rec.applied = true;
}

void revert_patch(PatchRecord& rec, PatchTarget target) {
  if (!rec.applied) return;
  for (std::size_t i = 0; i < rec.patch_offsets.size(); ++i)
    byte_at(target, rec.patch_offsets[i]) = rec.original_bytes[i];
  rec.applied = false;
}

EmulateResult emulate_patched(const PatchRecord& rec, MachineState machine,
                              const Cr3WriteHook& cr3_write) {
  if (!rec.emulation) return {machine, true};
  const Decoded& d = *rec.emulation;
  switch (d.kind) {
    case EmuKind::MovImm32:
      machine.regs[std::size_t(d.reg)] = d.imm;
      break;
    case EmuKind::WriteCr:
      if (d.cr == 3) {
        machine.eip += std::uint32_t(d.length);
        cr3_write(machine.regs[std::size_t(d.reg)], machine);
        return {machine, false};
      }
      return {machine, true};  // other control registers are not modeled
    case EmuKind::ReadCr:
      if (d.cr != 3) return {machine, true};
      machine.regs[std::size_t(d.reg)] = std::uint32_t(machine.cr3);
      break;
    case EmuKind::Nop:
    case EmuKind::Opaque:
      break;
  }
  machine.eip += std::uint32_t(d.length);
  return {machine, false};
}

}  // namespace fastio
