#include <doctest.h>

#include <array>
#include <vector>

#include "fastio/patch.hpp"

using namespace fastio;

namespace {

const OpcodePredicate kPred;

SequenceHit hit_at(std::span<const Byte> window, std::uint32_t off,
                   GpaPage page = 0) {
  return {page, off,
          std::vector<Byte>(window.begin() + off, window.begin() + off + 3),
          false};
}

}  // namespace

TEST_CASE("find_boundary walks from a known eip") {
  // mov eax, imm32 whose immediate contains the sequence.
  const std::vector<Byte> w = {0xb8, 0x0f, 0x20, 0x18, 0x00, 0xc3};
  CHECK(find_boundary(w, 0, 1).known);
  CHECK(find_boundary(w, 0, 1).instr_start == 0);
  CHECK(find_boundary(w, 0, 3).instr_start == 0);

  // Sequence at an instruction start.
  const std::vector<Byte> bare = {0x90, 0x0f, 0x20, 0xd8, 0xc3};
  const auto b = find_boundary(bare, 0, 1);
  REQUIRE(b.known);
  CHECK(b.instr_start == 1);

  // Undecodable byte between the anchor and the hit poisons the walk.
  const std::vector<Byte> bad = {0x66, 0x0f, 0x20, 0xd8};
  CHECK_FALSE(find_boundary(bad, 0, 1).known);

  // An anchor past the hit can never vouch for it.
  CHECK_FALSE(find_boundary(bare, 4, 1).known);
}

TEST_CASE("plan_patch covers the instruction start plus the sequence bytes") {
  const std::vector<Byte> w = {0xb8, 0x0f, 0x20, 0x18, 0x00, 0xc3};
  const SequenceHit h = hit_at(w, 1, 9);
  PatchRecord rec = plan_patch(w, h, find_boundary(w, 0, 1), kPred);

  CHECK(rec.page_index == 9);
  CHECK(rec.hit_offset == 1);
  CHECK(rec.patch_offsets == std::vector<std::uint32_t>{0, 1, 2, 3});
  CHECK(rec.original_bytes == std::vector<Byte>{0xb8, 0x0f, 0x20, 0x18});
  REQUIRE(rec.emulation);
  CHECK(rec.emulation->kind == EmuKind::MovImm32);
  CHECK(rec.emulation->imm == 0x0018200f);
  CHECK_FALSE(rec.applied);
  CHECK_FALSE(rec.successor_page.has_value());
}

TEST_CASE("plan_patch on a boundary-aligned hit patches only the sequence") {
  const std::vector<Byte> w = {0x0f, 0x20, 0xd8, 0xc3};
  PatchRecord rec = plan_patch(w, hit_at(w, 0), BoundaryResult::Known(0), kPred);
  CHECK(rec.patch_offsets == std::vector<std::uint32_t>{0, 1, 2});
  CHECK(rec.original_bytes == std::vector<Byte>{0x0f, 0x20, 0xd8});
  REQUIRE(rec.emulation);
  CHECK(rec.emulation->kind == EmuKind::WriteCr);
  CHECK(rec.emulation->cr == 3);
  CHECK(rec.emulation->reg == 0);
}

TEST_CASE("plan_patch with an unknown boundary defers") {
  const std::vector<Byte> w = {0x00, 0x0f, 0x20, 0xd8};
  PatchRecord rec =
      plan_patch(w, hit_at(w, 1), BoundaryResult::Unknown(), kPred);
  CHECK(rec.patch_offsets.empty());
  CHECK(rec.original_bytes.empty());
  CHECK_FALSE(rec.emulation);
  CHECK_FALSE(rec.applied);
  CHECK(rec.deferred_exits == 0);
}

TEST_CASE("plan_patch rejects stale hits") {
  const std::vector<Byte> w = {0x0f, 0x20, 0xd8, 0xc3};
  SequenceHit h = hit_at(w, 0);
  h.matched_bytes[2] = 0xdb;  // page content moved on
  CHECK_THROWS_AS(plan_patch(w, h, BoundaryResult::Known(0), kPred),
                  std::invalid_argument);

  SequenceHit tail = hit_at(w, 0);
  tail.offset = 2;  // window no longer holds the whole sequence
  CHECK_THROWS_AS(plan_patch(w, tail, BoundaryResult::Known(0), kPred),
                  std::invalid_argument);
}

TEST_CASE("apply and revert are bit-exact inverses") {
  std::array<Byte, kPageSize> page{};
  page[100] = 0xb8;
  page[101] = 0x0f;
  page[102] = 0x20;
  page[103] = 0x18;
  page[104] = 0x00;
  const std::array<Byte, kPageSize> pristine = page;

  const std::span<const Byte> w(page.data() + 100, 6);
  PatchRecord rec =
      plan_patch(w, hit_at(w, 1), BoundaryResult::Known(0), kPred);
  // Offsets are window-relative here; rebase to the page.
  for (auto& o : rec.patch_offsets) o += 100;
  rec.hit_offset += 100;

  PatchTarget t{page, {}};
  apply_patch(rec, t);
  CHECK(rec.applied);
  CHECK(page[100] == 0xcc);
  CHECK(page[101] == 0xcc);
  CHECK(page[102] == 0xcc);
  CHECK(page[103] == 0xcc);
  CHECK(page[104] == 0x00);  // immediate tail is left alone

  // Double apply is a no-op, not a double save.
  apply_patch(rec, t);
  revert_patch(rec, t);
  CHECK_FALSE(rec.applied);
  CHECK(page == pristine);
  revert_patch(rec, t);  // idempotent
  CHECK(page == pristine);
}

TEST_CASE("straddling patch writes both pages") {
  std::array<Byte, kPageSize> pred_page{};
  std::array<Byte, kPageSize> succ_page{};
  pred_page[4094] = 0x0f;
  pred_page[4095] = 0x20;
  succ_page[0] = 0xd8;

  std::vector<Byte> window(pred_page.begin(), pred_page.end());
  window.insert(window.end(), succ_page.begin(), succ_page.end());
  SequenceHit h{5, 4094, {0x0f, 0x20, 0xd8}, true};
  PatchRecord rec =
      plan_patch(window, h, BoundaryResult::Known(4094), kPred, GpaPage(42));
  REQUIRE(rec.successor_page.has_value());
  CHECK(*rec.successor_page == 42);
  CHECK(rec.patch_offsets == std::vector<std::uint32_t>{4094, 4095, 4096});

  PatchTarget t{pred_page, succ_page};
  apply_patch(rec, t);
  CHECK(pred_page[4094] == 0xcc);
  CHECK(pred_page[4095] == 0xcc);
  CHECK(succ_page[0] == 0xcc);
  revert_patch(rec, t);
  CHECK(pred_page[4094] == 0x0f);
  CHECK(succ_page[0] == 0xd8);

  // Without an explicit successor the virtually next page is assumed.
  PatchRecord dflt = plan_patch(window, h, BoundaryResult::Known(4094), kPred);
  CHECK(*dflt.successor_page == 6);
}

TEST_CASE("convert_deferred patches the bare sequence") {
  const std::vector<Byte> w = {0x00, 0x0f, 0x20, 0xd8, 0xc3};
  PatchRecord rec =
      plan_patch(w, hit_at(w, 1), BoundaryResult::Unknown(), kPred);
  rec.deferred_exits = 64;
  convert_deferred(rec, w, kPred);
  CHECK(rec.patch_offsets == std::vector<std::uint32_t>{1, 2, 3});
  CHECK(rec.original_bytes == std::vector<Byte>{0x0f, 0x20, 0xd8});
  // The three bytes are a complete instruction, so emulation survives.
  REQUIRE(rec.emulation);
  CHECK(rec.emulation->kind == EmuKind::WriteCr);
}

TEST_CASE("converted mid-immediate hit carries the accepted fidelity loss") {
  // The sequence lives inside a mov immediate; with no boundary knowledge
  // the conversion still decodes the patched span as a whole instruction
  // (it happens to be one), so emulation exists -- but a guest entering at
  // the true instruction start sees the int3 bytes as data. That is the
  // documented cost of losing the boundary.
  const std::vector<Byte> w = {0xb8, 0x0f, 0x20, 0x18, 0x00, 0xc3};
  PatchRecord rec =
      plan_patch(w, hit_at(w, 1), BoundaryResult::Unknown(), kPred);
  convert_deferred(rec, w, kPred);
  CHECK(rec.patch_offsets == std::vector<std::uint32_t>{1, 2, 3});
  REQUIRE(rec.emulation);
  CHECK(rec.emulation->kind == EmuKind::WriteCr);
}

TEST_CASE("emulate_patched replays the displaced instruction") {
  const std::vector<Byte> w = {0xb8, 0x0f, 0x20, 0x18, 0x00, 0xc3};
  PatchRecord rec =
      plan_patch(w, hit_at(w, 1), BoundaryResult::Known(0), kPred);

  MachineState st;
  st.eip = 0x1000;
  auto no_cr3 = [](std::uint32_t, MachineState&) { FAIL("unexpected cr3 write"); };

  SUBCASE("mov imm lands exactly") {
    const EmulateResult r = emulate_patched(rec, st, no_cr3);
    CHECK_FALSE(r.guest_fault);
    CHECK(r.state.eax() == 0x0018200f);
    CHECK(r.state.eip == 0x1005);
  }

  SUBCASE("cr3 write goes through the hook with eip already advanced") {
    const std::vector<Byte> wr = {0x0f, 0x20, 0xda, 0xc3};  // cr3 from edx
    PatchRecord cr =
        plan_patch(wr, hit_at(wr, 0), BoundaryResult::Known(0), kPred);
    st.regs[kEdx] = 0x00444000;
    bool hooked = false;
    const EmulateResult r =
        emulate_patched(cr, st, [&](std::uint32_t v, MachineState& m) {
          hooked = true;
          CHECK(v == 0x00444000);
          CHECK(m.eip == 0x1003);
        });
    CHECK_FALSE(r.guest_fault);
    CHECK(hooked);
    CHECK(r.state.eip == 0x1003);
  }

  SUBCASE("cr3 read copies the live root") {
    const std::vector<Byte> rd = {0x0f, 0x22, 0xd9};  // ecx = cr3
    // Same byte class is not subtracted (0x22 prefix differs), but records
    // can still carry it after a straddle rescan; emulate directly.
    PatchRecord rc;
    rc.emulation = decode_instruction(rd);
    st.cr3 = 0x00777000;
    const EmulateResult r = emulate_patched(rc, st, no_cr3);
    CHECK_FALSE(r.guest_fault);
    CHECK(r.state.regs[kEcx] == 0x00777000);
    CHECK(r.state.eip == 0x1003);
  }

  SUBCASE("missing emulation is a guest fault, not a crash") {
    PatchRecord empty;
    const EmulateResult r = emulate_patched(empty, st, no_cr3);
    CHECK(r.guest_fault);
  }

  SUBCASE("non-cr3 control registers are faults") {
    PatchRecord cr0;
    cr0.emulation = Decoded{3, EmuKind::WriteCr, 0, 0, 0};
    const EmulateResult r = emulate_patched(cr0, st, no_cr3);
    CHECK(r.guest_fault);
  }

  SUBCASE("nop and opaque records just advance") {
    PatchRecord nop;
    nop.emulation = Decoded{1, EmuKind::Nop, 0, 0, 0};
    CHECK(emulate_patched(nop, st, no_cr3).state.eip == 0x1001);
    PatchRecord op;
    op.emulation = Decoded{2, EmuKind::Opaque, 0, 0, 0};
    CHECK(emulate_patched(op, st, no_cr3).state.eip == 0x1002);
  }
}
