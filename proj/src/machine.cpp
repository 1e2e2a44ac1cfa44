#include "fastio/machine.hpp"

#include <algorithm>
#include <array>
#include <stdexcept>

#include "fastio/x86_decode.hpp"

namespace fastio {

const char* to_string(AttackScenario s) {
  switch (s) {
    case AttackScenario::EntryArbitraryEax: return "entry-arbitrary-eax";
    case AttackScenario::EntryPptWithInterrupt: return "entry-ppt-with-interrupt";
    case AttackScenario::ExitPptJump: return "exit-ppt-jump";
  }
  return "?";
}

const char* to_string(AttackOutcome o) {
  switch (o) {
    case AttackOutcome::ThwartedByExit: return "thwarted-by-exit";
    case AttackOutcome::ThwartedByHypercall: return "thwarted-by-hypercall";
    case AttackOutcome::GuestTerminated: return "guest-terminated";
    case AttackOutcome::HarmlessFault: return "harmless-fault";
    case AttackOutcome::HarmlessReturn: return "harmless-return";
    case AttackOutcome::Stalled: return "stalled";
    case AttackOutcome::Undetected: return "undetected";
  }
  return "?";
}

Machine::Machine(EptMonitor& monitor, MachineConfig cfg)
    : mon_(monitor), mem_(monitor.memory()), cfg_(cfg) {}

void Machine::bind_driver(const DriverBinding& binding) {
  driver_ = binding;
  state_.cr3_targets.pin(binding.ppt_cr3);
}

void Machine::set_guest_root(GpaPage root_page) {
  if (mon_.protect_page_tables(root_page) != ValidateOutcome::Ok)
    throw std::runtime_error("guest root failed validation");
  state_.cr3 = std::uint64_t(root_page) << kPageShift;
  state_.mode = CpuMode::GuestKernel;
  last_exec_page_ = ~GpaPage(0);
}

void Machine::set_body_hook(std::function<void(Machine&)> hook) {
  body_hook_ = std::move(hook);
}

bool Machine::in_driver_code(GpaPage page) const {
  return std::find(driver_.code_pages.begin(), driver_.code_pages.end(), page) !=
         driver_.code_pages.end();
}

std::uint64_t Machine::exits() const {
  std::uint64_t n = 0;
  for (const auto& ev : mon_.log().events()) n += ev.caused_exit ? 1 : 0;
  return n;
}

// ---- memory ----------------------------------------------------------------

std::optional<Machine::Access> Machine::translate(Vaddr va, bool /*for_write*/,
                                                  StepOutcome& out) {
  auto w = paging::walk(mem_, current_root(), mon_.config().paging, va);
  if (!w) {
    out = StepOutcome::Faulted;  // guest-level #PF, no vm exit involved
    return std::nullopt;
  }
  const GpaPage page = w->page;
  const std::uint32_t off = va & (kPageSize - 1);
  const EptEntry* e = &mon_.entry(page);
  if (!e->present) {
    if (mon_.layout().is_pgpa(Gpa(page) << kPageShift)) {
      switch (mon_.map_pgpa_on_demand(page, state_.mode)) {
        case MapOutcome::Mapped:
          e = &mon_.entry(page);
          break;
        case MapOutcome::AttackDetected:
          out = stopped(AttackOutcome::ThwartedByExit);
          return std::nullopt;
        case MapOutcome::Refused:
          out = StepOutcome::Faulted;
          return std::nullopt;
      }
    } else {
      mon_.log().append({.reason = ExitReason::NotPresentFault,
                         .verdict = Verdict::GuestFault,
                         .gpa_page = page,
                         .vaddr = va,
                         .detail = "access to unbacked page"});
      out = StepOutcome::Faulted;
      return std::nullopt;
    }
  }
  const std::uint64_t base = e->backing.value_or(Gpa(page) << kPageShift);
  return Access{page, off, base + off};
}

std::optional<std::uint32_t> Machine::read32(Vaddr va, StepOutcome& out) {
  if ((va & (kPageSize - 1)) <= kPageSize - 4) {
    auto a = translate(va, false, out);
    if (!a) return std::nullopt;
    Page& p = mem_.page(a->storage >> kPageShift);
    return read_le32(std::span<const Byte>(p).subspan(a->storage & (kPageSize - 1), 4));
  }
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    auto a = translate(va + i, false, out);
    if (!a) return std::nullopt;
    v |= std::uint32_t(mem_.page(a->storage >> kPageShift)[a->storage & (kPageSize - 1)])
         << (8 * i);
  }
  return v;
}

bool Machine::write32(Vaddr va, std::uint32_t value, StepOutcome& out) {
  if ((va & (kPageSize - 1)) > kPageSize - 4) {
    // Split stores keep per-page trap semantics; unaligned stores into
    // trapping pages are not modelled.
    for (int i = 0; i < 4; ++i) {
      auto a = translate(va + i, true, out);
      if (!a) return false;
      if (!mon_.entry(a->gpa_page).write) {
        out = StepOutcome::Faulted;
        return false;
      }
      mem_.page(a->storage >> kPageShift)[a->storage & (kPageSize - 1)] =
          Byte(value >> (8 * i));
    }
    return true;
  }

  auto a = translate(va, true, out);
  if (!a) return false;
  const EptEntry& e = mon_.entry(a->gpa_page);
  if (e.write) {
    Page& p = mem_.page(a->storage >> kPageShift);
    write_le32(std::span<Byte>(p).subspan(a->storage & (kPageSize - 1), 4), value);
    return true;
  }

  if (e.kind == PageKind::GuestPageTable) {
    const std::uint32_t within = a->offset & 7;
    if (within != 0 && within != 4) {
      out = StepOutcome::Faulted;  // entry-spanning store, not modelled
      return false;
    }
    const Gpa slot = (Gpa(a->gpa_page) << kPageShift) + (a->offset & ~std::uint32_t(7));
    std::uint64_t merged = mem_.read_u64(slot);
    merged &= ~(std::uint64_t(0xffffffff) << (within * 8));
    merged |= std::uint64_t(value) << (within * 8);
    const ExitEvent* ev =
        mon_.write_access(a->gpa_page, PtWritePayload{a->offset / 8, merged});
    if (!ev) return true;
    switch (ev->verdict) {
      case Verdict::Emulated:
      case Verdict::Resumed:
        return true;  // the monitor applied the store
      case Verdict::AttackDetected:
        out = stopped(AttackOutcome::ThwartedByExit);
        return false;
      case Verdict::GuestFault:
        out = StepOutcome::Faulted;
        return false;
    }
  }

  const ExitEvent* ev = mon_.write_access(a->gpa_page);
  if (ev) {
    switch (ev->verdict) {
      case Verdict::AttackDetected:
        out = stopped(AttackOutcome::ThwartedByExit);
        return false;
      case Verdict::GuestFault:
        out = StepOutcome::Faulted;
        return false;
      default:
        break;  // execute revoked / records dropped: store may proceed
    }
  }
  last_exec_page_ = ~GpaPage(0);  // permissions changed under us
  Page& p = mem_.page(a->storage >> kPageShift);
  write_le32(std::span<Byte>(p).subspan(a->storage & (kPageSize - 1), 4), value);
  return true;
}

bool Machine::poke32(Vaddr va, std::uint32_t value, StepOutcome& out) {
  out = StepOutcome::Ran;
  return write32(va, value, out);
}

std::optional<std::uint32_t> Machine::peek32(Vaddr va, StepOutcome& out) {
  out = StepOutcome::Ran;
  return read32(va, out);
}

bool Machine::push32(std::uint32_t value, StepOutcome& out) {
  state_.stack_register() -= 4;
  return write32(state_.stack_register(), value, out);
}

std::optional<std::uint32_t> Machine::pop32(StepOutcome& out) {
  auto v = read32(state_.stack_register(), out);
  if (v) state_.stack_register() += 4;
  return v;
}

// ---- cr3 policy ------------------------------------------------------------

void Machine::apply_cr3(std::uint32_t value) {
  const CpuMode before = state_.mode;
  state_.cr3 = value;
  state_.mode = (driver_.ppt_cr3 != 0 && value == driver_.ppt_cr3)
                    ? CpuMode::PrivilegedPpt
                    : CpuMode::GuestKernel;
  last_exec_page_ = ~GpaPage(0);  // new address space: re-vet fetches
  if (search_irq_on_ppt_entry_ && !search_irq_queued_ &&
      state_.mode == CpuMode::PrivilegedPpt && before != CpuMode::PrivilegedPpt) {
    queue_interrupt();
    search_irq_queued_ = true;
  }
}

StepOutcome Machine::load_cr3(std::uint32_t value, SiteKind site) {
  if (state_.cr3_targets.hit(value)) {  // slot hit: no exit, recency refreshed
    apply_cr3(value);
    return StepOutcome::Ran;
  }

  ExitEvent ev{.reason = ExitReason::Cr3LoadExit,
               .verdict = Verdict::Resumed,
               .eip = state_.eip,
               .cr3 = value,
               .caused_exit = site != SiteKind::NonSite,
               .cr3_related = true};

  if (site == SiteKind::Entry) {
    // The entry site may only ever load the pinned slot; any miss here is
    // someone steering it with a forged register.
    ev.verdict = Verdict::AttackDetected;
    ev.detail = "entry site loaded a root outside the target set";
    mon_.log().append(std::move(ev));
    return stopped(AttackOutcome::ThwartedByExit);
  }

  if (value & (kPageSize - 1)) {
    ev.verdict = Verdict::GuestFault;
    ev.detail = "misaligned root";
    mon_.log().append(std::move(ev));
    return StepOutcome::Faulted;
  }

  const GpaPage root = value >> kPageShift;
  switch (mon_.protect_page_tables(root)) {
    case ValidateOutcome::Ok:
      if (site == SiteKind::Exit) state_.cr3_targets.insert(value);
      apply_cr3(value);
      ev.detail = site == SiteKind::Exit ? "validated and cached" : "validated";
      mon_.log().append(std::move(ev));
      return StepOutcome::Ran;
    case ValidateOutcome::AttackDetected:
      ev.verdict = Verdict::AttackDetected;
      ev.detail = "new root maps protected space";
      mon_.log().append(std::move(ev));
      return stopped(AttackOutcome::ThwartedByExit);
    case ValidateOutcome::GuestFault:
    default:
      ev.verdict = Verdict::GuestFault;
      ev.detail = "root tables unbacked";
      mon_.log().append(std::move(ev));
      return StepOutcome::Faulted;
  }
}

StepOutcome Machine::hypercall() {
  if (state_.mode == CpuMode::PrivilegedPpt) {
    // Only the driver tail issues hypercalls from the privileged space, and
    // only when its return switch failed to leave it.
    mon_.log().append({.reason = ExitReason::Hypercall,
                       .verdict = Verdict::AttackDetected,
                       .eip = state_.eip,
                       .cr3 = state_.cr3,
                       .detail = "self-check: still on privileged root"});
    return stopped(AttackOutcome::ThwartedByHypercall);
  }
  mon_.log().append({.reason = ExitReason::Hypercall,
                     .verdict = Verdict::Resumed,
                     .eip = state_.eip,
                     .detail = "guest hypercall"});
  state_.eip += 3;
  return StepOutcome::Ran;
}

// ---- interrupts ------------------------------------------------------------

void Machine::queue_interrupt() {
  pending_irqs_ += 1;
  irq_exit_logged_ = false;
}

StepOutcome Machine::deliver_pending_interrupt() {
  if (pending_irqs_ == 0) return StepOutcome::Ran;
  const bool ppt = state_.mode == CpuMode::PrivilegedPpt;
  const bool open = state_.interrupt_flag;

  if (cfg_.interrupts == InterruptModel::ExitOnAll) {
    if (!irq_exit_logged_) {
      irq_exit_logged_ = true;
      ExitEvent ev{.reason = ExitReason::Interrupt,
                   .verdict = Verdict::Resumed,
                   .eip = state_.eip,
                   .detail = "external interrupt"};
      if (ppt && open) {
        ev.verdict = Verdict::AttackDetected;
        ev.detail = "interrupt window open inside the privileged space";
        mon_.log().append(std::move(ev));
        pending_irqs_ -= 1;
        irq_exit_logged_ = false;
        stopped(cfg_.terminate_on_ppt_interrupt ? AttackOutcome::GuestTerminated
                                                : AttackOutcome::ThwartedByExit);
        if (cfg_.terminate_on_ppt_interrupt) return StepOutcome::AttackStopped;
        return StepOutcome::Ran;
      }
      if (ppt) ev.detail = "held: privileged space runs masked";
      mon_.log().append(std::move(ev));
    }
    if (!ppt && open) {
      pending_irqs_ -= 1;
      delivered_ += 1;
      irq_exit_logged_ = false;
    }
    return StepOutcome::Ran;
  }

  // Posted delivery: guest-mode interrupts land without any exit at all.
  if (ppt) {
    if (open) {
      mon_.log().append({.reason = ExitReason::NotPresentFault,
                         .verdict = Verdict::AttackDetected,
                         .eip = state_.eip,
                         .detail = "delivery walked the shadow tables and found nothing"});
      pending_irqs_ -= 1;
      stopped(cfg_.terminate_on_ppt_interrupt ? AttackOutcome::GuestTerminated
                                              : AttackOutcome::ThwartedByExit);
      if (cfg_.terminate_on_ppt_interrupt) return StepOutcome::AttackStopped;
    }
    return StepOutcome::Ran;
  }
  if (open) {
    pending_irqs_ -= 1;
    delivered_ += 1;
    delivered_quietly_ += 1;
  }
  return StepOutcome::Ran;
}

// ---- fetch & execute -------------------------------------------------------

bool Machine::ensure_exec(GpaPage page, VPage vpage, StepOutcome& out) {
  bool vetted = false;
  if (page == last_exec_page_) {
    vetted = true;
  } else {
    const EptEntry& e = mon_.entry(page);
    if (e.present && e.execute) {
      last_exec_page_ = page;
      vetted = true;
    } else {
      ExecResult res = mon_.request_execute(page, vpage);
      if (res.granted) {
        last_exec_page_ = page;
        vetted = true;
      } else if (res.deferred) {
        vetted = true;  // no execute granted: every fetch here re-traps
      } else {
        out = (res.event && res.event->verdict == Verdict::AttackDetected)
                  ? stopped(AttackOutcome::ThwartedByExit)
                  : StepOutcome::Faulted;
      }
    }
  }
  if (vetted && state_.mode == CpuMode::PrivilegedPpt && !in_driver_code(page))
    escape_ = true;  // privileged fetch outside the attested driver: a hole
  return vetted;
}

std::optional<Machine::Access> Machine::fetch_access(StepOutcome& out) {
  auto w = paging::walk(mem_, current_root(), mon_.config().paging, state_.eip);
  if (!w) {
    out = StepOutcome::Faulted;
    return std::nullopt;
  }
  return Access{w->page, std::uint32_t(state_.eip & (kPageSize - 1)), 0};
}

StepOutcome Machine::step() {
  if (pending_irqs_ != 0) {
    StepOutcome o = deliver_pending_interrupt();
    if (o != StepOutcome::Ran) return o;
  }
  if (state_.eip == kSentinelVa) return StepOutcome::SentinelReturn;

  if (state_.eip == driver_.body_va) {
    if (!body_ran_) {
      body_ran_ = true;
      if (body_hook_) body_hook_(*this);
    }
  } else {
    body_ran_ = false;
  }

  StepOutcome out = StepOutcome::Ran;
  const VPage vpage = state_.eip >> kPageShift;
  const std::uint32_t off = state_.eip & (kPageSize - 1);
  mon_.set_active_root(current_root());
  auto at = fetch_access(out);
  if (!at) return out;
  // The faulting rip is by definition an instruction start; telling the
  // monitor before the execute request lets the first-fetch scan decode
  // forward from it instead of deferring the whole page.
  mon_.note_eip(at->gpa_page, off);
  if (!ensure_exec(at->gpa_page, vpage, out)) return out;
  if (escape_) return StepOutcome::Halted;  // recorded; stop the vcpu

  // Instruction window: rest of this page plus, opportunistically, the head
  // of the next mapped page.
  const Page& pg = mem_.page(at->gpa_page);
  const std::size_t first_len = std::min<std::size_t>(15, kPageSize - off);
  std::array<Byte, 15> win;
  std::size_t win_len = first_len;
  std::copy_n(pg.begin() + off, first_len, win.begin());
  std::optional<WalkResult> next_walk;
  if (first_len < 15) {
    next_walk = paging::walk(mem_, current_root(), mon_.config().paging,
                             Vaddr((vpage + 1) * kPageSize));
    if (next_walk && mon_.entry(next_walk->page).present) {
      const Page& np = mem_.page(next_walk->page);
      std::copy_n(np.begin(), 15 - first_len, win.begin() + first_len);
      win_len = 15;
    }
  }
  const std::span<const Byte> code(win.data(), win_len);

  if (win[0] == 0xcc) return handle_patched(*at);

  auto d = decode_instruction(code);
  if (!d) return StepOutcome::Faulted;  // undecodable: guest #UD
  if (d->length > first_len) {
    if (!next_walk) return StepOutcome::Faulted;
    if (!ensure_exec(next_walk->page, vpage + 1, out)) return out;
    if (escape_) return StepOutcome::Halted;
    // Vetting the successor may have planted a breakpoint under this very
    // instruction (the pair scan runs there); refetch before retiring it.
    std::copy_n(pg.begin() + off, first_len, win.begin());
    const Page& np = mem_.page(next_walk->page);
    std::copy_n(np.begin(), 15 - first_len, win.begin() + first_len);
    if (win[0] == 0xcc) return handle_patched(*at);
    d = decode_instruction(code);
    if (!d) return StepOutcome::Faulted;
  }
  return exec_one(code, *d);
}

StepOutcome Machine::handle_patched(const Access& at) {
  const PatchRecord* rec = mon_.patch_at(at.gpa_page, at.offset);
  if (!rec) {
    mon_.log().append({.reason = ExitReason::Int3Patch,
                       .verdict = Verdict::GuestFault,
                       .gpa_page = at.gpa_page,
                       .eip = state_.eip,
                       .detail = "breakpoint the hypervisor does not own"});
    return StepOutcome::Faulted;
  }

  std::uint32_t cr3_value = 0;
  bool cr3_seen = false;
  EmulateResult r = emulate_patched(
      *rec, state_, [&](std::uint32_t value, MachineState&) {
        cr3_value = value;
        cr3_seen = true;
      });
  if (r.guest_fault) {
    mon_.log().append({.reason = ExitReason::Int3Patch,
                       .verdict = Verdict::GuestFault,
                       .gpa_page = at.gpa_page,
                       .eip = state_.eip,
                       .detail = "patched site with no emulation recipe"});
    return StepOutcome::Faulted;
  }

  const std::uint32_t site_eip = state_.eip;
  state_ = r.state;
  StepOutcome inner = StepOutcome::Ran;
  if (cr3_seen) inner = load_cr3(cr3_value, SiteKind::NonSite);

  ExitEvent ev{.reason = ExitReason::Int3Patch,
               .verdict = Verdict::Emulated,
               .gpa_page = at.gpa_page,
               .eip = site_eip,
               .cr3_related = cr3_seen};
  if (inner == StepOutcome::AttackStopped) ev.verdict = Verdict::AttackDetected;
  if (inner == StepOutcome::Faulted) ev.verdict = Verdict::GuestFault;
  ev.detail = "displaced instruction emulated";
  mon_.log().append(std::move(ev));
  return inner;
}

StepOutcome Machine::exec_one(std::span<const Byte> code, const Decoded& d) {
  MachineState& st = state_;
  const std::uint32_t next = st.eip + d.length;
  StepOutcome out = StepOutcome::Ran;
  const Byte op = code[0];

  auto imm32_at = [&](std::size_t i) {
    return read_le32(code.subspan(i, 4));
  };
  auto rel8 = [&](std::size_t i) { return std::int32_t(std::int8_t(code[i])); };

  switch (op) {
    case 0x90: st.eip = next; return StepOutcome::Ran;
    case 0x9c:
      if (!push32(st.flags_word(), out)) return out;
      st.eip = next;
      return StepOutcome::Ran;
    case 0x9d: {
      auto v = pop32(out);
      if (!v) return out;
      st.set_flags_word(*v);
      st.eip = next;
      return StepOutcome::Ran;
    }
    case 0xfa: st.interrupt_flag = false; st.eip = next; return StepOutcome::Ran;
    case 0xfb: st.interrupt_flag = true; st.eip = next; return StepOutcome::Ran;
    case 0xf4: st.eip = next; return StepOutcome::Halted;
    case 0xc3: {
      auto v = pop32(out);
      if (!v) return out;
      st.eip = *v;
      return StepOutcome::Ran;
    }
    case 0xe8: {
      if (!push32(next, out)) return out;
      st.eip = next + imm32_at(1);
      return StepOutcome::Ran;
    }
    case 0xe9: st.eip = next + imm32_at(1); return StepOutcome::Ran;
    case 0xeb: st.eip = next + rel8(1); return StepOutcome::Ran;
    case 0x74: st.eip = st.zero_flag ? next + rel8(1) : next; return StepOutcome::Ran;
    case 0x75: st.eip = st.zero_flag ? next : next + rel8(1); return StepOutcome::Ran;
    case 0x3d:
      st.zero_flag = st.eax() == imm32_at(1);
      st.eip = next;
      return StepOutcome::Ran;
    case 0x68:
      if (!push32(imm32_at(1), out)) return out;
      st.eip = next;
      return StepOutcome::Ran;
    case 0x50: case 0x51: case 0x52: case 0x53:
    case 0x54: case 0x55: case 0x56: case 0x57:
      if (!push32(st.regs[op - 0x50], out)) return out;
      st.eip = next;
      return StepOutcome::Ran;
    case 0x58: case 0x59: case 0x5a: case 0x5b:
    case 0x5c: case 0x5d: case 0x5e: case 0x5f: {
      auto v = pop32(out);
      if (!v) return out;
      st.regs[op - 0x58] = *v;
      st.eip = next;
      return StepOutcome::Ran;
    }
    case 0xb8: case 0xb9: case 0xba: case 0xbb:
    case 0xbc: case 0xbd: case 0xbe: case 0xbf:
      st.regs[op - 0xb8] = imm32_at(1);
      st.eip = next;
      return StepOutcome::Ran;
    case 0x89: {  // mov r/m32, r32
      const Byte modrm = code[1];
      const Byte reg = (modrm >> 3) & 7, rm = modrm & 7, mod = modrm >> 6;
      if (mod == 3) {
        st.regs[rm] = st.regs[reg];
      } else if (mod == 0 && rm == 5) {
        if (!write32(imm32_at(2), st.regs[reg], out)) return out;
      } else {
        return StepOutcome::Faulted;
      }
      st.eip = next;
      return StepOutcome::Ran;
    }
    case 0x8b: {  // mov r32, r/m32
      const Byte modrm = code[1];
      const Byte reg = (modrm >> 3) & 7, rm = modrm & 7, mod = modrm >> 6;
      if (mod == 3) {
        st.regs[reg] = st.regs[rm];
      } else if (mod == 0 && rm == 5) {
        auto v = read32(imm32_at(2), out);
        if (!v) return out;
        st.regs[reg] = *v;
      } else {
        return StepOutcome::Faulted;
      }
      st.eip = next;
      return StepOutcome::Ran;
    }
    case 0xc7: {  // mov r/m32, imm32
      const Byte modrm = code[1];
      const Byte rm = modrm & 7, mod = modrm >> 6;
      if (mod == 3) {
        st.regs[rm] = imm32_at(2);
      } else if (mod == 0 && rm == 5) {
        if (!write32(imm32_at(2), imm32_at(6), out)) return out;
      } else {
        return StepOutcome::Faulted;
      }
      st.eip = next;
      return StepOutcome::Ran;
    }
    case 0x01: case 0x09: case 0x21: case 0x29:
    case 0x31: case 0x39: case 0x85: {  // reg-reg ALU, enough for test guests
      const Byte modrm = code[1];
      if ((modrm >> 6) != 3) return StepOutcome::Faulted;
      const Byte reg = (modrm >> 3) & 7, rm = modrm & 7;
      const std::uint32_t a = st.regs[rm], b = st.regs[reg];
      std::uint32_t r = 0;
      switch (op) {
        case 0x01: r = a + b; st.regs[rm] = r; break;
        case 0x09: r = a | b; st.regs[rm] = r; break;
        case 0x21: r = a & b; st.regs[rm] = r; break;
        case 0x29: r = a - b; st.regs[rm] = r; break;
        case 0x31: r = a ^ b; st.regs[rm] = r; break;
        case 0x39: r = a - b; break;
        case 0x85: r = a & b; break;
      }
      st.zero_flag = r == 0;
      st.eip = next;
      return StepOutcome::Ran;
    }
    case 0x0f: {
      const Byte second = code[1];
      if (second == 0x20 || second == 0x22) {
        const Byte modrm = code[2];
        const Byte cr = (modrm >> 3) & 7, rm = modrm & 7;
        if (cr != 3) return StepOutcome::Faulted;
        if (second == 0x22) {  // read cr3 into a register: never exits
          st.regs[rm] = std::uint32_t(st.cr3);
          st.eip = next;
          return StepOutcome::Ran;
        }
        SiteKind site = SiteKind::NonSite;
        if (st.eip == driver_.entry_site_va) site = SiteKind::Entry;
        else if (st.eip == driver_.exit_site_va) site = SiteKind::Exit;
        st.eip = next;
        return load_cr3(st.regs[rm], site);
      }
      if (second == 0x01 && code[2] == 0xc1) return hypercall();
      return StepOutcome::Faulted;
    }
    default:
      return StepOutcome::Faulted;
  }
}

// ---- drivers of execution --------------------------------------------------

StepOutcome Machine::run(std::uint64_t max_steps) {
  const std::uint64_t limit = max_steps ? max_steps : cfg_.step_limit;
  for (std::uint64_t i = 0; i < limit; ++i) {
    StepOutcome o = step();
    if (o != StepOutcome::Ran) return o;
  }
  return StepOutcome::Ran;  // still going: caller reads this as a stall
}

FastioResult Machine::call_at(Vaddr va) {
  FastioResult r;
  const std::uint64_t exits0 = exits();
  StepOutcome out = StepOutcome::Ran;
  if (!push32(kSentinelVa, out)) {
    r.outcome = out;
    return r;
  }
  state_.eip = va;
  for (std::uint64_t i = 0; i < cfg_.step_limit; ++i) {
    out = step();
    ++r.steps;
    if (out != StepOutcome::Ran) break;
  }
  r.outcome = out;
  r.completed = out == StepOutcome::SentinelReturn;
  r.exits = exits() - exits0;
  return r;
}

AttackReport Machine::run_attack(AttackScenario scenario, GpaPage /*cached_root*/) {
  AttackReport rep{.scenario = scenario};
  const std::uint64_t exits0 = exits();
  const std::uint64_t seq0 = mon_.log().total();
  escape_ = false;
  detected_as_.reset();
  body_ran_ = false;
  last_exec_page_ = ~GpaPage(0);

  StepOutcome end = StepOutcome::Ran;
  switch (scenario) {
    case AttackScenario::EntryArbitraryEax:
      state_.eax() = 0x31337000;  // page-aligned garbage, never a real root
      state_.eip = driver_.entry_site_va;
      end = run();
      rep.detail = "forged root handed to the entry site";
      break;
    case AttackScenario::EntryPptWithInterrupt:
      state_.eax() = driver_.ppt_cr3;
      state_.interrupt_flag = true;  // attacker skipped the masking prologue
      state_.eip = driver_.entry_site_va;
      end = step();  // the switch itself: slot-pinned, silent
      if (end == StepOutcome::Ran) {
        queue_interrupt();  // device interrupt lands inside the window
        end = run();
      }
      rep.detail = "privileged entry with the interrupt window open";
      break;
    case AttackScenario::ExitPptJump:
      state_.eax() = driver_.ppt_cr3;
      state_.eip = driver_.exit_site_va;
      end = run();
      rep.detail = "exit site steered back onto the privileged root";
      break;
  }
  rep.outcome = classify_run(end, seq0);
  rep.exits = exits() - exits0;
  return rep;
}

AttackOutcome Machine::classify_run(StepOutcome end, std::uint64_t seq0) {
  if (escape_) return AttackOutcome::Undetected;
  if (detected_as_) return *detected_as_;
  const auto& evs = mon_.log().events();
  for (std::size_t i = seq0; i < evs.size(); ++i)
    if (evs[i].verdict == Verdict::AttackDetected) return AttackOutcome::ThwartedByExit;
  switch (end) {
    case StepOutcome::Faulted: return AttackOutcome::HarmlessFault;
    case StepOutcome::SentinelReturn: return AttackOutcome::HarmlessReturn;
    default: return AttackOutcome::Stalled;
  }
}

SearchReport Machine::search_attacks(GpaPage cached_root, GpaPage uncached_root) {
  SearchReport rep;
  const MachineState saved_state = state_;
  const MachineConfig saved_cfg = cfg_;
  const GpaPage guest_root = current_root();

  const std::array<std::uint32_t, 3> eax_choices = {
      driver_.ppt_cr3, std::uint32_t(Gpa(cached_root) << kPageShift),
      std::uint32_t(Gpa(uncached_root) << kPageShift)};

  search_irq_on_ppt_entry_ = true;
  for (InterruptModel model :
       {InterruptModel::ExitOnAll, InterruptModel::PostedWithShadowIdt}) {
    for (std::uint32_t off = 0; off < driver_.image_size; ++off) {
      for (std::uint32_t eax : eax_choices) {
        for (int irq_open = 0; irq_open < 2; ++irq_open) {
          cfg_.interrupts = model;
          state_ = MachineState{};
          state_.cr3_targets.pin(driver_.ppt_cr3);
          state_.cr3_targets.insert(Gpa(cached_root) << kPageShift);
          state_.cr3 = Gpa(guest_root) << kPageShift;
          state_.mode = CpuMode::GuestKernel;
          state_.stack_register() = saved_state.stack_register();
          state_.eax() = eax;
          state_.interrupt_flag = irq_open != 0;
          state_.eip = driver_.entry_va + off;

          pending_irqs_ = 1;
          irq_exit_logged_ = false;
          escape_ = false;
          detected_as_.reset();
          search_irq_queued_ = false;
          body_ran_ = false;
          last_exec_page_ = ~GpaPage(0);

          const std::uint64_t seq0 = mon_.log().total();
          StepOutcome out = StepOutcome::Ran;
          if (push32(kSentinelVa, out)) out = run(4000);
          const AttackOutcome verdict = classify_run(out, seq0);

          rep.cases += 1;
          rep.histogram[verdict] += 1;
          if (verdict == AttackOutcome::Undetected) {
            rep.undetected += 1;
            rep.undetected_cases.push_back(
                {off, eax, irq_open != 0, model, verdict});
          }
        }
      }
    }
  }
  search_irq_on_ppt_entry_ = false;
  pending_irqs_ = 0;
  state_ = saved_state;
  cfg_ = saved_cfg;
  return rep;
}

}  // namespace fastio
