#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fastio/driver_image.hpp"
#include "fastio/ept_monitor.hpp"
#include "fastio/guest_memory.hpp"
#include "fastio/machine_state.hpp"
#include "fastio/x86_decode.hpp"

namespace fastio {

enum class StepOutcome {
  Ran,             // one instruction retired (or was emulated)
  Halted,          // hlt
  Faulted,         // guest-visible fault with no handler; vcpu stops
  AttackStopped,   // hypervisor detected hostile behaviour and stopped the vcpu
  SentinelReturn,  // control reached the call sentinel
};

enum class InterruptModel {
  ExitOnAll,            // every device interrupt exits to the hypervisor
  PostedWithShadowIdt,  // delivered in guest mode without exits; the
                        // privileged space sees only a shadow IDT
};

enum class AttackScenario {
  EntryArbitraryEax,       // jump to the entry site with a forged root in eax
  EntryPptWithInterrupt,   // enter the privileged space with interrupts on
  ExitPptJump,             // jump to the exit site already holding the
                           // privileged root
};

enum class AttackOutcome {
  ThwartedByExit,       // a vm exit fired and the hypervisor refused
  ThwartedByHypercall,  // the driver's own self-check reported in
  GuestTerminated,      // hypervisor policy killed the guest
  HarmlessFault,        // attack crashed the guest without reaching anything
  HarmlessReturn,       // control fell out of the driver with nothing gained
  Stalled,              // ran out of steps going nowhere
  Undetected,           // privileged execution outside the driver: a real hole
};

const char* to_string(AttackScenario s);
const char* to_string(AttackOutcome o);

struct MachineConfig {
  InterruptModel interrupts = InterruptModel::ExitOnAll;
  // An enabled-interrupt window inside the privileged space is unrecoverable
  // from the guest's point of view; default policy is to kill the guest.
  bool terminate_on_ppt_interrupt = true;
  std::uint64_t step_limit = 200000;
};

// Where the driver lives, as the hypervisor sees it after attestation.
struct DriverBinding {
  Vaddr entry_va = 0;
  Vaddr body_va = 0;
  Vaddr entry_site_va = 0;
  Vaddr exit_site_va = 0;
  Vaddr vmcall_va = 0;
  std::uint32_t ppt_cr3 = 0;
  std::vector<GpaPage> code_pages;
  std::uint32_t image_size = 0;
};

struct FastioResult {
  bool completed = false;
  StepOutcome outcome = StepOutcome::Ran;
  std::uint64_t exits = 0;  // hardware exits during the call
  std::uint64_t steps = 0;
};

struct AttackReport {
  AttackScenario scenario;
  AttackOutcome outcome = AttackOutcome::Undetected;
  std::uint64_t exits = 0;
  std::string detail;
};

struct AttackCase {
  std::uint32_t start_offset = 0;
  std::uint32_t eax = 0;
  bool interrupts_enabled = false;
  InterruptModel model = InterruptModel::ExitOnAll;
  AttackOutcome outcome = AttackOutcome::Undetected;
};

struct SearchReport {
  std::uint64_t cases = 0;
  std::uint64_t undetected = 0;
  std::map<AttackOutcome, std::uint64_t> histogram;
  std::vector<AttackCase> undetected_cases;  // empty when the defence holds
};

// Single-vcpu interpreter for the 32-bit subset the driver and the test
// guests use, with the hypervisor's exit handling folded in.  Page walks go
// through the guest's own tables; every physical touch is checked against
// the monitor.
class Machine {
 public:
  Machine(EptMonitor& monitor, MachineConfig cfg = {});

  MachineState& state() { return state_; }
  const MachineState& state() const { return state_; }
  const MachineConfig& config() const { return cfg_; }
  EptMonitor& monitor() { return mon_; }

  // Boot-time wiring.  set_guest_root validates and write-protects the
  // root's tables; it does not populate the target cache.
  void bind_driver(const DriverBinding& binding);
  void set_guest_root(GpaPage root_page);
  void set_body_hook(std::function<void(Machine&)> hook);

  StepOutcome step();
  StepOutcome run(std::uint64_t max_steps = 0);  // 0: config limit

  // Push a sentinel return address, jump to va, run until the callee
  // returns (or stops). Exit deltas count caused_exit events only.
  FastioResult call_at(Vaddr va);

  // call_at on the driver entry point.
  FastioResult fastio_call() { return call_at(driver_.entry_va); }

  void queue_interrupt();
  std::uint64_t interrupts_delivered() const { return delivered_; }
  std::uint64_t interrupts_delivered_without_exit() const {
    return delivered_quietly_;
  }

  AttackReport run_attack(AttackScenario scenario, GpaPage cached_root = 0);
  SearchReport search_attacks(GpaPage cached_root, GpaPage uncached_root);

  // vcpu-initiated data accesses without encoded instructions: same walks,
  // same traps, same verdicts. Body hooks and tests drive these.
  bool poke32(Vaddr va, std::uint32_t value, StepOutcome& out);
  std::optional<std::uint32_t> peek32(Vaddr va, StepOutcome& out);

  // After host-side stores into guest pages (loaders, DMA): the vetted-fetch
  // shortcut must not survive bytes it never saw.
  void invalidate_fetch_cache() { last_exec_page_ = ~GpaPage(0); }

  bool privileged_escape() const { return escape_; }
  std::uint64_t exits() const;  // caused_exit entries in the shared log

  static constexpr Vaddr kSentinelVa = 0xfffff000;

 private:
  enum class SiteKind { Entry, Exit, NonSite };
  struct Access {
    GpaPage gpa_page = 0;
    std::uint32_t offset = 0;
    std::uint64_t storage = 0;  // where the bytes actually live
  };

  GpaPage current_root() const { return GpaPage(state_.cr3 >> kPageShift); }
  bool in_driver_code(GpaPage page) const;

  std::optional<Access> translate(Vaddr va, bool for_write, StepOutcome& out);
  std::optional<Access> fetch_access(StepOutcome& out);
  bool ensure_exec(GpaPage page, VPage vpage, StepOutcome& out);
  std::optional<std::uint32_t> read32(Vaddr va, StepOutcome& out);
  bool write32(Vaddr va, std::uint32_t value, StepOutcome& out);
  bool push32(std::uint32_t value, StepOutcome& out);
  std::optional<std::uint32_t> pop32(StepOutcome& out);

  StepOutcome deliver_pending_interrupt();
  StepOutcome exec_one(std::span<const Byte> code, const Decoded& d);
  StepOutcome handle_patched(const Access& at);
  StepOutcome load_cr3(std::uint32_t value, SiteKind site);
  void apply_cr3(std::uint32_t value);
  StepOutcome hypercall();
  AttackOutcome classify_run(StepOutcome end, std::uint64_t first_event_seq);

  StepOutcome stopped(AttackOutcome o) {
    if (!detected_as_) detected_as_ = o;
    return StepOutcome::AttackStopped;
  }

  EptMonitor& mon_;
  GuestMemory& mem_;
  MachineConfig cfg_;
  MachineState state_;
  DriverBinding driver_;
  std::function<void(Machine&)> body_hook_;

  GpaPage last_exec_page_ = ~GpaPage(0);
  std::uint64_t pending_irqs_ = 0;
  bool irq_exit_logged_ = false;  // held interrupt already cost its exit
  std::uint64_t delivered_ = 0;
  std::uint64_t delivered_quietly_ = 0;
  bool escape_ = false;
  bool body_ran_ = false;
  std::optional<AttackOutcome> detected_as_;
  bool search_irq_on_ppt_entry_ = false;
  bool search_irq_queued_ = false;
};

}  // namespace fastio
