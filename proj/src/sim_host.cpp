#include "fastio/sim_host.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>
#include <stdexcept>

#include "fastio/opcode_scan.hpp"

namespace fastio {

namespace {

using nlohmann::ordered_json;

std::string hexp(std::uint64_t v) {
  char b[32];
  std::snprintf(b, sizeof b, "0x%llx", static_cast<unsigned long long>(v));
  return b;
}

std::span<const Byte> page_content(const GuestMemory& mem, GpaPage p) {
  static const Page kZero{};
  const Page* pg = mem.find(p);
  return pg ? std::span<const Byte>(*pg) : std::span<const Byte>(kZero);
}

// Just enough of an assembler for the canned guests.
struct Emit {
  std::vector<Byte> bytes;

  Emit& raw(std::initializer_list<Byte> bs) {
    bytes.insert(bytes.end(), bs);
    return *this;
  }
  Emit& imm32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(Byte(v >> (8 * i)));
    return *this;
  }
  Emit& mov_mem_imm(Vaddr addr, std::uint32_t v) {  // mov dword [addr], v
    return raw({0xc7, 0x05}).imm32(addr).imm32(v);
  }
  Emit& mov_eax_mem(Vaddr addr) {  // mov eax, [addr]
    return raw({0x8b, 0x05}).imm32(addr);
  }
  Emit& ret() { return raw({0xc3}); }
};

}  // namespace

// ---- config ------------------------------------------------------------

SimConfig SimConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {
      "ram_pages",  "guests",     "deferred_patch_threshold",
      "interrupts", "terminate_on_ppt_interrupt", "step_limit"};
  for (const auto& item : j.items())
    if (!known.count(item.key()))
      throw std::invalid_argument("unknown config key: " + item.key());

  SimConfig c;
  c.ram_pages = j.value("ram_pages", c.ram_pages);
  c.guests = j.value("guests", c.guests);
  c.deferred_patch_threshold =
      j.value("deferred_patch_threshold", c.deferred_patch_threshold);
  if (j.contains("interrupts")) {
    const std::string m = j.at("interrupts").get<std::string>();
    if (m == "exit-all")
      c.interrupts = InterruptModel::ExitOnAll;
    else if (m == "posted")
      c.interrupts = InterruptModel::PostedWithShadowIdt;
    else
      throw std::invalid_argument("interrupts must be exit-all or posted");
  }
  c.terminate_on_ppt_interrupt =
      j.value("terminate_on_ppt_interrupt", c.terminate_on_ppt_interrupt);
  c.step_limit = j.value("step_limit", c.step_limit);
  return c;
}

SimConfig SimConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  return from_json(nlohmann::json::parse(in));
}

nlohmann::ordered_json SimConfig::to_json() const {
  return {{"ram_pages", ram_pages},
          {"guests", guests},
          {"deferred_patch_threshold", deferred_patch_threshold},
          {"interrupts",
           interrupts == InterruptModel::ExitOnAll ? "exit-all" : "posted"},
          {"terminate_on_ppt_interrupt", terminate_on_ppt_interrupt},
          {"step_limit", step_limit}};
}

// ---- bring-up ------------------------------------------------------------

SimHost::SimHost(SimConfig cfg)
    : cfg_(cfg),
      mem_(cfg.ram_pages),
      registry_(PptLayout{}),
      monitor_(mem_, PptLayout{},
               MonitorConfig{OpcodePredicate{}, PagingConfig{},
                             cfg.deferred_patch_threshold}),
      machine_(monitor_, MachineConfig{cfg.interrupts,
                                       cfg.terminate_on_ppt_interrupt,
                                       cfg.step_limit}),
      ids_(PptLayout{}.max_guests()) {
  // The plan parks rings at 0x400+ and the driver at 0x700; hypervisor pages
  // sit beyond ram on purpose (no guest table may ever reach them).
  if (cfg_.ram_pages < 0x800)
    throw std::invalid_argument("memory plan needs at least 0x800 ram pages");
  if (cfg_.guests > 48)
    throw std::invalid_argument("ring region fits at most 48 guests");
  monitor_.set_registry(&registry_);
  monitor_.set_ppt_root(kPptRoot);

  install_driver();
  build_ppt();
  for (GpaPage r : kRootPages) build_guest_root(r);
  for (std::uint32_t g = 0; g < cfg_.guests; ++g) register_guest();

  reset_vcpu(0);
}

void SimHost::map_ppt(VPage vpage, GpaPage target, bool writable) {
  paging::map(mem_, kPptRoot, monitor_.config().paging, vpage, target, writable,
              [this] { return alloc_hv_page(); });
}

void SimHost::install_driver() {
  driver_ = build_driver_image();
  Page& pg = mem_.page(kDriverGpa);
  pg.fill(0);
  std::copy(driver_.bytes.begin(), driver_.bytes.end(), pg.begin());

  cert_ = certify_driver(driver_, monitor_.config().predicate);
  if (attest_driver(driver_.bytes, cert_, monitor_.config().predicate) !=
      Attestation::Trusted)
    throw std::runtime_error("builtin driver failed its own attestation");

  monitor_.install_driver({kDriverGpa}, {}, {kScratchGpa, kStackGpa});
  machine_.bind_driver({
      .entry_va = driver_.entry_va(),
      .body_va = driver_.body_va(),
      .entry_site_va = driver_.code_va + DriverImage::kEntrySite,
      .exit_site_va = driver_.code_va + DriverImage::kExitSite,
      .vmcall_va = driver_.code_va + DriverImage::kVmcallOffset,
      .ppt_cr3 = driver_.ppt_cr3,
      .code_pages = {kDriverGpa},
      .image_size = std::uint32_t(driver_.bytes.size()),
  });
}

void SimHost::build_ppt() {
  const PptLayout& L = monitor_.layout();
  map_ppt(VPage(driver_.code_va >> kPageShift), kDriverGpa, false);
  map_ppt(VPage(driver_.scratch_va >> kPageShift), kScratchGpa, true);
  map_ppt(VPage((driver_.stack_top_va - 1) >> kPageShift), kStackGpa, true);
  for (std::uint32_t i = 0; i < L.device_pages; ++i) {
    const GpaPage pg = (L.pgpa_base >> kPageShift) + i;
    map_ppt(VPage(L.pdva >> kPageShift) + i, pg, true);
    monitor_.premap_device_page(pg, true);
  }
}

void SimHost::build_guest_root(GpaPage root) {
  const PagingConfig& pc = monitor_.config().paging;
  GpaPage bump = root + pc.root_pages();
  const TableAlloc alloc = [&bump] { return bump++; };
  for (std::uint32_t i = 0; i < kKernelWindowPages; ++i)
    paging::map(mem_, root, pc, kKernelVPage + i, GpaPage(i), true, alloc);
  paging::map(mem_, root, pc, VPage(driver_.code_va >> kPageShift), kDriverGpa,
              false, alloc);
}

void SimHost::register_guest() {
  const auto id = ids_.allocate();
  if (!id) throw std::runtime_error("out of slab slots");
  registry_.mark_attested(*id);  // every boot guest runs the builtin driver

  std::vector<GpaPage> rings = {ring_bump_, ring_bump_ + 1};
  std::vector<GpaPage> bufs = {ring_bump_ + 2, ring_bump_ + 3, ring_bump_ + 4,
                               ring_bump_ + 5};
  ring_bump_ += 0x10;
  const SlabMap& slab = registry_.register_guest_rings(*id, rings, bufs);

  // The slab window goes into the privileged tables now; the PGPA pages
  // behind it stay absent until the driver touches them.
  const PptLayout& L = monitor_.layout();
  const VPage base = VPage(slab.range.lo >> kPageShift);
  const GpaPage pgpa0 = (L.pgpa_start >> kPageShift) +
                        GpaPage(*id) * (L.slab_size >> kPageShift);
  for (std::size_t k = 0; k < slab.pinned.size(); ++k)
    map_ppt(base + VPage(k), pgpa0 + k, true);

  guest_ids_.push_back(*id);
}

void SimHost::reset_vcpu(std::size_t root_index) {
  machine_.set_guest_root(kRootPages.at(root_index));
  MachineState& st = machine_.state();
  st.eip = 0;
  st.stack_register() = kStackTopVa;
  st.interrupt_flag = true;
  st.zero_flag = false;
}

Vaddr SimHost::load_scenario(std::span<const Byte> code, std::uint32_t slot) {
  if (slot >= 0x10) throw std::out_of_range("scenario slot");
  if (code.size() > kPageSize) throw std::invalid_argument("scenario too big");
  const GpaPage gpa = kScenarioGpa + slot;
  // Route through the monitor first so execute rights and patches on the old
  // content are dropped the same way a guest write would drop them.
  (void)monitor_.write_access(gpa);
  machine_.invalidate_fetch_cache();
  Page& pg = mem_.page(gpa);
  pg.fill(0xc3);  // running off the end of a scenario just returns
  std::copy(code.begin(), code.end(), pg.begin());
  return kScenarioVa + slot * Vaddr(kPageSize);
}

// ---- workloads ------------------------------------------------------------

std::vector<std::string> SimHost::workload_names() {
  return {"fastio-loop", "rotate",   "selfmod",
          "straddle",    "pt-remap", "slab-touch"};
}

nlohmann::ordered_json SimHost::run_workload(const std::string& name,
                                             std::uint32_t iterations) {
  const std::uint32_t iters = std::max(iterations, 1u);
  if (name == "fastio-loop") return wl_fastio_loop(iters);
  if (name == "rotate") return wl_rotate(iters);
  if (name == "selfmod") return wl_selfmod(iters);
  if (name == "straddle") return wl_straddle(iters);
  if (name == "pt-remap") return wl_pt_remap(iters);
  if (name == "slab-touch") return wl_slab_touch(iters);
  throw std::invalid_argument("unknown workload: " + name);
}

nlohmann::ordered_json SimHost::wl_fastio_loop(std::uint32_t iters) {
  reset_vcpu(0);
  ordered_json calls = ordered_json::array();
  std::uint64_t first = 0, steady_ceiling = 0, completed = 0;
  for (std::uint32_t i = 0; i < iters; ++i) {
    const FastioResult r = machine_.fastio_call();
    if (calls.size() < 32)
      calls.push_back({{"exits", r.exits},
                       {"steps", r.steps},
                       {"completed", r.completed}});
    if (i == 0)
      first = r.exits;
    else
      steady_ceiling = std::max(steady_ceiling, r.exits);
    completed += r.completed ? 1 : 0;
  }
  return {{"workload", "fastio-loop"},
          {"iterations", iters},
          {"completed", completed},
          {"first_call_exits", first},
          {"steady_exit_ceiling", steady_ceiling},
          {"calls", calls}};
}

nlohmann::ordered_json SimHost::wl_rotate(std::uint32_t iters) {
  // Guest-resident context switch: load cr3 from eax, return. Lives on a
  // scanned page, so every execution goes through the displaced-instruction
  // emulator rather than a native cr3 write.
  const std::vector<Byte> stub = {0x0f, 0x20, 0xd8, 0xc3};
  const Vaddr stub_va = load_scenario(stub, 0);

  auto phase = [&](std::size_t nroots) -> ordered_json {
    reset_vcpu(0);
    std::uint64_t warm_exits = 0, steady_exits = 0, steady_calls = 0;
    std::uint64_t stub_failures = 0, fastio_failures = 0;
    for (std::uint32_t i = 0; i < iters; ++i) {
      const std::size_t idx = i % nroots;
      machine_.state().stack_register() = kStackTopVa;
      machine_.state().eax() =
          std::uint32_t(Gpa(kRootPages[idx]) << kPageShift);
      if (!machine_.call_at(stub_va).completed) ++stub_failures;

      const FastioResult f = machine_.fastio_call();
      if (!f.completed) ++fastio_failures;
      if (i < nroots) {
        warm_exits += f.exits;
      } else {
        steady_exits += f.exits;
        ++steady_calls;
      }
    }
    return {{"roots", nroots},
            {"calls", iters},
            {"warmup_exits", warm_exits},
            {"steady_calls", steady_calls},
            {"steady_exits", steady_exits},
            {"stub_failures", stub_failures},
            {"fastio_failures", fastio_failures}};
  };

  // Four live roots overflow the three reusable slots: every restore misses.
  // Two roots fit: after warmup the fast path never exits at all.
  ordered_json four = phase(kGuestRoots);
  ordered_json two = phase(2);
  return {{"workload", "rotate"},
          {"iterations", iters},
          {"four_roots", four},
          {"two_roots", two}};
}

nlohmann::ordered_json SimHost::wl_selfmod(std::uint32_t iters) {
  const std::vector<Byte> body = {0x0f, 0x20, 0xd8, 0xc3};
  const Vaddr va = load_scenario(body, 1);
  const GpaPage gpa = kScenarioGpa + 1;
  const std::uint32_t word0 =
      std::uint32_t(body[0]) | std::uint32_t(body[1]) << 8 |
      std::uint32_t(body[2]) << 16 | std::uint32_t(body[3]) << 24;

  reset_vcpu(0);
  ordered_json cycles = ordered_json::array();
  bool all_clean = true;
  for (std::uint32_t i = 0; i < iters; ++i) {
    machine_.state().stack_register() = kStackTopVa;
    machine_.state().eax() = std::uint32_t(machine_.state().cr3);

    StepOutcome o = StepOutcome::Ran;
    if (i > 0) machine_.poke32(va, word0, o);  // put the sequence back

    const FastioResult hot = machine_.call_at(va);
    const bool patched = monitor_.patch_at(gpa, 0) != nullptr;

    machine_.poke32(va, 0x90909090u, o);  // overwrite the patched site
    const EptEntry& e = monitor_.entry(gpa);
    const bool revoked = !e.execute && e.write;
    const bool reverted = monitor_.patch_at(gpa, 0) == nullptr;

    const FastioResult cold = machine_.call_at(va);  // rescan: now clean
    const bool repatched = monitor_.patch_at(gpa, 0) != nullptr;

    const bool clean = hot.completed && patched && revoked && reverted &&
                       cold.completed && !repatched;
    all_clean = all_clean && clean;
    if (cycles.size() < 32)
      cycles.push_back({{"exec_patched", patched},
                        {"exec_exits", hot.exits},
                        {"write_revoked_execute", revoked},
                        {"write_reverted_patch", reverted},
                        {"rescan_exits", cold.exits},
                        {"rescan_patched", repatched},
                        {"clean", clean}});
  }
  return {{"workload", "selfmod"},
          {"iterations", iters},
          {"all_cycles_clean", all_clean},
          {"cycles", cycles}};
}

nlohmann::ordered_json SimHost::wl_straddle(std::uint32_t iters) {
  // The sequence splits two bytes / one byte across a virtual page boundary.
  std::vector<Byte> pred_page(kPageSize, 0x90);
  pred_page[kPageSize - 2] = 0x0f;
  pred_page[kPageSize - 1] = 0x20;
  const std::vector<Byte> succ = {0xd8, 0xc3};
  const Vaddr pva = load_scenario(pred_page, 1);
  load_scenario(succ, 2);

  reset_vcpu(0);
  std::uint64_t first_exits = 0, steady_ceiling = 0, completed = 0;
  for (std::uint32_t i = 0; i < iters; ++i) {
    machine_.state().stack_register() = kStackTopVa;
    machine_.state().eax() = std::uint32_t(machine_.state().cr3);
    const FastioResult r = machine_.call_at(pva);
    completed += r.completed ? 1 : 0;
    if (i == 0)
      first_exits = r.exits;
    else
      steady_ceiling = std::max(steady_ceiling, r.exits);
  }

  ordered_json rec = nullptr;
  for (const PatchRecord* p : monitor_.patches()) {
    if (p->page_index != kScenarioGpa + 1 || !p->successor_page) continue;
    rec = {{"page", hexp(p->page_index)},
           {"successor_page", hexp(*p->successor_page)},
           {"hit_offset", p->hit_offset},
           {"patched_bytes", p->patch_offsets.size()},
           {"boundary_known", p->boundary.known},
           {"applied", p->applied}};
  }
  return {{"workload", "straddle"},
          {"iterations", iters},
          {"completed", completed},
          {"first_call_exits", first_exits},
          {"steady_exit_ceiling", steady_ceiling},
          {"straddle_patch", rec}};
}

nlohmann::ordered_json SimHost::wl_pt_remap(std::uint32_t iters) {
  const PagingConfig& pc = monitor_.config().paging;
  const GpaPage leaf_table = kRootPages[0] + pc.root_pages();

  reset_vcpu(0);
  ordered_json rounds = ordered_json::array();
  bool all_verified = true;
  for (std::uint32_t i = 0; i < iters; ++i) {
    const std::uint32_t k = i % 8;
    const VPage vpage = 0xc0090 + k;
    const GpaPage target = 0x70 + k;
    const Vaddr entry_va = Vaddr(0xc0000000u + Vaddr(leaf_table << kPageShift) +
                                 (vpage % pc.leaf_entries) * 8);
    const Vaddr data_va = Vaddr(vpage) << kPageShift;
    const std::uint32_t magic = 0x51ab0000u | (i & 0xffu);

    Emit e;
    e.mov_mem_imm(entry_va, std::uint32_t(target << kPageShift) | 3)
        .mov_mem_imm(entry_va + 4, 0)
        .mov_mem_imm(data_va, magic)
        .mov_eax_mem(data_va)
        .ret();
    const Vaddr code_va = load_scenario(e.bytes, 3);

    machine_.state().stack_register() = kStackTopVa;
    const std::uint64_t pt0 = monitor_.log().ptable_exits();
    const FastioResult r = machine_.call_at(code_va);
    const std::uint64_t pt_exits = monitor_.log().ptable_exits() - pt0;

    const bool landed =
        read_le32(std::span<const Byte>(page_content(mem_, target))
                      .subspan(0, 4)) == magic;
    const bool verified =
        r.completed && landed && machine_.state().eax() == magic;
    all_verified = all_verified && verified;
    if (rounds.size() < 32)
      rounds.push_back({{"vpage", hexp(vpage)},
                        {"ptable_exits", pt_exits},
                        {"verified", verified}});
  }

  // Hostile table writes go straight at the monitor: neither may stick.
  const PptLayout& L = monitor_.layout();
  const std::uint64_t pgpa_entry = ((L.pgpa_base >> kPageShift) << kPageShift) | 1;
  const std::uint64_t wild_entry = (Gpa(cfg_.ram_pages) << kPageShift) | 1;
  const Verdict v_pgpa =
      monitor_.handle_pt_write(leaf_table, 0xa0, pgpa_entry).verdict;
  const Verdict v_wild =
      monitor_.handle_pt_write(leaf_table, 0xa1, wild_entry).verdict;

  return {{"workload", "pt-remap"},
          {"iterations", iters},
          {"all_verified", all_verified},
          {"rounds", rounds},
          {"hostile_map_to_pgpa", std::string(to_string(v_pgpa))},
          {"hostile_map_past_ram", std::string(to_string(v_wild))}};
}

nlohmann::ordered_json SimHost::wl_slab_touch(std::uint32_t iters) {
  if (guest_ids_.empty())
    throw std::invalid_argument("slab-touch needs at least one slab guest");
  const SlabMap* slab = registry_.find(guest_ids_.front());
  const Vaddr ring_va = Vaddr(slab->range.lo);
  const Vaddr buf_va = slab->buffer_ppt_address(0);
  const std::uint32_t ring_word = 0x600dba11u;
  const std::uint32_t buf_word = 0x600dba22u;

  bool hook_ok = true;
  machine_.set_body_hook([&](Machine& m) {
    StepOutcome o = StepOutcome::Ran;
    hook_ok = m.poke32(ring_va + 0x40, ring_word, o) && hook_ok;
    hook_ok = m.poke32(buf_va, buf_word, o) && hook_ok;
    const auto back = m.peek32(ring_va + 0x40, o);
    hook_ok = hook_ok && back && *back == ring_word;
  });

  reset_vcpu(0);
  std::uint64_t first_exits = 0, steady_ceiling = 0, completed = 0;
  for (std::uint32_t i = 0; i < iters; ++i) {
    const FastioResult r = machine_.fastio_call();
    completed += r.completed ? 1 : 0;
    if (i == 0)
      first_exits = r.exits;
    else
      steady_ceiling = std::max(steady_ceiling, r.exits);
  }
  machine_.set_body_hook(nullptr);

  // Zero-copy evidence: the guest-physical ring page holds the bytes the
  // driver pushed through the privileged alias.
  const bool host_sees =
      read_le32(std::span<const Byte>(page_content(mem_, slab->ring_gpas[0]))
                    .subspan(0x40, 4)) == ring_word;
  const auto host_buf = registry_.translate(buf_va);
  const bool translated =
      host_buf && host_buf->owner == guest_ids_.front() &&
      read_le32(std::span<const Byte>(page_content(mem_, slab->buffer_gpas[0]))
                    .subspan(0, 4)) == buf_word;

  // A guest root that maps the alias space directly must never validate.
  const GpaPage crafted = 0x48;
  {
    GpaPage bump = crafted + monitor_.config().paging.root_pages();
    const TableAlloc alloc = [&bump] { return bump++; };
    paging::map(mem_, crafted, monitor_.config().paging, 0x123,
                (monitor_.layout().pgpa_base >> kPageShift), true, alloc);
  }
  const ValidateOutcome crafted_verdict = monitor_.protect_page_tables(crafted);

  return {{"workload", "slab-touch"},
          {"iterations", iters},
          {"completed", completed},
          {"first_call_exits", first_exits},
          {"steady_exit_ceiling", steady_ceiling},
          {"hook_io_ok", hook_ok},
          {"ring_write_visible_to_host", host_sees},
          {"buffer_translation_ok", translated},
          {"crafted_pgpa_root",
           crafted_verdict == ValidateOutcome::AttackDetected
               ? "attack-detected"
               : "accepted"}};
}

// ---- reports ------------------------------------------------------------

nlohmann::ordered_json SimHost::attack_report(AttackScenario scenario) {
  reset_vcpu(0);
  const AttackReport r = machine_.run_attack(scenario);
  return {{"scenario", to_string(r.scenario)},
          {"outcome", to_string(r.outcome)},
          {"exits", r.exits},
          {"detail", r.detail},
          {"privileged_escape", machine_.privileged_escape()}};
}

nlohmann::ordered_json SimHost::search_report() {
  reset_vcpu(0);
  const SearchReport r = machine_.search_attacks(kRootPages[1], kRootPages[2]);
  ordered_json hist;
  for (const auto& [outcome, n] : r.histogram) hist[to_string(outcome)] = n;
  ordered_json holes = ordered_json::array();
  for (const AttackCase& c : r.undetected_cases)
    holes.push_back({{"start_offset", c.start_offset},
                     {"eax", hexp(c.eax)},
                     {"interrupts_enabled", c.interrupts_enabled},
                     {"model", c.model == InterruptModel::ExitOnAll
                                   ? "exit-all"
                                   : "posted"}});
  return {{"cases", r.cases},
          {"undetected", r.undetected},
          {"histogram", hist},
          {"undetected_cases", holes}};
}

nlohmann::ordered_json SimHost::layout_report() const {
  const PptLayout& L = monitor_.layout();
  ordered_json guests = ordered_json::array();
  for (std::uint32_t id : guest_ids_) {
    const SlabMap* s = registry_.find(id);
    guests.push_back({{"id", id},
                      {"slab_lo", hexp(s->range.lo)},
                      {"slab_hi", hexp(s->range.hi)},
                      {"ring_pages", s->ring_gpas.size()},
                      {"buffer_pages", s->buffer_gpas.size()},
                      {"buffers", s->buffer_count}});
  }
  return {{"pdva", hexp(L.pdva)},
          {"device_pages", L.device_pages},
          {"device_window",
           {{"lo", hexp(L.device_window().lo)},
            {"hi", hexp(L.device_window().hi)}}},
          {"ppt_va_start", hexp(L.ppt_va_start)},
          {"slab_size", hexp(L.slab_size)},
          {"kernel_base", hexp(L.kernel_base)},
          {"max_guests", L.max_guests()},
          {"pgpa_base", hexp(L.pgpa_base)},
          {"pgpa_start", hexp(L.pgpa_start)},
          {"driver",
           {{"code_va", hexp(driver_.code_va)},
            {"image_bytes", driver_.bytes.size()},
            {"ppt_cr3", hexp(driver_.ppt_cr3)},
            {"digest", hex_bytes(cert_.image_digest)},
            {"predicate_sites", cert_.predicate_sites}}},
          {"guests", guests}};
}

nlohmann::ordered_json SimHost::exit_summary() const {
  const ExitLog& log = monitor_.log();
  static constexpr ExitReason kReasons[] = {
      ExitReason::EptExecViolation, ExitReason::EptWriteViolation,
      ExitReason::Cr3LoadExit,      ExitReason::Int3Patch,
      ExitReason::Interrupt,        ExitReason::Hypercall,
      ExitReason::NotPresentFault};
  ordered_json by_reason;
  for (ExitReason r : kReasons) by_reason[std::string(to_string(r))] = log.count(r);
  std::uint64_t detected = 0, caused = 0;
  for (const ExitEvent& ev : log.events()) {
    detected += ev.verdict == Verdict::AttackDetected ? 1 : 0;
    caused += ev.caused_exit ? 1 : 0;
  }
  return {{"events", log.total()},
          {"hardware_exits", caused},
          {"ptable_exits", log.ptable_exits()},
          {"cr3_exits", log.cr3_exits()},
          {"attack_detected_events", detected},
          {"interrupts_delivered", machine_.interrupts_delivered()},
          {"interrupts_delivered_without_exit",
           machine_.interrupts_delivered_without_exit()},
          {"by_reason", by_reason}};
}

// ---- invariants ------------------------------------------------------------

std::vector<std::string> SimHost::check_invariants() {
  std::vector<std::string> bad;
  const OpcodePredicate& pred = monitor_.config().predicate;

  for (GpaPage p : monitor_.executable_pages()) {
    const EptEntry& e = monitor_.entry(p);
    if (e.write && e.execute)
      bad.push_back("write+execute on page " + hexp(p));
    if (e.kind == PageKind::DriverCode) continue;  // attested exception
    if (!scan_page(page_content(mem_, p), pred, p).empty())
      bad.push_back("live sequence on executable page " + hexp(p));
  }

  for (GpaPage root : kRootPages) {
    if (!monitor_.is_table_page(root)) continue;  // never validated yet
    for (const auto& [a, b] : monitor_.adjacent_executable_pairs(root)) {
      if (monitor_.entry(a).kind == PageKind::DriverCode ||
          monitor_.entry(b).kind == PageKind::DriverCode)
        continue;
      if (!scan_pair(page_content(mem_, a), page_content(mem_, b), pred, a)
               .empty())
        bad.push_back("live sequence straddling pages " + hexp(a) + "/" +
                      hexp(b));
    }
    for (GpaPage t :
         paging::table_pages(mem_, root, monitor_.config().paging)) {
      const EptEntry& e = monitor_.entry(t);
      if (e.kind != PageKind::GuestPageTable || e.write || e.execute)
        bad.push_back("unshielded table page " + hexp(t) + " under root " +
                      hexp(root));
    }
  }

  for (const PatchRecord* r : monitor_.patches()) {
    if (!r->applied) continue;
    for (std::uint32_t off : r->patch_offsets) {
      GpaPage page = r->page_index;
      if (off >= kPageSize) {
        page = r->successor_page.value_or(page);
        off -= std::uint32_t(kPageSize);
      }
      if (page_content(mem_, page)[off] != 0xcc)
        bad.push_back("applied patch without int3 at " + hexp(page) + "+" +
                      hexp(off));
    }
  }

  {
    const auto hits = scan_page(page_content(mem_, kDriverGpa), pred, kDriverGpa);
    std::vector<std::uint32_t> offs;
    for (const SequenceHit& h : hits) offs.push_back(h.offset);
    if (offs != cert_.predicate_sites)
      bad.push_back("driver predicate sites drifted from the certificate");
  }

  const bool priv_cr3 =
      machine_.state().cr3 == (Gpa(kPptRoot) << kPageShift);
  if (priv_cr3 != (machine_.state().mode == CpuMode::PrivilegedPpt))
    bad.push_back("cpu mode disagrees with cr3");

  return bad;
}

// ---- fuzz ------------------------------------------------------------

nlohmann::ordered_json SimHost::fuzz(std::uint64_t seed, std::uint32_t ops,
                                     std::uint32_t check_every) {
  std::mt19937_64 rng(seed);
  const std::vector<Byte> stub = {0x0f, 0x20, 0xd8, 0xc3};
  const Vaddr stub_va = load_scenario(stub, 4);
  std::vector<Byte> pad(8, 0x90);
  pad.push_back(0xc3);
  const Vaddr pad_va = load_scenario(pad, 5);

  const PagingConfig& pc = monitor_.config().paging;
  static const char* kOpNames[] = {"fastio",  "switch-direct", "switch-stub",
                                   "selfmod", "interrupt",     "remap",
                                   "peek"};
  std::array<std::uint64_t, 7> mix{};
  std::vector<std::string> violations;
  auto violate = [&](const std::string& what, std::uint32_t op) {
    if (violations.size() < 16)
      violations.push_back(what + " at op " + std::to_string(op));
  };
  auto detected_events = [&] {
    std::uint64_t n = 0;
    for (const ExitEvent& ev : monitor_.log().events())
      n += ev.verdict == Verdict::AttackDetected ? 1 : 0;
    return n;
  };

  reset_vcpu(0);
  std::size_t cur_root = 0;
  const std::uint64_t detected0 = detected_events();

  for (std::uint32_t i = 0; i < ops; ++i) {
    const std::uint32_t op = std::uint32_t(rng() % 7);
    ++mix[op];
    machine_.state().stack_register() = kStackTopVa;
    StepOutcome o = StepOutcome::Ran;
    switch (op) {
      case 0:
        if (!machine_.fastio_call().completed) violate("fastio stalled", i);
        break;
      case 1:
        cur_root = rng() % kGuestRoots;
        machine_.set_guest_root(kRootPages[cur_root]);
        break;
      case 2: {
        cur_root = rng() % kGuestRoots;
        machine_.state().eax() =
            std::uint32_t(Gpa(kRootPages[cur_root]) << kPageShift);
        if (!machine_.call_at(stub_va).completed)
          violate("context-switch stub failed", i);
        break;
      }
      case 3: {
        machine_.poke32(pad_va + 4 * std::uint32_t(rng() % 2), 0x90909090u, o);
        if (o == StepOutcome::AttackStopped)
          violate("benign self-write flagged hostile", i);
        if (!machine_.call_at(pad_va).completed)
          violate("rescan after self-write failed", i);
        break;
      }
      case 4:
        machine_.queue_interrupt();
        break;
      case 5: {
        const std::uint32_t k = std::uint32_t(rng() % 8);
        const GpaPage leaf = kRootPages[cur_root] + pc.root_pages();
        const VPage vpage = 0xc0090 + k;
        const Vaddr entry_va =
            Vaddr(0xc0000000u + Vaddr(leaf << kPageShift) +
                  (vpage % pc.leaf_entries) * 8);
        const std::uint32_t val = std::uint32_t(rng());
        machine_.poke32(entry_va, std::uint32_t((0x70 + k) << kPageShift) | 3, o);
        machine_.poke32(entry_va + 4, 0, o);
        machine_.poke32(Vaddr(vpage) << kPageShift, val, o);
        const auto back = machine_.peek32(Vaddr(vpage) << kPageShift, o);
        if (!back || *back != val) violate("remap round-trip lost a store", i);
        break;
      }
      case 6: {
        const Vaddr va = 0xc0000000u +
                         std::uint32_t(rng() % kKernelWindowPages) * 0x1000u +
                         4 * std::uint32_t(rng() % 1024);
        (void)machine_.peek32(va, o);
        break;
      }
    }
    if (machine_.privileged_escape()) {
      violate("privileged escape", i);
      break;
    }
    if (check_every != 0 && i % check_every == check_every - 1)
      for (const std::string& v : check_invariants()) violate(v, i);
  }

  for (const std::string& v : check_invariants())
    if (violations.size() < 16) violations.push_back(v + " at end");
  const std::uint64_t new_detected = detected_events() - detected0;
  if (new_detected)
    violations.push_back("benign ops tripped the attack detector " +
                         std::to_string(new_detected) + "x");

  ordered_json mix_json;
  for (std::size_t k = 0; k < mix.size(); ++k) mix_json[kOpNames[k]] = mix[k];
  return {{"seed", seed},
          {"ops", ops},
          {"op_mix", mix_json},
          {"violations", violations},
          {"exits", exit_summary()}};
}

}  // namespace fastio
