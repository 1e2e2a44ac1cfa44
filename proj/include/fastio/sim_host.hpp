#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fastio/driver_image.hpp"
#include "fastio/ept_monitor.hpp"
#include "fastio/guest_memory.hpp"
#include "fastio/layout.hpp"
#include "fastio/machine.hpp"

namespace fastio {

// Everything a bring-up needs in one bag. JSON keys mirror the field names;
// unknown keys are rejected so config typos fail loudly.
struct SimConfig {
  GpaPage ram_pages = 0x800;
  std::uint32_t guests = 2;  // slab guests registered at boot
  std::uint32_t deferred_patch_threshold = 64;
  InterruptModel interrupts = InterruptModel::ExitOnAll;
  bool terminate_on_ppt_interrupt = true;
  std::uint64_t step_limit = 200000;

  static SimConfig from_json(const nlohmann::json& j);
  static SimConfig load_file(const std::string& path);
  nlohmann::ordered_json to_json() const;
};

// Boots the whole stack: RAM, privileged tables, the builtin
// driver (built, certified, attested, installed), four interchangeable guest
// roots, and per-guest slab registrations. The cli and the heavier tests sit
// entirely on top of this class.
//
// Physical plan (pages):
//   0x000-0x0ff  guest kernel window, identity under va 0xc0000000
//   0x010/20/30/40 +3  guest roots (leaf tables bump from root+4)
//   0x050-0x05f  scenario code slots
//   0x060        guest stack
//   0x070-0x07f  remap scratch
//   0x400+       per-guest ring/buffer pages handed to the registry
//   0x700        driver code
//   0x800,0x801  driver spill scratch / private stack (hypervisor-owned)
//   0x805-0x808  privileged root, leaf tables bump from 0x809
class SimHost {
 public:
  explicit SimHost(SimConfig cfg = {});

  Machine& machine() { return machine_; }
  EptMonitor& monitor() { return monitor_; }
  GuestMemory& memory() { return mem_; }
  SlabRegistry& registry() { return registry_; }
  const DriverImage& driver() const { return driver_; }
  const DriverCertificate& certificate() const { return cert_; }
  const SimConfig& config() const { return cfg_; }

  static constexpr std::size_t kGuestRoots = 4;
  GpaPage guest_root(std::size_t i) const { return kRootPages.at(i); }
  GpaPage ppt_root() const { return kPptRoot; }

  static constexpr Vaddr kScenarioVa = 0xc0050000;
  static constexpr GpaPage kScenarioGpa = 0x50;
  static constexpr Vaddr kStackTopVa = 0xc0061000;

  // Copies code into a scenario page slot and returns its runnable address.
  Vaddr load_scenario(std::span<const Byte> code, std::uint32_t slot = 0);

  // Resets eip/esp and re-enters the given root. Workloads call this so each
  // run starts from the same vcpu posture.
  void reset_vcpu(std::size_t root_index = 0);

  // Canned workloads; see workload_names(). iterations scales the loops.
  // Unknown names throw std::invalid_argument.
  nlohmann::ordered_json run_workload(const std::string& name,
                                      std::uint32_t iterations = 8);
  static std::vector<std::string> workload_names();

  nlohmann::ordered_json attack_report(AttackScenario scenario);
  nlohmann::ordered_json search_report();
  nlohmann::ordered_json layout_report() const;
  nlohmann::ordered_json exit_summary() const;
  std::string trace_lines() const { return monitor_.log().json_lines(); }

  // Random op soup over a live host, invariant-checked as it goes. Violations
  // come back in the report; an empty list is the pass condition.
  // Random op soup; the invariant sweep runs every `check_every` ops (0 =
  // end-of-run only; the end sweep always runs).
  nlohmann::ordered_json fuzz(std::uint64_t seed, std::uint32_t ops,
                              std::uint32_t check_every = 16);

  // Structural health: subtraction holds on every executable page and every
  // virtually adjacent executable pair, W^X, applied patches really read
  // int3, validated roots stay shielded, mode agrees with cr3.
  std::vector<std::string> check_invariants();

 private:
  static constexpr std::array<GpaPage, kGuestRoots> kRootPages = {0x10, 0x20,
                                                                  0x30, 0x40};
  static constexpr GpaPage kPptRoot = 0x805;
  static constexpr GpaPage kDriverGpa = 0x700;
  static constexpr GpaPage kScratchGpa = 0x800;
  static constexpr GpaPage kStackGpa = 0x801;
  static constexpr VPage kKernelVPage = 0xc0000;
  static constexpr std::uint32_t kKernelWindowPages = 0x100;

  GpaPage alloc_hv_page() { return hv_bump_++; }
  void map_ppt(VPage vpage, GpaPage target, bool writable);
  void build_ppt();
  void build_guest_root(GpaPage root);
  void install_driver();
  void register_guest();

  nlohmann::ordered_json wl_fastio_loop(std::uint32_t iters);
  nlohmann::ordered_json wl_rotate(std::uint32_t iters);
  nlohmann::ordered_json wl_selfmod(std::uint32_t iters);
  nlohmann::ordered_json wl_straddle(std::uint32_t iters);
  nlohmann::ordered_json wl_pt_remap(std::uint32_t iters);
  nlohmann::ordered_json wl_slab_touch(std::uint32_t iters);

  SimConfig cfg_;
  GuestMemory mem_;
  SlabRegistry registry_;
  EptMonitor monitor_;
  Machine machine_;
  DriverImage driver_;
  DriverCertificate cert_;
  GuestIdAllocator ids_;
  std::vector<std::uint32_t> guest_ids_;
  GpaPage hv_bump_ = 0x809;
  GpaPage ring_bump_ = 0x400;
};

}  // namespace fastio
