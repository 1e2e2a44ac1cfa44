#pragma once

#include <array>
#include <cstdint>
#include <optional>

#include "fastio/types.hpp"

namespace fastio {

enum class CpuMode { GuestKernel, GuestUser, PrivilegedPpt };

// Hardware cr3 target controls: four slots whose loads do not exit. Slot 0 is
// pinned to the PPT root once the driver registers; slots 1-3 are an LRU
// cache of guest roots inserted on exit-path misses.
class Cr3Targets {
 public:
  void pin(std::uint64_t ppt_root) {
    slots_[0] = ppt_root;
    pinned_ = true;
  }

  bool pinned() const { return pinned_; }
  std::optional<std::uint64_t> slot(int i) const { return slots_[std::size_t(i)]; }

  // True (and recency refreshed) when value is loadable without an exit.
  bool hit(std::uint64_t value) {
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      if (slots_[i] && *slots_[i] == value) {
        if (i != 0) ticks_[i] = ++clock_;
        return true;
      }
    }
    return false;
  }

  // Install a guest root in slots 1-3, evicting the least recently used.
  void insert(std::uint64_t value) {
    std::size_t victim = 1;
    for (std::size_t i = 1; i < slots_.size(); ++i) {
      if (!slots_[i]) { victim = i; break; }
      if (ticks_[i] < ticks_[victim]) victim = i;
    }
    slots_[victim] = value;
    ticks_[victim] = ++clock_;
  }

  void clear() {
    slots_ = {};
    ticks_ = {};
    clock_ = 0;
    pinned_ = false;
  }

 private:
  std::array<std::optional<std::uint64_t>, 4> slots_{};
  std::array<std::uint64_t, 4> ticks_{};
  std::uint64_t clock_ = 0;
  bool pinned_ = false;
};

// Register file indices for the toy ISA.
enum Reg { kEax = 0, kEcx, kEdx, kEbx, kEsp, kEbp, kEsi, kEdi };

struct MachineState {
  std::uint32_t eip = 0;
  std::array<std::uint32_t, 8> regs{};
  std::uint64_t cr3 = 0;
  bool interrupt_flag = true;
  bool zero_flag = false;
  Cr3Targets cr3_targets;
  CpuMode mode = CpuMode::GuestKernel;

  std::uint32_t& eax() { return regs[kEax]; }
  std::uint32_t eax() const { return regs[kEax]; }
  std::uint32_t& stack_register() { return regs[kEsp]; }
  std::uint32_t stack_register() const { return regs[kEsp]; }

  std::uint32_t flags_word() const {
    return (interrupt_flag ? 1u : 0u) | (zero_flag ? 2u : 0u);
  }
  void set_flags_word(std::uint32_t w) {
    interrupt_flag = w & 1;
    zero_flag = w & 2;
  }
};

}  // namespace fastio
