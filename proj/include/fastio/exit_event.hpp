#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fastio/types.hpp"

namespace fastio {

enum class ExitReason {
  EptExecViolation,
  EptWriteViolation,
  Cr3LoadExit,
  Int3Patch,
  Interrupt,
  Hypercall,
  NotPresentFault,
};

enum class Verdict { Resumed, Emulated, AttackDetected, GuestFault };

std::string_view to_string(ExitReason r);
std::string_view to_string(Verdict v);

struct ExitEvent {
  std::uint64_t seq = 0;
  ExitReason reason = ExitReason::EptExecViolation;
  Verdict verdict = Verdict::Resumed;
  std::optional<GpaPage> gpa_page;
  std::optional<Vaddr> vaddr;
  std::optional<std::uint32_t> eip;
  std::optional<std::uint64_t> cr3;
  // Posted interrupts in guest mode are delivered without trapping; they are
  // reported to the caller but never logged or counted as exits.
  bool caused_exit = true;
  // Producer-set tags feeding the two headline tallies.
  bool page_table_related = false;
  bool cr3_related = false;
  std::string detail;

  std::string json() const;
};

// Append-only trace with per-reason counters. Page-table write exits and
// cr3-flavored exits get dedicated tallies since those are the two costs the
// design trades against each other.
class ExitLog {
 public:
  const ExitEvent& append(ExitEvent ev);

  const std::vector<ExitEvent>& events() const { return events_; }
  std::uint64_t count(ExitReason r) const;
  std::uint64_t total() const { return events_.size(); }
  std::uint64_t ptable_exits() const { return ptable_exits_; }
  std::uint64_t cr3_exits() const { return cr3_exits_; }

  std::string json_lines() const;
  std::string counters_csv() const;

 private:
  std::vector<ExitEvent> events_;
  std::vector<std::uint64_t> counts_ = std::vector<std::uint64_t>(7, 0);
  std::uint64_t ptable_exits_ = 0;
  std::uint64_t cr3_exits_ = 0;
};

}  // namespace fastio
