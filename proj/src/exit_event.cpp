#include "fastio/exit_event.hpp"

#include <json.hpp>

namespace fastio {

std::string_view to_string(ExitReason r) {
  switch (r) {
    case ExitReason::EptExecViolation: return "EptExecViolation";
    case ExitReason::EptWriteViolation: return "EptWriteViolation";
    case ExitReason::Cr3LoadExit: return "Cr3LoadExit";
    case ExitReason::Int3Patch: return "Int3Patch";
    case ExitReason::Interrupt: return "Interrupt";
    case ExitReason::Hypercall: return "Hypercall";
    case ExitReason::NotPresentFault: return "NotPresentFault";
  }
  return "?";
}

std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::Resumed: return "Resumed";
    case Verdict::Emulated: return "Emulated";
    case Verdict::AttackDetected: return "AttackDetected";
    case Verdict::GuestFault: return "GuestFault";
  }
  return "?";
}

std::string ExitEvent::json() const {
  nlohmann::ordered_json j;
  j["seq"] = seq;
  j["reason"] = to_string(reason);
  j["verdict"] = to_string(verdict);
  if (gpa_page) j["gpa_page"] = *gpa_page;
  if (vaddr) j["vaddr"] = *vaddr;
  if (eip) j["eip"] = *eip;
  if (cr3) j["cr3"] = *cr3;
  if (!detail.empty()) j["detail"] = detail;
  return j.dump();
}

const ExitEvent& ExitLog::append(ExitEvent ev) {
  ev.seq = events_.size();
  counts_[std::size_t(ev.reason)] += 1;
  if (ev.page_table_related) ptable_exits_ += 1;
  if (ev.cr3_related || ev.reason == ExitReason::Cr3LoadExit) cr3_exits_ += 1;
  events_.push_back(std::move(ev));
  return events_.back();
}

std::uint64_t ExitLog::count(ExitReason r) const {
  return counts_[std::size_t(r)];
}

std::string ExitLog::json_lines() const {
  std::string out;
  for (const auto& ev : events_) {
    out += ev.json();
    out += '\n';
  }
  return out;
}

std::string ExitLog::counters_csv() const {
  std::string out = "counter,count\n";
  for (int r = 0; r < 7; ++r) {
    out += to_string(ExitReason(r));
    out += ',';
    out += std::to_string(counts_[std::size_t(r)]);
    out += '\n';
  }
  out += "ptable-exits," + std::to_string(ptable_exits_) + '\n';
  out += "cr3-exits," + std::to_string(cr3_exits_) + '\n';
  out += "total," + std::to_string(events_.size()) + '\n';
  return out;
}

}  // namespace fastio
