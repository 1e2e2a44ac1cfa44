// Command-line front end: scan bytes, replay attacks, trace workloads, dump
// the address-space plan, benchmark the switch, fuzz the whole stack. Exit
// status is 0 only when the run saw no security violation.

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fastio/bench.hpp"
#include "fastio/driver_image.hpp"
#include "fastio/opcode_scan.hpp"
#include "fastio/sim_host.hpp"

namespace {

using fastio::Byte;
using nlohmann::ordered_json;

std::vector<Byte> parse_hex(std::string s) {
  std::erase_if(s, [](char c) { return c == ' ' || c == ':' || c == ','; });
  if (s.size() % 2) throw std::invalid_argument("odd hex digit count");
  std::vector<Byte> out;
  for (std::size_t i = 0; i < s.size(); i += 2)
    out.push_back(Byte(std::stoul(s.substr(i, 2), nullptr, 16)));
  return out;
}

std::vector<Byte> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int emit(const std::string& out_path, const std::string& text) {
  if (out_path.empty()) {
    std::cout << text << "\n";
    return 0;
  }
  std::ofstream f(out_path);
  if (!f) {
    std::cerr << "cannot write " << out_path << "\n";
    return 2;
  }
  f << text << "\n";
  return 0;
}

ordered_json scan_buffer(const std::vector<Byte>& bytes,
                         const fastio::OpcodePredicate& pred) {
  ordered_json hits = ordered_json::array();
  const std::size_t pages = (bytes.size() + fastio::kPageSize - 1) / fastio::kPageSize;
  std::vector<std::span<const Byte>> chunks;
  for (std::size_t p = 0; p < pages; ++p) {
    const std::size_t lo = p * fastio::kPageSize;
    chunks.push_back(std::span<const Byte>(bytes).subspan(
        lo, std::min(fastio::kPageSize, bytes.size() - lo)));
  }
  auto add = [&](const fastio::SequenceHit& h) {
    hits.push_back({{"page", h.page_index},
                    {"offset", h.offset},
                    {"bytes", fastio::hex_bytes(h.matched_bytes)},
                    {"straddles_boundary", h.straddles_boundary}});
  };
  for (std::size_t p = 0; p < chunks.size(); ++p) {
    for (const auto& h : fastio::scan_page(chunks[p], pred, p)) add(h);
    if (p + 1 < chunks.size())
      for (const auto& h : fastio::scan_pair(chunks[p], chunks[p + 1], pred, p))
        add(h);
  }
  return {{"bytes", bytes.size()}, {"hits", hits}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fastio device-passthrough simulator"};
  app.require_subcommand(1);
  app.fallthrough();  // --config/--out/--seed are valid after the subcommand too

  std::string config_path, out_path;
  std::uint64_t seed = 1;
  app.add_option("--config", config_path, "simulator config file (json)")
      ->envname("FASTIO_CONFIG");
  app.add_option("--out", out_path, "write the report to a file")
      ->envname("FASTIO_OUT");
  app.add_option("--seed", seed, "rng seed for fuzz and bench stamps")
      ->envname("FASTIO_SEED");

  auto load_cfg = [&] {
    return config_path.empty() ? fastio::SimConfig{}
                               : fastio::SimConfig::load_file(config_path);
  };

  int rc = 0;
  std::string report;

  // scan: where does the sequence sit in a blob (default: builtin driver)
  auto* scan = app.add_subcommand("scan", "find the subtracted sequence");
  std::string hex_in, file_in;
  scan->add_option("--hex", hex_in, "bytes as hex digits");
  scan->add_option("--file", file_in, "binary file to scan");
  scan->callback([&] {
    const fastio::OpcodePredicate pred;
    ordered_json j;
    if (!hex_in.empty()) {
      j = scan_buffer(parse_hex(hex_in), pred);
      j["input"] = "hex";
    } else if (!file_in.empty()) {
      j = scan_buffer(read_file(file_in), pred);
      j["input"] = file_in;
    } else {
      const fastio::DriverImage img = fastio::build_driver_image();
      const fastio::DriverCertificate cert = fastio::certify_driver(img, pred);
      j = scan_buffer(img.bytes, pred);
      j["input"] = "builtin-driver";
      j["certified_sites"] = cert.predicate_sites;
      j["digest"] = fastio::hex_bytes(cert.image_digest);
    }
    report = j.dump(2);
  });

  // attack: canned scenarios plus the exhaustive sweep
  auto* attack = app.add_subcommand("attack", "replay driver-abuse scenarios");
  std::string scenario = "all";
  bool no_search = false;
  attack->add_option("--scenario", scenario,
                     "entry-arbitrary-eax | entry-ppt-with-interrupt | "
                     "exit-ppt-jump | all");
  attack->add_flag("--no-search", no_search, "skip the exhaustive sweep");
  attack->callback([&] {
    fastio::SimHost host(load_cfg());
    ordered_json runs = ordered_json::array();
    bool breached = false;
    const std::pair<const char*, fastio::AttackScenario> all[] = {
        {"entry-arbitrary-eax", fastio::AttackScenario::EntryArbitraryEax},
        {"entry-ppt-with-interrupt",
         fastio::AttackScenario::EntryPptWithInterrupt},
        {"exit-ppt-jump", fastio::AttackScenario::ExitPptJump}};
    bool matched = false;
    for (const auto& [name, s] : all) {
      if (scenario != "all" && scenario != name) continue;
      matched = true;
      ordered_json r = host.attack_report(s);
      breached = breached || r["outcome"] == "undetected" ||
                 r["privileged_escape"].get<bool>();
      runs.push_back(std::move(r));
    }
    if (!matched) throw CLI::ValidationError("unknown scenario: " + scenario);
    ordered_json j{{"config", host.config().to_json()}, {"attacks", runs}};
    if (!no_search) {
      ordered_json sr = host.search_report();
      breached = breached || sr["undetected"].get<std::uint64_t>() != 0;
      j["search"] = std::move(sr);
    }
    j["verdict"] = breached ? "breached" : "held";
    rc = breached ? 1 : 0;
    report = j.dump(2);
  });

  // ept-trace: run a workload, dump events and the invariant sweep
  auto* trace = app.add_subcommand("ept-trace", "run a workload, dump exits");
  std::string workload = "fastio-loop";
  std::uint32_t iterations = 8;
  bool no_events = false;
  trace->add_option("--workload", workload, "one of the canned workloads");
  trace->add_option("--iterations", iterations, "loop count");
  trace->add_flag("--no-events", no_events, "omit the per-event list");
  trace->callback([&] {
    fastio::SimHost host(load_cfg());
    ordered_json wl = host.run_workload(workload, iterations);
    const std::vector<std::string> bad = host.check_invariants();
    ordered_json j{{"config", host.config().to_json()},
                   {"report", std::move(wl)},
                   {"invariant_violations", bad},
                   {"summary", host.exit_summary()}};
    if (!no_events) {
      ordered_json evs = ordered_json::array();
      for (const auto& ev : host.monitor().log().events()) {
        if (evs.size() >= 5000) break;
        evs.push_back(ordered_json::parse(ev.json()));
      }
      j["truncated"] = host.monitor().log().total() > 5000;
      j["events"] = std::move(evs);
    }
    rc = (bad.empty() && !host.machine().privileged_escape()) ? 0 : 1;
    report = j.dump(2);
  });

  // layout: the address-space plan and registrations
  auto* layout = app.add_subcommand("layout", "dump the address-space plan");
  layout->callback([&] {
    fastio::SimHost host(load_cfg());
    report = host.layout_report().dump(2);
  });

  // bench: switch throughput, fairness, mode comparison, trend
  auto* bench = app.add_subcommand("bench", "software switch benchmarks");
  fastio::BenchConfig bc;
  std::string mode = "zc";
  std::vector<std::uint32_t> trend_counts;
  bool no_timing = false, csv = false;
  bench->add_option("--senders", bc.senders, "fan-in width");
  bench->add_option("--receivers", bc.receivers,
                    "guest receiver ports (0: host consumes)");
  bench->add_option("--rounds", bc.rounds, "schedule rounds");
  bench->add_option("--consume-limit", bc.consume_limit,
                    "drain budget per round, shared across receivers");
  bench->add_option("--frames", bc.frames_per_round, "frames per sender round");
  bench->add_option("--frame-len", bc.frame_len, "payload length");
  bench->add_option("--ring-slots", bc.ring_slots, "ring capacity");
  bench->add_option("--threads", bc.threads, ">1 opts into real contention");
  bench->add_option("--mode", mode, "zc | copy | both");
  bench->add_option("--trend", trend_counts, "sender counts to sweep");
  bench->add_flag("--no-timing", no_timing,
                  "omit wall-clock for byte-identical output");
  bench->add_flag("--csv", csv, "csv instead of json (single run only)");
  bench->callback([&] {
    bc.timing = !no_timing;
    bc.seed = seed;
    if (!trend_counts.empty()) {
      ordered_json arr = ordered_json::array();
      bool ok = true;
      for (const auto& r : fastio::run_trend(bc, trend_counts)) {
        ok = ok && r.conserved;
        arr.push_back(ordered_json::parse(r.json()));
      }
      rc = ok ? 0 : 1;
      report = ordered_json{{"trend", arr}}.dump(2);
    } else if (mode == "both") {
      const fastio::ModeComparison c = fastio::compare_modes(bc);
      rc = (c.zero_copy.conserved && c.copy_always.conserved) ? 0 : 1;
      report = c.json();
    } else {
      if (mode == "copy")
        bc.mode = fastio::ForwardMode::CopyAlways;
      else if (mode == "zc")
        bc.mode = fastio::ForwardMode::ZeroCopy;
      else
        throw CLI::ValidationError("mode must be zc, copy, or both");
      const fastio::BenchReport r = fastio::run_bench(bc);
      rc = r.conserved ? 0 : 1;
      report = csv ? r.csv() : r.json();
    }
  });

  // fuzz: a seeded op soup with the invariant sweep folded in
  auto* fuzz = app.add_subcommand("fuzz", "randomized ops, invariant-checked");
  std::uint32_t ops = 256, check_every = 16;
  fuzz->add_option("--ops", ops, "operation count");
  fuzz->add_option("--check-every", check_every,
                   "invariant sweep cadence (0: end of run only)");
  fuzz->callback([&] {
    fastio::SimHost host(load_cfg());
    ordered_json j = host.fuzz(seed, ops, check_every);
    rc = j["violations"].empty() ? 0 : 1;
    report = j.dump(2);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  const int emit_rc = emit(out_path, report);
  return emit_rc ? emit_rc : rc;
}
