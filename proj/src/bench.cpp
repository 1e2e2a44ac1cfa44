#include "fastio/bench.hpp"

#include <algorithm>
#include <chrono>
#include <mutex>
#include <thread>

#include <json.hpp>

namespace fastio {

namespace {

std::uint64_t synth_addr(std::uint32_t port, std::uint32_t index,
                         std::uint32_t buf_bytes) {
  return (std::uint64_t(1) << 32) + std::uint64_t(port) * (std::uint64_t(1) << 24) +
         std::uint64_t(index) * buf_bytes;
}

// Port plan: host is always port 0. With no dedicated receivers the senders
// are ports 1..senders and everything lands on the host. With m receivers
// those take ports 1..m and the senders stack above them.
std::uint32_t sender_port(const BenchConfig& cfg, std::uint32_t index) {
  return (cfg.receivers == 0 ? 1 : cfg.receivers + 1) + index;
}

std::uint32_t top_port(const BenchConfig& cfg) {
  const std::uint32_t fixed = cfg.receivers == 0 ? 0 : cfg.receivers;
  return cfg.senders == 0 ? fixed : sender_port(cfg, cfg.senders - 1);
}

std::vector<std::uint32_t> rx_ports(const BenchConfig& cfg) {
  if (cfg.receivers == 0) return {kHostPort};
  std::vector<std::uint32_t> out;
  for (std::uint32_t p = 1; p <= cfg.receivers; ++p) out.push_back(p);
  return out;
}

std::uint16_t dest_for(const BenchConfig& cfg, std::uint32_t round,
                       std::uint32_t sender_index) {
  if (cfg.receivers == 0) return kHostPort;
  return std::uint16_t(1 + (round + sender_index) % cfg.receivers);
}

// Shared drain budget per round, split evenly; the floored remainder models
// what the lock handoff between consumers eats.
std::uint32_t rx_budget(const BenchConfig& cfg) {
  return cfg.receivers == 0 ? cfg.consume_limit
                            : cfg.consume_limit / cfg.receivers;
}

Switch build_switch(const BenchConfig& cfg) {
  Switch sw(cfg.mode, cfg.ring_slots, cfg.buf_bytes);
  const std::uint32_t buffers = cfg.pool_factor * cfg.ring_slots;
  for (std::uint32_t port = 0; port <= top_port(cfg); ++port) {
    std::vector<std::uint64_t> addrs;
    addrs.reserve(buffers);
    for (std::uint32_t i = 0; i < buffers; ++i)
      addrs.push_back(synth_addr(port, i, cfg.buf_bytes));
    sw.attach(port, std::move(addrs));
  }
  return sw;
}

void drain(Switch& sw, const BenchConfig& cfg) {
  // Flush leftovers: ingest every tx ring dry, then let the receiving side
  // catch up, so the conservation identity can be checked exactly. The
  // budget split only applies inside timed rounds.
  const std::uint32_t budget = std::max(cfg.consume_limit, 1u);
  bool moving = true;
  while (moving) {
    moving = false;
    for (std::uint32_t i = 0; i < cfg.senders; ++i)
      moving |= sw.txsync(sender_port(cfg, i), cfg.tx_batch) != 0;
    for (std::uint32_t rx : rx_ports(cfg))
      moving |= sw.consume(rx, budget) != 0;
  }
}

void finish_report(BenchReport& r, Switch& sw, const BenchConfig& cfg) {
  r.totals = sw.stats();
  for (std::uint32_t port = 0; port <= top_port(cfg); ++port)
    r.ports[port] = sw.port_stats(port);
  r.conserved = r.totals.conserved();

  std::uint64_t intake = 0;
  for (std::uint32_t rx : rx_ports(cfg)) intake += r.ports[rx].delivered;
  if (intake > 0 && cfg.senders > 0) {
    double lo = 1.0, hi = 0.0;
    for (std::uint32_t i = 0; i < cfg.senders; ++i) {
      const double share =
          double(r.ports[sender_port(cfg, i)].forwarded) / double(intake);
      lo = std::min(lo, share);
      hi = std::max(hi, share);
    }
    r.min_sender_share = lo;
    r.max_sender_share = hi;
  }
}

void run_deterministic(Switch& sw, const BenchConfig& cfg, BenchReport& r) {
  const std::uint32_t budget = rx_budget(cfg);
  for (std::uint32_t round = 0; round < cfg.rounds; ++round) {
    // Rotating the service order spreads full-ring drops evenly instead of
    // always penalizing the last-synced sender.
    for (std::uint32_t k = 0; k < cfg.senders; ++k) {
      const std::uint32_t i = (round + k) % cfg.senders;
      sw.generate(sender_port(cfg, i), cfg.frames_per_round,
                  dest_for(cfg, round, i), cfg.frame_len);
    }
    for (std::uint32_t k = 0; k < cfg.senders; ++k) {
      const std::uint32_t i = (round + k) % cfg.senders;
      sw.txsync(sender_port(cfg, i), cfg.tx_batch);
    }
    for (std::uint32_t rx : rx_ports(cfg)) sw.consume(rx, budget);
    r.rounds_run += 1;
  }
  drain(sw, cfg);
}

void run_threaded(Switch& sw, const BenchConfig& cfg, BenchReport& r) {
  std::mutex lock;
  std::vector<std::thread> workers;
  for (std::uint32_t i = 0; i < cfg.senders; ++i) {
    workers.emplace_back([&, i] {
      const std::uint32_t s = sender_port(cfg, i);
      for (std::uint32_t round = 0; round < cfg.rounds; ++round) {
        std::lock_guard<std::mutex> g(lock);
        sw.generate(s, cfg.frames_per_round, dest_for(cfg, round, i),
                    cfg.frame_len);
        sw.txsync(s, cfg.tx_batch);
      }
    });
  }
  std::thread receiver([&] {
    // One thread plays every consumer; runs until producers finish and
    // everything is flushed.
    const std::uint32_t budget = rx_budget(cfg);
    for (;;) {
      {
        std::lock_guard<std::mutex> g(lock);
        for (std::uint32_t rx : rx_ports(cfg)) sw.consume(rx, budget);
        if (r.rounds_run == cfg.rounds && sw.drained()) return;
      }
      std::this_thread::yield();
    }
  });
  for (auto& w : workers) w.join();
  {
    std::lock_guard<std::mutex> g(lock);
    r.rounds_run = cfg.rounds;
    drain(sw, cfg);
  }
  receiver.join();
}

nlohmann::ordered_json stats_json(const SwitchStats& s) {
  return {{"generated", s.generated}, {"transmitted", s.transmitted},
          {"delivered", s.delivered}, {"consumed", s.consumed},
          {"drops_full", s.drops_full}, {"drops_no_port", s.drops_no_port},
          {"drops_invalid", s.drops_invalid}, {"copies", s.copies},
          {"matches", s.matches}, {"mismatches", s.mismatches},
          {"broadcasts", s.broadcasts}};
}

}  // namespace

BenchReport run_bench(const BenchConfig& cfg) {
  BenchReport r;
  r.config = cfg;
  Switch sw = build_switch(cfg);

  const auto t0 = std::chrono::steady_clock::now();
  if (cfg.threads > 1)
    run_threaded(sw, cfg, r);
  else
    run_deterministic(sw, cfg, r);
  const auto t1 = std::chrono::steady_clock::now();

  if (cfg.timing)
    r.wall_nanos = std::uint64_t(
        std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count());
  finish_report(r, sw, cfg);
  return r;
}

std::string BenchReport::json() const {
  nlohmann::ordered_json j;
  j["config"] = {{"senders", config.senders},
                 {"receivers", config.receivers},
                 {"rounds", config.rounds},
                 {"frames_per_round", config.frames_per_round},
                 {"frame_len", config.frame_len},
                 {"ring_slots", config.ring_slots},
                 {"buf_bytes", config.buf_bytes},
                 {"pool_factor", config.pool_factor},
                 {"mode", config.mode == ForwardMode::ZeroCopy ? "zero-copy" : "copy-always"},
                 {"tx_batch", config.tx_batch},
                 {"consume_limit", config.consume_limit},
                 {"threads", config.threads},
                 {"seed", config.seed}};
  j["totals"] = stats_json(totals);
  j["rounds_run"] = rounds_run;
  j["conserved"] = conserved;
  j["fairness"] = {{"min_sender_share", min_sender_share},
                   {"max_sender_share", max_sender_share}};
  nlohmann::ordered_json ps;
  for (const auto& [id, p] : ports)
    ps[std::to_string(id)] = {{"generated", p.generated},
                              {"transmitted", p.transmitted},
                              {"forwarded", p.forwarded},
                              {"delivered", p.delivered},
                              {"consumed", p.consumed},
                              {"drops_at", p.drops_at}};
  j["ports"] = ps;
  if (wall_nanos != 0) j["timing"] = {{"wall_nanos", wall_nanos}};
  return j.dump(2) + "\n";
}

std::string BenchReport::csv() const {
  std::string out = "metric,value\n";
  auto row = [&](const char* k, std::uint64_t v) {
    out += k;
    out += ',';
    out += std::to_string(v);
    out += '\n';
  };
  row("senders", config.senders);
  row("receivers", config.receivers);
  row("rounds", rounds_run);
  row("transmitted", totals.transmitted);
  row("delivered", totals.delivered);
  row("drops", totals.drops());
  row("copies", totals.copies);
  row("matches", totals.matches);
  row("mismatches", totals.mismatches);
  row("conserved", conserved ? 1 : 0);
  if (wall_nanos != 0) row("wall_nanos", wall_nanos);
  return out;
}

ModeComparison compare_modes(BenchConfig cfg) {
  ModeComparison mc;
  cfg.mode = ForwardMode::ZeroCopy;
  mc.zero_copy = run_bench(cfg);
  cfg.mode = ForwardMode::CopyAlways;
  mc.copy_always = run_bench(cfg);
  if (mc.copy_always.totals.delivered > 0)
    mc.throughput_ratio = double(mc.zero_copy.totals.delivered) /
                          double(mc.copy_always.totals.delivered);
  return mc;
}

std::string ModeComparison::json() const {
  nlohmann::ordered_json j;
  j["zero_copy"] = nlohmann::ordered_json::parse(zero_copy.json());
  j["copy_always"] = nlohmann::ordered_json::parse(copy_always.json());
  j["throughput_ratio"] = throughput_ratio;
  return j.dump(2) + "\n";
}

std::vector<BenchReport> run_trend(BenchConfig cfg,
                                   const std::vector<std::uint32_t>& sender_counts) {
  std::vector<BenchReport> out;
  for (std::uint32_t k : sender_counts) {
    cfg.senders = k;
    out.push_back(run_bench(cfg));
  }
  return out;
}

}  // namespace fastio
