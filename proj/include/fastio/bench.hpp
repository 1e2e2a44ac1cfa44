#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fastio/rings.hpp"

namespace fastio {

// Fan-in workload. With `receivers == 0` every sender fires at the host
// port and the host consumes. With `receivers == m >= 1`, ports 1..m are
// guest receivers, the senders sit above them, and each sender walks its
// destination across the receivers round by round. The default driver is a
// single-threaded round-robin schedule, so two runs with the same config
// produce byte-identical reports; `threads > 1` opts into real contention
// (and real nondeterminism) behind one switch lock.
struct BenchConfig {
  std::uint32_t senders = 4;
  // Guest receiver ports; 0 keeps the host as the sole consumer. When m >= 1
  // the per-round drain budget is consume_limit floor-divided across the
  // receivers -- the lost remainder is the price of handing one coarse lock
  // around m consumers.
  std::uint32_t receivers = 0;
  std::uint32_t rounds = 200;
  std::uint32_t frames_per_round = 16;  // per sender per round
  std::uint16_t frame_len = 256;
  std::uint32_t ring_slots = kDefaultRingSlots;
  std::uint32_t buf_bytes = kDefaultBufBytes;
  std::uint32_t pool_factor = 2;  // buffers per port = factor * ring_slots
  ForwardMode mode = ForwardMode::ZeroCopy;
  std::uint32_t tx_batch = kTxBatch;
  std::uint32_t consume_limit = kConsumeLimit;
  std::uint32_t threads = 0;  // 0 or 1: deterministic driver
  bool timing = true;
  std::uint64_t seed = 1;  // stamped into reports; schedule itself is fixed
};

struct BenchReport {
  BenchConfig config;
  SwitchStats totals;
  std::map<std::uint32_t, PortStats> ports;
  std::uint64_t rounds_run = 0;
  // Share of the receiving side's intake contributed by the best- and
  // worst-served sender; equal-share is 1/senders.
  double min_sender_share = 0.0;
  double max_sender_share = 0.0;
  std::uint64_t wall_nanos = 0;  // 0 when timing is off
  bool conserved = false;

  std::string json() const;
  std::string csv() const;
};

BenchReport run_bench(const BenchConfig& cfg);

// Same schedule under both forwarding modes.
struct ModeComparison {
  BenchReport zero_copy;
  BenchReport copy_always;
  double throughput_ratio = 0.0;  // zero-copy delivered / copy delivered
  std::string json() const;
};
ModeComparison compare_modes(BenchConfig cfg);

// Delivered/dropped trend as the sender count grows.
std::vector<BenchReport> run_trend(BenchConfig cfg,
                                   const std::vector<std::uint32_t>& sender_counts);

}  // namespace fastio
