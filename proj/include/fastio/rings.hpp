#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fastio/types.hpp"

namespace fastio {

inline constexpr std::uint32_t kDefaultRingSlots = 512;
inline constexpr std::uint32_t kDefaultBufBytes = 2048;
inline constexpr std::uint16_t kMinFrame = 60;
inline constexpr std::uint16_t kMaxFrame = 1500;
// The host side of the switch: the one port whose consumer reads every pool
// through the privileged map rather than through a guest's own slab.
inline constexpr std::uint32_t kHostPort = 0;
// Frames addressed here are handed to the host port.
inline constexpr std::uint16_t kBroadcastDest = 0xffff;
inline constexpr std::uint32_t kTxBatch = 64;
inline constexpr std::uint32_t kConsumeLimit = 32;

struct RingSlot {
  std::uint32_t buffer_index = 0;
  std::uint16_t length = 0;
  std::uint64_t guest_address = 0;  // address in the owner's own space
  std::uint64_t ppt_address = 0;    // where the switch sees the payload
};

// Single-producer single-consumer slot ring with monotonically growing
// cursors; index = cursor mod capacity.
class Ring {
 public:
  explicit Ring(std::uint32_t slots) : slots_(slots) {}

  bool full() const { return tail_ - head_ == slots_.size(); }
  bool empty() const { return tail_ == head_; }
  std::uint32_t size() const { return std::uint32_t(tail_ - head_); }
  std::uint32_t capacity() const { return std::uint32_t(slots_.size()); }

  bool push(const RingSlot& s) {
    if (full()) return false;
    slots_[tail_ % slots_.size()] = s;
    ++tail_;
    return true;
  }
  std::optional<RingSlot> pop() {
    if (empty()) return std::nullopt;
    RingSlot s = slots_[head_ % slots_.size()];
    ++head_;
    return s;
  }
  const RingSlot& peek(std::uint32_t i) const {  // i-th unconsumed slot
    return slots_[(head_ + i) % slots_.size()];
  }

 private:
  std::vector<RingSlot> slots_;
  std::uint64_t head_ = 0;
  std::uint64_t tail_ = 0;
};

// Fixed set of frame buffers with a free list. Each buffer has the address
// the privileged switch addresses it by; payload storage is held here.
class BufferPool {
 public:
  BufferPool(std::uint32_t owner, std::vector<std::uint64_t> ppt_addresses,
             std::uint32_t buf_bytes);

  std::uint32_t owner() const { return owner_; }
  std::uint32_t count() const { return std::uint32_t(store_.size()); }
  std::uint32_t available() const { return std::uint32_t(free_.size()); }
  std::uint32_t in_use() const { return count() - available(); }

  std::optional<std::uint32_t> alloc();
  void free(std::uint32_t index);

  std::uint64_t ppt_address(std::uint32_t index) const { return addrs_.at(index); }
  std::span<Byte> bytes(std::uint32_t index) { return store_.at(index); }
  std::span<const Byte> bytes(std::uint32_t index) const { return store_.at(index); }

 private:
  std::uint32_t owner_;
  std::vector<std::uint64_t> addrs_;
  std::vector<std::vector<Byte>> store_;
  std::deque<std::uint32_t> free_;
  std::vector<bool> is_free_;
};

enum class ForwardMode {
  ZeroCopy,    // deliver by pointer whenever the destination can address the
               // buffer where it sits; copy only when it can't
  CopyAlways,  // every delivery lands in a destination-owned buffer
};

struct SwitchStats {
  std::uint64_t generated = 0;
  std::uint64_t transmitted = 0;  // slots ingested from tx rings
  std::uint64_t delivered = 0;
  std::uint64_t consumed = 0;
  std::uint64_t drops_full = 0;
  std::uint64_t drops_no_port = 0;
  std::uint64_t drops_invalid = 0;
  std::uint64_t copies = 0;
  std::uint64_t matches = 0;     // pointer-placed deliveries
  std::uint64_t mismatches = 0;  // deliveries that needed the copy path
  std::uint64_t broadcasts = 0;

  std::uint64_t drops() const { return drops_full + drops_no_port + drops_invalid; }
  // Every ingested frame is accounted exactly once.
  bool conserved() const { return transmitted == delivered + drops(); }
};

struct PortStats {
  std::uint64_t generated = 0;
  std::uint64_t transmitted = 0;
  std::uint64_t forwarded = 0;  // this port's frames that reached a ring
  std::uint64_t delivered = 0;  // frames landed in this port's rx ring
  std::uint64_t consumed = 0;
  std::uint64_t drops_at = 0;  // frames lost because this port's rx was full
};

// Multi-port frame switch over per-port ring pairs and buffer pools. The
// destination of a frame is its first two payload bytes (little-endian).
class Switch {
 public:
  explicit Switch(ForwardMode mode, std::uint32_t ring_slots = kDefaultRingSlots,
                  std::uint32_t buf_bytes = kDefaultBufBytes);

  ForwardMode mode() const { return mode_; }
  void attach(std::uint32_t port, std::vector<std::uint64_t> buffer_ppt_addresses);
  bool attached(std::uint32_t port) const { return ports_.count(port) != 0; }

  // Queue frames into the port's tx ring from its own pool. Stops early on a
  // full ring or an empty pool (backpressure, not loss); returns queued count.
  std::uint32_t generate(std::uint32_t port, std::uint32_t count,
                         std::uint16_t dest, std::uint16_t frame_len);

  // Ingest up to `batch` tx slots from the port and forward each.
  std::uint32_t txsync(std::uint32_t port, std::uint32_t batch = kTxBatch);

  // Drain up to `limit` rx slots; buffers go back to their owners' pools.
  std::uint32_t consume(std::uint32_t port, std::uint32_t limit = kConsumeLimit);

  // Test access: post an arbitrary tx slot (forged pointers included), take a
  // buffer from any pool, touch payload bytes directly.
  bool post_raw(std::uint32_t port, const RingSlot& slot);
  std::optional<std::uint32_t> alloc_from(std::uint32_t owner);
  void release_to(std::uint32_t owner, std::uint32_t index);
  std::span<Byte> buffer_bytes(std::uint32_t owner, std::uint32_t index);
  std::uint64_t buffer_address(std::uint32_t owner, std::uint32_t index) const;

  const SwitchStats& stats() const { return stats_; }
  const PortStats& port_stats(std::uint32_t port) const { return pstats_.at(port); }
  std::uint32_t tx_backlog(std::uint32_t port) const { return ports_.at(port).tx.size(); }
  std::uint32_t rx_backlog(std::uint32_t port) const { return ports_.at(port).rx.size(); }
  std::uint32_t pool_available(std::uint32_t port) const {
    return pools_.at(port).available();
  }
  std::vector<std::uint32_t> port_ids() const;
  bool drained() const;  // all rings empty

  // Ports sitting on more than `max_foreign_held` buffers that belong to
  // other pools: zero-copy hoarders starving their peers.
  std::vector<std::uint32_t> detect_selfish(std::uint32_t max_foreign_held) const;

 private:
  struct Port {
    Port(std::uint32_t slots) : tx(slots), rx(slots) {}
    Ring tx;
    Ring rx;
    std::uint32_t seq = 0;
  };

  std::optional<std::pair<std::uint32_t, std::uint32_t>> resolve(
      std::uint64_t ppt_address) const;
  void forward(std::uint32_t sender, const RingSlot& slot);

  ForwardMode mode_;
  std::uint32_t ring_slots_;
  std::uint32_t buf_bytes_;
  std::map<std::uint32_t, Port> ports_;
  std::map<std::uint32_t, BufferPool> pools_;
  std::unordered_map<std::uint64_t, std::pair<std::uint32_t, std::uint32_t>> by_addr_;
  SwitchStats stats_;
  std::map<std::uint32_t, PortStats> pstats_;
};

}  // namespace fastio
