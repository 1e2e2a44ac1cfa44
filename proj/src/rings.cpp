#include "fastio/rings.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>

namespace fastio {

BufferPool::BufferPool(std::uint32_t owner, std::vector<std::uint64_t> ppt_addresses,
                       std::uint32_t buf_bytes)
    : owner_(owner), addrs_(std::move(ppt_addresses)) {
  store_.assign(addrs_.size(), std::vector<Byte>(buf_bytes));
  is_free_.assign(addrs_.size(), true);
  for (std::uint32_t i = 0; i < addrs_.size(); ++i) free_.push_back(i);
}

std::optional<std::uint32_t> BufferPool::alloc() {
  if (free_.empty()) return std::nullopt;
  std::uint32_t i = free_.front();
  free_.pop_front();
  is_free_[i] = false;
  return i;
}

void BufferPool::free(std::uint32_t index) {
  if (index >= store_.size()) throw std::out_of_range("no such buffer");
  if (is_free_[index]) throw std::logic_error("double free of a frame buffer");
  is_free_[index] = true;
  free_.push_back(index);
}

Switch::Switch(ForwardMode mode, std::uint32_t ring_slots, std::uint32_t buf_bytes)
    : mode_(mode), ring_slots_(ring_slots), buf_bytes_(buf_bytes) {}

void Switch::attach(std::uint32_t port, std::vector<std::uint64_t> addrs) {
  if (attached(port)) throw std::logic_error("port already attached");
  for (std::uint32_t i = 0; i < addrs.size(); ++i) {
    auto [it, fresh] = by_addr_.emplace(addrs[i], std::make_pair(port, i));
    if (!fresh) throw std::logic_error("buffer address registered twice");
    (void)it;
  }
  pools_.emplace(port, BufferPool(port, std::move(addrs), buf_bytes_));
  ports_.emplace(port, Port(ring_slots_));
  pstats_.emplace(port, PortStats{});
}

std::optional<std::pair<std::uint32_t, std::uint32_t>> Switch::resolve(
    std::uint64_t ppt_address) const {
  auto it = by_addr_.find(ppt_address);
  if (it == by_addr_.end()) return std::nullopt;
  return it->second;
}

std::uint32_t Switch::generate(std::uint32_t port, std::uint32_t count,
                               std::uint16_t dest, std::uint16_t frame_len) {
  Port& p = ports_.at(port);
  BufferPool& pool = pools_.at(port);
  std::uint32_t queued = 0;
  for (; queued < count; ++queued) {
    if (p.tx.full()) break;
    auto idx = pool.alloc();
    if (!idx) break;  // pool exhausted: push back on the producer
    auto buf = pool.bytes(*idx);
    const std::uint16_t len = std::clamp(frame_len, kMinFrame, kMaxFrame);
    buf[0] = Byte(dest & 0xff);
    buf[1] = Byte(dest >> 8);
    write_le32(buf.subspan(2, 4), p.seq);
    for (std::uint32_t i = 6; i < len; ++i) buf[i] = Byte((port * 7 + p.seq + i) & 0xff);
    ++p.seq;
    RingSlot slot{*idx, len, std::uint64_t(port) << 32 | *idx,
                  pool.ppt_address(*idx)};
    p.tx.push(slot);
    stats_.generated += 1;
    pstats_[port].generated += 1;
  }
  return queued;
}

bool Switch::post_raw(std::uint32_t port, const RingSlot& slot) {
  return ports_.at(port).tx.push(slot);
}

std::optional<std::uint32_t> Switch::alloc_from(std::uint32_t owner) {
  return pools_.at(owner).alloc();
}

void Switch::release_to(std::uint32_t owner, std::uint32_t index) {
  pools_.at(owner).free(index);
}

std::span<Byte> Switch::buffer_bytes(std::uint32_t owner, std::uint32_t index) {
  return pools_.at(owner).bytes(index);
}

std::uint64_t Switch::buffer_address(std::uint32_t owner, std::uint32_t index) const {
  return pools_.at(owner).ppt_address(index);
}

std::uint32_t Switch::txsync(std::uint32_t port, std::uint32_t batch) {
  Port& p = ports_.at(port);
  std::uint32_t moved = 0;
  for (; moved < batch; ++moved) {
    auto slot = p.tx.pop();
    if (!slot) break;
    stats_.transmitted += 1;
    pstats_[port].transmitted += 1;
    forward(port, *slot);
  }
  return moved;
}

void Switch::forward(std::uint32_t sender, const RingSlot& slot) {
  auto res = resolve(slot.ppt_address);
  if (!res || slot.length < kMinFrame || slot.length > kMaxFrame) {
    // Forged pointer or bogus length: the frame never leaves the switch.
    stats_.drops_invalid += 1;
    if (res) pools_.at(res->first).free(res->second);
    return;
  }
  const auto [owner, index] = *res;
  auto payload = pools_.at(owner).bytes(index);

  std::uint16_t dest = std::uint16_t(payload[0]) | std::uint16_t(payload[1]) << 8;
  if (dest == kBroadcastDest) {
    stats_.broadcasts += 1;
    dest = 0;  // host port handles flooding
  }
  if (!attached(dest) || dest == sender) {
    stats_.drops_no_port += 1;
    pools_.at(owner).free(index);
    return;
  }
  Port& d = ports_.at(dest);
  if (d.rx.full()) {
    stats_.drops_full += 1;
    pstats_[dest].drops_at += 1;
    pools_.at(owner).free(index);
    return;
  }

  // The host port reads every pool through the privileged map; a guest can
  // only address its own. Pointer placement is legal exactly when the
  // destination can reach the bytes where they already are.
  const bool dest_can_address = dest == kHostPort || owner == dest;
  if (mode_ == ForwardMode::ZeroCopy && dest_can_address) {
    d.rx.push(slot);
    stats_.matches += 1;
  } else {
    auto didx = pools_.at(dest).alloc();
    if (!didx) {  // destination cannot take it: counts against its rx
      stats_.drops_full += 1;
      pstats_[dest].drops_at += 1;
      pools_.at(owner).free(index);
      return;
    }
    auto dbuf = pools_.at(dest).bytes(*didx);
    std::copy_n(payload.begin(), slot.length, dbuf.begin());
    stats_.copies += 1;
    if (mode_ == ForwardMode::ZeroCopy) stats_.mismatches += 1;
    pools_.at(owner).free(index);
    RingSlot out{*didx, slot.length, std::uint64_t(dest) << 32 | *didx,
                 pools_.at(dest).ppt_address(*didx)};
    d.rx.push(out);
  }
  stats_.delivered += 1;
  pstats_[dest].delivered += 1;
  pstats_[sender].forwarded += 1;
}

std::uint32_t Switch::consume(std::uint32_t port, std::uint32_t limit) {
  Port& p = ports_.at(port);
  std::uint32_t n = 0;
  for (; n < limit; ++n) {
    auto slot = p.rx.pop();
    if (!slot) break;
    if (auto res = resolve(slot->ppt_address)) pools_.at(res->first).free(res->second);
    stats_.consumed += 1;
    pstats_[port].consumed += 1;
  }
  return n;
}

std::vector<std::uint32_t> Switch::port_ids() const {
  std::vector<std::uint32_t> ids;
  for (const auto& [id, port] : ports_) ids.push_back(id);
  return ids;
}

bool Switch::drained() const {
  for (const auto& [id, port] : ports_)
    if (!port.tx.empty() || !port.rx.empty()) return false;
  return true;
}

std::vector<std::uint32_t> Switch::detect_selfish(
    std::uint32_t max_foreign_held) const {
  std::vector<std::uint32_t> hoarders;
  for (const auto& [id, port] : ports_) {
    std::uint32_t foreign = 0;
    for (std::uint32_t i = 0; i < port.rx.size(); ++i) {
      auto res = resolve(port.rx.peek(i).ppt_address);
      if (res && res->first != id) ++foreign;
    }
    if (foreign > max_foreign_held) hoarders.push_back(id);
  }
  return hoarders;
}

}  // namespace fastio
