#include "fastio/layout.hpp"

#include <algorithm>
#include <stdexcept>

#include "fastio/digest.hpp"

namespace fastio {

PptLayout::Range PptLayout::slab_range(std::uint32_t guest_id) const {
  const std::uint64_t lo = ppt_va_start + std::uint64_t(guest_id) * slab_size;
  const std::uint64_t hi = lo + slab_size;
  if (hi > kernel_base)
    throw std::out_of_range("slab " + std::to_string(guest_id) +
                            " crosses kernel_base");
  return {lo, hi};
}

bool PptLayout::validate_ppt_address(std::uint64_t addr,
                                     std::uint32_t guest_id) const {
  const std::uint64_t lo = ppt_va_start + std::uint64_t(guest_id) * slab_size;
  const std::uint64_t hi = lo + slab_size;
  if (hi > kernel_base) return false;
  return addr >= lo && addr < hi;
}

void PptLayout::validate() const {
  if (slab_size == 0 || slab_size % kPageSize != 0)
    throw std::invalid_argument("slab_size must be a positive page multiple");
  if (device_window().hi > ppt_va_start)
    throw std::invalid_argument("device window overlaps the slab area");
  if (pdva % kPageSize != 0 || ppt_va_start % kPageSize != 0)
    throw std::invalid_argument("windows must be page aligned");
  if (ppt_va_start >= kernel_base)
    throw std::invalid_argument("no slab space below kernel_base");
  if (pgpa_start < pgpa_base)
    throw std::invalid_argument("slab aliases must sit above the device window");
  if (ppt_va_start + std::uint64_t(max_guests()) * slab_size >
      std::uint64_t(kernel_base))
    throw std::invalid_argument("slab slots overrun kernel_base");
}

GuestIdAllocator::GuestIdAllocator(std::uint32_t slots) : used_(slots, false) {
  if (slots == 0) throw std::invalid_argument("need at least the host slot");
  used_[0] = true;  // host
}

std::optional<std::uint32_t> GuestIdAllocator::allocate() {
  for (std::uint32_t id = 1; id < used_.size(); ++id) {
    if (!used_[id]) {
      used_[id] = true;
      ++live_;
      return id;
    }
  }
  return std::nullopt;
}

void GuestIdAllocator::release(std::uint32_t id) {
  if (id == 0) throw std::invalid_argument("host slot is never released");
  if (id >= used_.size()) throw std::invalid_argument("id out of range");
  if (!used_[id]) throw std::invalid_argument("id not allocated");
  used_[id] = false;
  --live_;
}

bool GuestIdAllocator::is_live(std::uint32_t id) const {
  return id < used_.size() && used_[id];
}

Attestation attest_driver(std::span<const Byte> image,
                          const DriverCertificate& cert,
                          const OpcodePredicate& pred) {
  if (cert.predicate_sites.size() != 2) return Attestation::Rejected;
  if (digest(cert.algorithm, image) != cert.image_digest)
    return Attestation::Rejected;

  // The image is scanned as one linear window, so sequences straddling its
  // internal page boundaries are found too.
  std::vector<std::uint32_t> found;
  for (const auto& h : scan_page(image, pred)) found.push_back(h.offset);
  std::vector<std::uint32_t> want = cert.predicate_sites;
  std::sort(want.begin(), want.end());
  return found == want ? Attestation::Trusted : Attestation::Rejected;
}

const SlabMap& SlabRegistry::register_guest_rings(std::uint32_t guest_id,
                                                  std::vector<GpaPage> ring_gpas,
                                                  std::vector<GpaPage> buffer_gpas,
                                                  std::uint32_t buf_size) {
  if (!is_attested(guest_id))
    throw std::invalid_argument("guest has not attested a driver");
  if (slabs_.count(guest_id))
    throw std::invalid_argument("guest already registered");
  if (buf_size == 0 || kPageSize % buf_size != 0)
    throw std::invalid_argument("buffer size must divide the page size");

  const std::uint64_t bytes =
      (ring_gpas.size() + buffer_gpas.size()) * kPageSize;
  if (bytes > layout_.slab_size)
    throw std::invalid_argument("registration exceeds the slab");

  SlabMap map;
  map.guest_id = guest_id;
  map.range = layout_.slab_range(guest_id);
  map.ring_gpas = std::move(ring_gpas);
  map.buffer_gpas = std::move(buffer_gpas);
  map.buf_size = buf_size;
  map.buffer_count =
      std::uint32_t(map.buffer_gpas.size() * (kPageSize / buf_size));
  map.pinned = map.ring_gpas;
  map.pinned.insert(map.pinned.end(), map.buffer_gpas.begin(),
                    map.buffer_gpas.end());

  const std::uint32_t per_page = std::uint32_t(kPageSize / buf_size);
  for (std::uint32_t k = 0; k < map.buffer_count; ++k) {
    const Vaddr ppt = map.buffer_ppt_address(k);
    const GpaPage gpa = map.buffer_gpas[k / per_page];
    const std::uint64_t hpa =
        (std::uint64_t(gpa) << kPageShift) + (k % per_page) * buf_size;
    ppt_to_host_[ppt] = HostBuffer{guest_id, k, hpa};
  }

  return slabs_.emplace(guest_id, std::move(map)).first->second;
}

const SlabMap* SlabRegistry::find(std::uint32_t guest_id) const {
  auto it = slabs_.find(guest_id);
  return it == slabs_.end() ? nullptr : &it->second;
}

std::optional<HostBuffer> SlabRegistry::translate(Vaddr ppt_address) const {
  auto it = ppt_to_host_.find(ppt_address);
  if (it == ppt_to_host_.end()) return std::nullopt;
  return it->second;
}

}  // namespace fastio
