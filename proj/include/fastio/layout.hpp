#pragma once

#include <optional>
#include <span>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fastio/opcode_scan.hpp"
#include "fastio/types.hpp"

namespace fastio {

// Address-space geometry of the privileged page table. The window below
// kernel_base that guests never use is carved into per-guest slabs; the
// backing guest-physical aliases (PGPAs) sit above 4 GB so no guest RAM
// address can collide with them.
struct PptLayout {
  Vaddr pdva = Vaddr(4 * kMiB);           // device window base
  std::uint32_t device_pages = 516;       // 512 MMIO pages + 4 ring pages
  Vaddr ppt_va_start = Vaddr(16 * kMiB);  // first slab
  std::uint64_t slab_size = 16 * kMiB;
  Vaddr kernel_base = 0xc0000000;
  Gpa pgpa_base = 4 * kGiB;               // device/hypervisor state window
  Gpa pgpa_start = 4 * kGiB + 16 * kMiB;  // slab aliases

  // Slab slots that fit below kernel_base, host slot 0 included.
  std::uint32_t max_guests() const {
    return std::uint32_t((std::uint64_t(kernel_base) - ppt_va_start) / slab_size);
  }

  struct Range {
    std::uint64_t lo = 0;
    std::uint64_t hi = 0;
    bool contains(std::uint64_t a) const { return a >= lo && a < hi; }
  };

  Range device_window() const {
    return {pdva, pdva + std::uint64_t(device_pages) * kPageSize};
  }

  // [ppt_va_start + n*slab_size, ppt_va_start + (n+1)*slab_size). Throws
  // std::out_of_range when the slab would cross kernel_base.
  Range slab_range(std::uint32_t guest_id) const;

  // PGPA alias of a slab virtual address.
  Gpa slab_pgpa(Vaddr ppt_address) const {
    return pgpa_start + (ppt_address - ppt_va_start);
  }

  bool is_pgpa(Gpa addr) const { return addr >= pgpa_base; }
  bool is_slab_pgpa_page(GpaPage p) const {
    Gpa a = p << kPageShift;
    return a >= pgpa_start &&
           a < pgpa_start + std::uint64_t(max_guests()) * slab_size;
  }

  // Strict boundary discipline: inclusive low, exclusive high.
  bool validate_ppt_address(std::uint64_t addr, std::uint32_t guest_id) const;

  // Throws std::invalid_argument when the windows overlap or misalign.
  void validate() const;
};

// Slab slot ownership. Slot 0 is the host's and never allocated or released.
class GuestIdAllocator {
 public:
  explicit GuestIdAllocator(std::uint32_t slots);

  std::optional<std::uint32_t> allocate();  // lowest free id >= 1
  void release(std::uint32_t id);           // throws on host/out-of-range/free
  bool is_live(std::uint32_t id) const;
  std::uint32_t live_count() const { return live_; }
  std::uint32_t slots() const { return std::uint32_t(used_.size()); }

 private:
  std::vector<bool> used_;
  std::uint32_t live_ = 1;
};

enum class Attestation { Trusted, Rejected };

struct DriverCertificate {
  std::string algorithm = "sha256";
  std::vector<Byte> image_digest;
  // Offsets of the entry and exit cr3 loads; the image must contain the
  // subtracted sequence at exactly these two spots and nowhere else.
  std::vector<std::uint32_t> predicate_sites;
};

Attestation attest_driver(std::span<const Byte> image,
                          const DriverCertificate& cert,
                          const OpcodePredicate& pred);

// Where a registered buffer lives on the host. Addresses are synthetic but
// stable: the switch resolves payloads through them.
struct HostBuffer {
  std::uint32_t owner = 0;
  std::uint32_t buffer_index = 0;
  std::uint64_t hpa = 0;
};

struct SlabMap {
  std::uint32_t guest_id = 0;
  PptLayout::Range range;
  std::vector<GpaPage> ring_gpas;
  std::vector<GpaPage> buffer_gpas;
  std::uint32_t buf_size = 2048;
  std::uint32_t buffer_count = 0;
  std::vector<GpaPage> pinned;

  Vaddr buffer_ppt_address(std::uint32_t index) const {
    return Vaddr(range.lo + ring_gpas.size() * kPageSize +
                 std::uint64_t(index) * buf_size);
  }
};

// Registration state for every agent with rings mapped into the PPT.
class SlabRegistry {
 public:
  explicit SlabRegistry(const PptLayout& layout) : layout_(layout) {}

  void mark_attested(std::uint32_t guest_id) { attested_.insert(guest_id); }
  bool is_attested(std::uint32_t guest_id) const { return attested_.count(guest_id) != 0; }

  // Maps ring pages then buffer pages contiguously from the slab base,
  // preserving list order, fills the translation table, and pins the backing
  // pages. Throws std::invalid_argument on oversize lists, unattested or
  // already-registered guests.
  const SlabMap& register_guest_rings(std::uint32_t guest_id,
                                      std::vector<GpaPage> ring_gpas,
                                      std::vector<GpaPage> buffer_gpas,
                                      std::uint32_t buf_size = 2048);

  const SlabMap* find(std::uint32_t guest_id) const;
  bool registered(std::uint32_t guest_id) const { return slabs_.count(guest_id) != 0; }

  std::optional<HostBuffer> translate(Vaddr ppt_address) const;

  const PptLayout& layout() const { return layout_; }

 private:
  PptLayout layout_;
  std::unordered_map<std::uint32_t, SlabMap> slabs_;
  std::unordered_map<Vaddr, HostBuffer> ppt_to_host_;
  std::unordered_set<std::uint32_t> attested_;
};

}  // namespace fastio
