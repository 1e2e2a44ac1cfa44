#pragma once

#include <functional>
#include <optional>
#include <unordered_map>

#include "fastio/types.hpp"

namespace fastio {

// Sparse guest-physical memory. RAM occupies pages [0, ram_pages); the PGPA
// windows sit above 4 GB and come into existence only when the monitor backs
// them.
class GuestMemory {
 public:
  explicit GuestMemory(GpaPage ram_pages) : ram_pages_(ram_pages) {}

  GpaPage ram_pages() const { return ram_pages_; }

  Page& page(GpaPage n);              // creates a zero page on first touch
  const Page* find(GpaPage n) const;  // nullptr when never touched
  bool backed(GpaPage n) const { return pages_.count(n) != 0; }

  std::uint64_t read_u64(Gpa addr) const;
  void write_u64(Gpa addr, std::uint64_t v);

 private:
  std::unordered_map<GpaPage, Page> pages_;
  GpaPage ram_pages_;
};

// Two-level guest page table stored in guest memory itself. Entries are
// little-endian u64: bit 0 present, bit 1 writable, bits 12+ the target page
// base. The root holds root_entries slots and therefore spans
// root_entries*8/4096 consecutive pages; defaults cover a full 32-bit
// virtual space with 36-bit physical targets.
struct PagingConfig {
  std::uint32_t root_entries = 2048;
  std::uint32_t leaf_entries = 512;

  std::uint32_t root_pages() const {
    return (root_entries * 8 + std::uint32_t(kPageSize) - 1) / std::uint32_t(kPageSize);
  }
  std::uint64_t va_pages() const {
    return std::uint64_t(root_entries) * leaf_entries;
  }
};

struct PtEntry {
  bool present = false;
  bool writable = false;
  GpaPage page = 0;

  static PtEntry decode(std::uint64_t raw) {
    return {(raw & 1) != 0, (raw & 2) != 0, raw >> kPageShift};
  }
  std::uint64_t encode() const {
    return (present ? 1u : 0u) | (writable ? 2u : 0u) | (page << kPageShift);
  }
};

struct WalkResult {
  GpaPage page = 0;
  bool writable = false;
  GpaPage leaf_table = 0;        // the table page holding the final entry
  std::uint32_t leaf_index = 0;
};

// Hands out fresh physical pages for leaf tables while building mappings.
using TableAlloc = std::function<GpaPage()>;

namespace paging {

std::optional<WalkResult> walk(const GuestMemory& mem, GpaPage root,
                               const PagingConfig& cfg, Vaddr va);

// Installs vpage -> target. Materializes the leaf table via alloc when the
// root slot is empty.
void map(GuestMemory& mem, GpaPage root, const PagingConfig& cfg, VPage vpage,
         GpaPage target, bool writable, const TableAlloc& alloc);

void unmap(GuestMemory& mem, GpaPage root, const PagingConfig& cfg, VPage vpage);

// Root pages plus every present leaf-table page, in walk order.
std::vector<GpaPage> table_pages(const GuestMemory& mem, GpaPage root,
                                 const PagingConfig& cfg);

// Visit every present leaf mapping as (vpage, entry).
void for_each_leaf(const GuestMemory& mem, GpaPage root, const PagingConfig& cfg,
                   const std::function<void(VPage, PtEntry)>& fn);

// Reverse lookup: vpages currently mapping a physical page.
std::vector<VPage> vpages_of(const GuestMemory& mem, GpaPage root,
                             const PagingConfig& cfg, GpaPage target);

}  // namespace paging

}  // namespace fastio
