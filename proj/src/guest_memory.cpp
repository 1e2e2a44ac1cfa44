#include "fastio/guest_memory.hpp"

#include <vector>

namespace fastio {

Page& GuestMemory::page(GpaPage n) {
  auto it = pages_.find(n);
  if (it != pages_.end()) return it->second;
  return pages_.emplace(n, Page{}).first->second;
}

const Page* GuestMemory::find(GpaPage n) const {
  auto it = pages_.find(n);
  return it == pages_.end() ? nullptr : &it->second;
}

std::uint64_t GuestMemory::read_u64(Gpa addr) const {
  const Page* p = find(addr >> kPageShift);
  if (!p) return 0;
  return read_le64(std::span<const Byte>(*p).subspan(addr & (kPageSize - 1), 8));
}

void GuestMemory::write_u64(Gpa addr, std::uint64_t v) {
  Page& p = page(addr >> kPageShift);
  write_le64(std::span<Byte>(p).subspan(addr & (kPageSize - 1), 8), v);
}

namespace paging {

namespace {

std::uint64_t root_entry_addr(GpaPage root, std::uint32_t idx) {
  return (root << kPageShift) + std::uint64_t(idx) * 8;
}

}  // namespace

std::optional<WalkResult> walk(const GuestMemory& mem, GpaPage root,
                               const PagingConfig& cfg, Vaddr va) {
  const VPage vpage = va >> kPageShift;
  const std::uint32_t ri = vpage / cfg.leaf_entries;
  const std::uint32_t li = vpage % cfg.leaf_entries;
  if (ri >= cfg.root_entries) return std::nullopt;

  PtEntry re = PtEntry::decode(mem.read_u64(root_entry_addr(root, ri)));
  if (!re.present) return std::nullopt;
  PtEntry le = PtEntry::decode(mem.read_u64((re.page << kPageShift) + li * 8));
  if (!le.present) return std::nullopt;
  return WalkResult{le.page, le.writable, re.page, li};
}

void map(GuestMemory& mem, GpaPage root, const PagingConfig& cfg, VPage vpage,
         GpaPage target, bool writable, const TableAlloc& alloc) {
  const std::uint32_t ri = vpage / cfg.leaf_entries;
  const std::uint32_t li = vpage % cfg.leaf_entries;

  PtEntry re = PtEntry::decode(mem.read_u64(root_entry_addr(root, ri)));
  if (!re.present) {
    re = {true, true, alloc()};
    mem.write_u64(root_entry_addr(root, ri), re.encode());
  }
  mem.write_u64((re.page << kPageShift) + li * 8,
                PtEntry{true, writable, target}.encode());
}

void unmap(GuestMemory& mem, GpaPage root, const PagingConfig& cfg, VPage vpage) {
  const std::uint32_t ri = vpage / cfg.leaf_entries;
  const std::uint32_t li = vpage % cfg.leaf_entries;
  PtEntry re = PtEntry::decode(mem.read_u64(root_entry_addr(root, ri)));
  if (!re.present) return;
  mem.write_u64((re.page << kPageShift) + li * 8, 0);
}

std::vector<GpaPage> table_pages(const GuestMemory& mem, GpaPage root,
                                 const PagingConfig& cfg) {
  std::vector<GpaPage> pages;
  for (std::uint32_t i = 0; i < cfg.root_pages(); ++i) pages.push_back(root + i);
  for (std::uint32_t ri = 0; ri < cfg.root_entries; ++ri) {
    PtEntry re = PtEntry::decode(mem.read_u64(root_entry_addr(root, ri)));
    if (re.present) pages.push_back(re.page);
  }
  return pages;
}

void for_each_leaf(const GuestMemory& mem, GpaPage root, const PagingConfig& cfg,
                   const std::function<void(VPage, PtEntry)>& fn) {
  for (std::uint32_t ri = 0; ri < cfg.root_entries; ++ri) {
    PtEntry re = PtEntry::decode(mem.read_u64(root_entry_addr(root, ri)));
    if (!re.present) continue;
    for (std::uint32_t li = 0; li < cfg.leaf_entries; ++li) {
      PtEntry le = PtEntry::decode(mem.read_u64((re.page << kPageShift) + li * 8));
      if (le.present) fn(ri * cfg.leaf_entries + li, le);
    }
  }
}

std::vector<VPage> vpages_of(const GuestMemory& mem, GpaPage root,
                             const PagingConfig& cfg, GpaPage target) {
  std::vector<VPage> out;
  for_each_leaf(mem, root, cfg, [&](VPage v, PtEntry e) {
    if (e.page == target) out.push_back(v);
  });
  return out;
}

}  // namespace paging

}  // namespace fastio
