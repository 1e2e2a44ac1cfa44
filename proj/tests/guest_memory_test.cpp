#include <doctest.h>

#include <algorithm>
#include <set>

#include "fastio/guest_memory.hpp"

using namespace fastio;

TEST_CASE("pages materialize on first touch and stay sparse otherwise") {
  GuestMemory mem(0x100);
  CHECK(mem.ram_pages() == 0x100);
  CHECK_FALSE(mem.backed(5));
  CHECK(mem.find(5) == nullptr);

  Page& p = mem.page(5);
  CHECK(mem.backed(5));
  CHECK(std::all_of(p.begin(), p.end(), [](Byte b) { return b == 0; }));
  p[17] = 0xab;
  CHECK(mem.find(5)->at(17) == 0xab);
  CHECK_FALSE(mem.backed(6));
}

TEST_CASE("u64 round-trips little-endian through page bytes") {
  GuestMemory mem(0x10);
  mem.write_u64(Gpa(3) * kPageSize + 8, 0x1122334455667788ull);
  CHECK(mem.read_u64(Gpa(3) * kPageSize + 8) == 0x1122334455667788ull);
  const Page& p = mem.page(3);
  CHECK(p[8] == 0x88);
  CHECK(p[15] == 0x11);
}

TEST_CASE("pt entry codec") {
  PtEntry e{true, true, 0x1234};
  const std::uint64_t raw = e.encode();
  CHECK(raw == ((0x1234ull << kPageShift) | 3));
  const PtEntry back = PtEntry::decode(raw);
  CHECK(back.present);
  CHECK(back.writable);
  CHECK(back.page == 0x1234);

  CHECK_FALSE(PtEntry::decode(0).present);
  const PtEntry ro = PtEntry::decode((0x5ull << kPageShift) | 1);
  CHECK(ro.present);
  CHECK_FALSE(ro.writable);
}

TEST_CASE("paging geometry defaults") {
  const PagingConfig cfg;
  CHECK(cfg.root_entries == 2048);
  CHECK(cfg.leaf_entries == 512);
  CHECK(cfg.root_pages() == 4);
  CHECK(cfg.va_pages() == 2048ull * 512);  // full 32-bit space in 4K pages
}

TEST_CASE("map, walk, unmap") {
  GuestMemory mem(0x200);
  const PagingConfig cfg;
  const GpaPage root = 0x10;
  GpaPage bump = root + cfg.root_pages();
  TableAlloc alloc = [&] { return bump++; };

  CHECK_FALSE(paging::walk(mem, root, cfg, 0xc0000000));

  paging::map(mem, root, cfg, VPage(0xc0000000u >> kPageShift), 0x42, true, alloc);
  auto w = paging::walk(mem, root, cfg, 0xc0000abc);
  REQUIRE(w);
  CHECK(w->page == 0x42);
  CHECK(w->writable);
  CHECK(w->leaf_table == root + cfg.root_pages());
  CHECK(w->leaf_index == ((0xc0000000u >> kPageShift) % cfg.leaf_entries));

  // Read-only mapping reports !writable.
  paging::map(mem, root, cfg, VPage(0xc0001000u >> kPageShift), 0x43, false, alloc);
  CHECK_FALSE(paging::walk(mem, root, cfg, 0xc0001000)->writable);
  // Same leaf table serves the whole 2 MiB stripe: no extra allocation.
  CHECK(bump == root + cfg.root_pages() + 1);

  // A distant stripe forces a fresh leaf table.
  paging::map(mem, root, cfg, VPage(0x00400000u >> kPageShift), 0x44, true, alloc);
  CHECK(bump == root + cfg.root_pages() + 2);

  paging::unmap(mem, root, cfg, VPage(0xc0000000u >> kPageShift));
  CHECK_FALSE(paging::walk(mem, root, cfg, 0xc0000000));
  CHECK(paging::walk(mem, root, cfg, 0xc0001000));  // neighbor untouched
}

TEST_CASE("table_pages lists roots then live leaf tables") {
  GuestMemory mem(0x200);
  const PagingConfig cfg;
  const GpaPage root = 0x20;
  GpaPage bump = root + cfg.root_pages();
  TableAlloc alloc = [&] { return bump++; };

  auto only_roots = paging::table_pages(mem, root, cfg);
  REQUIRE(only_roots.size() == cfg.root_pages());
  CHECK(only_roots.front() == root);

  paging::map(mem, root, cfg, 0x300, 0x50, true, alloc);
  paging::map(mem, root, cfg, 0x90000, 0x51, true, alloc);
  auto pages = paging::table_pages(mem, root, cfg);
  CHECK(pages.size() == cfg.root_pages() + 2);
  const std::set<GpaPage> s(pages.begin(), pages.end());
  CHECK(s.count(root + cfg.root_pages()));
  CHECK(s.count(root + cfg.root_pages() + 1));
}

TEST_CASE("for_each_leaf and vpages_of see every live mapping") {
  GuestMemory mem(0x200);
  const PagingConfig cfg;
  const GpaPage root = 0x30;
  GpaPage bump = root + cfg.root_pages();
  TableAlloc alloc = [&] { return bump++; };

  paging::map(mem, root, cfg, 0x111, 0x61, true, alloc);
  paging::map(mem, root, cfg, 0x70222, 0x62, false, alloc);
  paging::map(mem, root, cfg, 0x70223, 0x61, true, alloc);  // alias of 0x61

  std::set<VPage> seen;
  paging::for_each_leaf(mem, root, cfg, [&](VPage vp, PtEntry e) {
    seen.insert(vp);
    CHECK(e.present);
    if (vp == 0x70222) CHECK_FALSE(e.writable);
  });
  CHECK(seen == std::set<VPage>{0x111, 0x70222, 0x70223});

  auto aliases = paging::vpages_of(mem, root, cfg, 0x61);
  std::sort(aliases.begin(), aliases.end());
  CHECK(aliases == std::vector<VPage>{0x111, 0x70223});
  CHECK(paging::vpages_of(mem, root, cfg, 0x99).empty());
}

TEST_CASE("walk refuses out-of-range virtual addresses") {
  GuestMemory mem(0x100);
  PagingConfig small;
  small.root_entries = 4;  // covers only 4 * 512 vpages
  const GpaPage root = 0x40;
  CHECK_FALSE(paging::walk(mem, root, small, Vaddr(small.va_pages()) * kPageSize));
}
