#include <doctest.h>

#include <random>
#include <stdexcept>

#include "fastio/digest.hpp"
#include "fastio/driver_image.hpp"
#include "fastio/layout.hpp"

using namespace fastio;

TEST_CASE("default geometry constants") {
  const PptLayout lay;
  lay.validate();

  CHECK(lay.max_guests() == 191);
  CHECK(lay.device_window().lo == 4 * kMiB);
  CHECK(lay.device_window().hi == 4 * kMiB + 516ull * kPageSize);
  CHECK(lay.pgpa_start == 4 * kGiB + 16 * kMiB);

  const auto r2 = lay.slab_range(2);
  CHECK(r2.lo == 48 * kMiB);
  CHECK(r2.hi == 64 * kMiB);
  CHECK(lay.slab_range(0).lo == 16 * kMiB);

  // Slot 190 is the last one that fits under the kernel split.
  CHECK(lay.slab_range(190).hi == 0xc0000000);
  CHECK_THROWS_AS(lay.slab_range(191), std::out_of_range);
}

TEST_CASE("slab pgpa aliasing") {
  const PptLayout lay;
  CHECK(lay.slab_pgpa(lay.ppt_va_start) == lay.pgpa_start);
  CHECK(lay.slab_pgpa(Vaddr(48 * kMiB) + 0x123) ==
        lay.pgpa_start + 32 * kMiB + 0x123);

  CHECK(lay.is_pgpa(4 * kGiB));
  CHECK_FALSE(lay.is_pgpa(4 * kGiB - 1));
  CHECK(lay.is_slab_pgpa_page(GpaPage(lay.pgpa_start >> kPageShift)));
  CHECK_FALSE(lay.is_slab_pgpa_page(GpaPage(lay.pgpa_base >> kPageShift)));
  // One page past the last slab is outside.
  const Gpa end = lay.pgpa_start + std::uint64_t(lay.max_guests()) * lay.slab_size;
  CHECK_FALSE(lay.is_slab_pgpa_page(GpaPage(end >> kPageShift)));
  CHECK(lay.is_slab_pgpa_page(GpaPage((end - kPageSize) >> kPageShift)));
}

TEST_CASE("validate_ppt_address holds the slab boundary discipline") {
  const PptLayout lay;
  const auto r = lay.slab_range(3);
  CHECK(lay.validate_ppt_address(r.lo, 3));          // inclusive low
  CHECK(lay.validate_ppt_address(r.hi - 1, 3));
  CHECK_FALSE(lay.validate_ppt_address(r.hi, 3));    // exclusive high
  CHECK_FALSE(lay.validate_ppt_address(r.lo - 1, 3));
  CHECK_FALSE(lay.validate_ppt_address(r.lo, 2));    // wrong owner
}

TEST_CASE("layout validation rejects broken geometry") {
  PptLayout l;
  l.slab_size = 0;
  CHECK_THROWS_AS(l.validate(), std::invalid_argument);

  l = {};
  l.slab_size = 12345;  // not page-multiple
  CHECK_THROWS_AS(l.validate(), std::invalid_argument);

  l = {};
  l.device_pages = 4096;  // device window runs into the first slab
  CHECK_THROWS_AS(l.validate(), std::invalid_argument);

  l = {};
  l.ppt_va_start = l.kernel_base;
  CHECK_THROWS_AS(l.validate(), std::invalid_argument);

  l = {};
  l.pgpa_start = l.pgpa_base - kPageSize;
  CHECK_THROWS_AS(l.validate(), std::invalid_argument);
}

TEST_CASE("guest id allocator hands out slots above the host") {
  GuestIdAllocator alloc(8);
  CHECK(alloc.slots() == 8);
  CHECK(alloc.live_count() == 1);  // host holds slot 0 from birth
  CHECK(alloc.is_live(0));

  CHECK(alloc.allocate() == 1);
  CHECK(alloc.allocate() == 2);
  CHECK(alloc.allocate() == 3);
  alloc.release(2);
  CHECK_FALSE(alloc.is_live(2));
  CHECK(alloc.allocate() == 2);  // lowest free id again

  CHECK_THROWS_AS(alloc.release(0), std::logic_error);   // host is forever
  CHECK_THROWS_AS(alloc.release(8), std::out_of_range);
  CHECK_THROWS_AS(alloc.release(5), std::logic_error);   // never allocated

  // Exhaustion: ids 1..7 in an 8-slot table.
  while (alloc.allocate()) {
  }
  CHECK(alloc.live_count() == 8);
  CHECK_FALSE(alloc.allocate().has_value());

  // Default layout leaves exactly 190 allocatable guests after the host.
  GuestIdAllocator full(PptLayout{}.max_guests());
  std::uint32_t granted = 0;
  while (full.allocate()) ++granted;
  CHECK(granted == 190);
}

TEST_CASE("attestation trusts exactly the certified image") {
  const DriverImage img = build_driver_image();
  const OpcodePredicate pred;
  const DriverCertificate cert = certify_driver(img, pred);

  REQUIRE(cert.predicate_sites ==
          std::vector<std::uint32_t>{DriverImage::kEntrySite,
                                     DriverImage::kExitSite});
  CHECK(attest_driver(img.bytes, cert, pred) == Attestation::Trusted);

  SUBCASE("any single flipped byte is rejected") {
    std::mt19937_64 rng(0xa77e57);
    for (int i = 0; i < 100; ++i) {
      std::vector<Byte> mut = img.bytes;
      const std::size_t at = rng() % mut.size();
      mut[at] ^= Byte(1 + rng() % 255);
      CHECK(attest_driver(mut, cert, pred) == Attestation::Rejected);
    }
  }

  SUBCASE("an extra live sequence is rejected even with a fixed digest") {
    std::vector<Byte> mut = img.bytes;
    mut[DriverImage::kBodyOffset + 8] = 0x0f;
    mut.insert(mut.begin() + DriverImage::kBodyOffset + 9, {0x20, 0xd8});
    DriverCertificate forged = cert;
    forged.image_digest = digest(cert.algorithm, mut);
    CHECK(attest_driver(mut, forged, pred) == Attestation::Rejected);
  }

  SUBCASE("a certificate with the wrong number of sites is rejected") {
    DriverCertificate one = cert;
    one.predicate_sites.pop_back();
    CHECK(attest_driver(img.bytes, one, pred) == Attestation::Rejected);
  }
}

TEST_CASE("digest algorithms") {
  const std::vector<Byte> data = {'a', 'b', 'c'};
  const auto sha256 = digest("sha256", data);
  REQUIRE(sha256.size() == 32);
  // Frozen reference value for "abc".
  CHECK(sha256[0] == 0xba);
  CHECK(sha256[1] == 0x78);
  CHECK(sha256[31] == 0xad);
  CHECK(digest("sha1", data).size() == 20);
  CHECK_THROWS_AS(digest("md5", data), std::invalid_argument);
}

TEST_CASE("driver image layout is frozen") {
  const DriverImage img = build_driver_image();
  CHECK(img.bytes.size() == DriverImage::kBodyOffset + 1);
  CHECK(img.bytes[DriverImage::kEntrySite] == 0x0f);
  CHECK(img.bytes[DriverImage::kEntrySite + 1] == 0x20);
  CHECK(img.bytes[DriverImage::kExitSite] == 0x0f);
  CHECK(img.bytes[DriverImage::kVmcallOffset] == 0x0f);
  CHECK(img.bytes[DriverImage::kVmcallOffset + 1] == 0x01);
  CHECK(img.bytes[DriverImage::kVmcallOffset + 2] == 0xc1);
  CHECK(img.bytes.back() == 0xc3);

  // Constants that would embed the sequence's first byte are refused.
  DriverConfig bad;
  bad.ppt_cr3 = 0x000f5000;
  CHECK_THROWS_AS(build_driver_image(bad), std::invalid_argument);
}

TEST_CASE("slab registry maps rings then buffers and translates back") {
  const PptLayout lay;
  SlabRegistry reg(lay);

  CHECK_THROWS_AS(reg.register_guest_rings(1, {0x400, 0x401}, {0x402}),
                  std::invalid_argument);  // unattested

  reg.mark_attested(1);
  const SlabMap& m =
      reg.register_guest_rings(1, {0x400, 0x401}, {0x402, 0x403}, 2048);
  CHECK(m.guest_id == 1);
  CHECK(m.range.lo == lay.slab_range(1).lo);
  CHECK(m.buffer_count == 2 * (kPageSize / 2048));
  REQUIRE(m.pinned.size() == 4);
  CHECK(m.pinned[0] == 0x400);
  CHECK(m.pinned[3] == 0x403);

  // Ring pages sit first; buffers follow at buf_size granularity.
  const Vaddr b0 = m.buffer_ppt_address(0);
  CHECK(b0 == m.range.lo + 2 * kPageSize);
  auto hb = reg.translate(b0);
  REQUIRE(hb);
  CHECK(hb->owner == 1);
  CHECK(hb->buffer_index == 0);
  CHECK(hb->hpa == (Gpa(0x402) << kPageShift));

  const auto hb3 = reg.translate(m.buffer_ppt_address(3));
  REQUIRE(hb3);
  CHECK(hb3->buffer_index == 3);
  CHECK(hb3->hpa == (Gpa(0x403) << kPageShift) + 2048);

  CHECK_FALSE(reg.translate(m.range.lo).has_value());  // ring page, not buffer
  CHECK_FALSE(reg.translate(0xdead0000).has_value());

  CHECK(reg.registered(1));
  CHECK(reg.find(1) != nullptr);
  CHECK(reg.find(2) == nullptr);

  CHECK_THROWS_AS(reg.register_guest_rings(1, {0x500}, {0x501}),
                  std::invalid_argument);  // double registration

  reg.mark_attested(2);
  CHECK_THROWS_AS(reg.register_guest_rings(2, {0x500}, {0x501}, 1000),
                  std::invalid_argument);  // buf_size must divide the page
}
