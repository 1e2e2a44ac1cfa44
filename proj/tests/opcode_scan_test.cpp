#include <doctest.h>

#include <algorithm>
#include <random>

#include "fastio/opcode_scan.hpp"

using namespace fastio;

namespace {

// Reference matcher: try every offset, no cleverness. The scanner must agree
// with this on every input.
std::vector<SequenceHit> brute_scan(std::span<const Byte> page,
                                    const OpcodePredicate& pred,
                                    GpaPage page_index = 0) {
  std::vector<SequenceHit> hits;
  if (page.size() < pred.length()) return hits;
  for (std::size_t off = 0; off + pred.length() <= page.size(); ++off) {
    const auto w = page.subspan(off, pred.length());
    if (pred.matches(w))
      hits.push_back({page_index, std::uint32_t(off),
                      std::vector<Byte>(w.begin(), w.end()), false});
  }
  return hits;
}

Page random_page(std::mt19937_64& rng) {
  Page p{};
  for (Byte& b : p) b = Byte(rng());
  return p;
}

}  // namespace

TEST_CASE("default predicate matches exactly the cr3 third-byte classes") {
  const OpcodePredicate pred;
  REQUIRE(pred.length() == 3);
  int matched = 0;
  for (int b = 0; b < 256; ++b) {
    const Byte w[3] = {0x0f, 0x20, Byte(b)};
    const bool hit = pred.matches(w);
    CHECK(hit == ((b & 0x38) == 0x18));
    matched += hit;
  }
  // Four mod/rm families select register 3 in bits 3-5.
  CHECK(matched == 4 * 8);

  // Prefix bytes must match exactly.
  const Byte wrong1[3] = {0x0e, 0x20, 0x18};
  const Byte wrong2[3] = {0x0f, 0x21, 0x18};
  CHECK_FALSE(pred.matches(wrong1));
  CHECK_FALSE(pred.matches(wrong2));
}

TEST_CASE("scan_page equals the brute-force matcher on random pages") {
  std::mt19937_64 rng(0x5ca11ed);
  const OpcodePredicate pred;
  for (int n = 0; n < 200; ++n) {
    const Page p = random_page(rng);
    CHECK(scan_page(p, pred, GpaPage(n)) == brute_scan(p, pred, GpaPage(n)));
  }
}

TEST_CASE("plants at every offset class are found, tail truncations are not") {
  const OpcodePredicate pred;
  for (std::uint32_t off : {0u, 1u, 7u, 2048u, 4092u, 4093u}) {
    Page p{};
    p[off] = 0x0f;
    p[off + 1] = 0x20;
    p[off + 2] = 0xd8;
    const auto hits = scan_page(p, pred);
    REQUIRE(hits.size() == 1);
    CHECK(hits[0].offset == off);
    CHECK(hits[0].matched_bytes == std::vector<Byte>{0x0f, 0x20, 0xd8});
    CHECK_FALSE(hits[0].straddles_boundary);
  }
  // 4094/4095 can't hold a full in-page match; that's scan_pair territory.
  for (std::uint32_t off : {4094u, 4095u}) {
    Page p{};
    p[off] = 0x0f;
    if (off + 1 < kPageSize) p[off + 1] = 0x20;
    CHECK(scan_page(p, pred).empty());
  }
}

TEST_CASE("overlapping matches are all reported") {
  // The default pattern can't overlap itself (0x0f never matches the masked
  // byte), so use a sloppier predicate to exercise the reporting path.
  const OpcodePredicate any_after_aa{{0xaa}, 0x00, 0x00};
  const std::vector<Byte> bytes = {0xaa, 0xaa, 0xaa, 0x01};
  const auto hits = scan_page(bytes, any_after_aa);
  REQUIRE(hits.size() == 2);
  CHECK(hits[0].offset == 0);
  CHECK(hits[1].offset == 1);
  CHECK(scan_page(bytes, any_after_aa) == brute_scan(bytes, any_after_aa));
}

TEST_CASE("short buffers and empty input") {
  const OpcodePredicate pred;
  CHECK(scan_page({}, pred).empty());
  const std::vector<Byte> two = {0x0f, 0x20};
  CHECK(scan_page(two, pred).empty());
  const std::vector<Byte> exact = {0x0f, 0x20, 0x1f};
  REQUIRE(scan_page(exact, pred).size() == 1);
}

TEST_CASE("scan_pair equals a concatenation oracle restricted to the seam") {
  std::mt19937_64 rng(0x5ea3);
  const OpcodePredicate pred;
  for (int n = 0; n < 100; ++n) {
    Page a = random_page(rng);
    Page b = random_page(rng);
    // Salt the seam so straddles actually occur.
    if (n % 3 == 0) {
      a[4094] = 0x0f;
      a[4095] = 0x20;
      b[0] = 0xd8;
    }
    if (n % 3 == 1) {
      a[4095] = 0x0f;
      b[0] = 0x20;
      b[1] = 0x5f;
    }

    std::vector<Byte> joined(a.begin(), a.end());
    joined.insert(joined.end(), b.begin(), b.end());
    std::vector<SequenceHit> expect;
    for (const SequenceHit& h : brute_scan(joined, pred, 7)) {
      // Keep only matches whose bytes cross the page boundary.
      if (h.offset + pred.length() > kPageSize && h.offset < kPageSize) {
        SequenceHit s = h;
        s.straddles_boundary = true;
        expect.push_back(s);
      }
    }
    CHECK(scan_pair(a, b, pred, 7) == expect);
  }
}

TEST_CASE("scan_pair reports both straddle offsets") {
  const OpcodePredicate pred;
  Page a{};
  Page b{};
  a[4094] = 0x0f;
  a[4095] = 0x20;
  b[0] = 0x98;  // third-byte class 0x98..0x9f selects register 3
  auto hits = scan_pair(a, b, pred, 3);
  REQUIRE(hits.size() == 1);
  CHECK(hits[0].page_index == 3);
  CHECK(hits[0].offset == 4094);
  CHECK(hits[0].straddles_boundary);
  CHECK(hits[0].matched_bytes == std::vector<Byte>{0x0f, 0x20, 0x98});

  a[4094] = 0;
  a[4095] = 0x0f;
  b[0] = 0x20;
  b[1] = 0xdf;
  hits = scan_pair(a, b, pred, 3);
  REQUIRE(hits.size() == 1);
  CHECK(hits[0].offset == 4095);

  // Fully-inside matches on either side never show up here.
  Page c{};
  c[0] = 0x0f;
  c[1] = 0x20;
  c[2] = 0x18;
  CHECK(scan_pair(c, c, pred).empty());
}

TEST_CASE("custom predicate widths") {
  // One-byte prefix.
  const OpcodePredicate narrow{{0x0f}, 0xff, 0x20};
  const std::vector<Byte> buf = {0x00, 0x0f, 0x20, 0x0f, 0x21};
  const auto hits = scan_page(buf, narrow);
  REQUIRE(hits.size() == 1);
  CHECK(hits[0].offset == 1);

  // Three-byte prefix (vmcall-shaped).
  const OpcodePredicate wide{{0x0f, 0x01, 0xc1}, 0x00, 0x00};
  std::vector<Byte> buf2 = {0x0f, 0x01, 0xc1, 0x77};
  REQUIRE(scan_page(buf2, wide).size() == 1);
  CHECK(scan_page(buf2, wide)[0].matched_bytes ==
        std::vector<Byte>{0x0f, 0x01, 0xc1, 0x77});
}
