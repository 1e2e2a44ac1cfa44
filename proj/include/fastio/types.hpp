#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

namespace fastio {

constexpr std::size_t kPageSize = 4096;
constexpr std::size_t kPageShift = 12;

using Byte = std::uint8_t;
using Page = std::array<Byte, kPageSize>;

// Guest-physical addresses can exceed 4 GB (the PGPA windows live there);
// guest-virtual addresses are 32-bit.
using Gpa = std::uint64_t;
using GpaPage = std::uint64_t;
using Vaddr = std::uint32_t;
using VPage = std::uint32_t;

constexpr std::uint64_t kMiB = 1024ull * 1024ull;
constexpr std::uint64_t kGiB = 1024ull * kMiB;

std::string hex_bytes(std::span<const Byte> bytes);

inline std::uint32_t read_le32(std::span<const Byte> b) {
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 |
         std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

inline std::uint64_t read_le64(std::span<const Byte> b) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = v << 8 | b[std::size_t(i)];
  return v;
}

inline void write_le32(std::span<Byte> b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[std::size_t(i)] = Byte(v >> (8 * i));
}

inline void write_le64(std::span<Byte> b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b[std::size_t(i)] = Byte(v >> (8 * i));
}

}  // namespace fastio
