#pragma once

#include <optional>
#include <span>
#include <vector>

#include "fastio/types.hpp"

namespace fastio {

// What the hypervisor must be able to re-execute after trapping a patch site.
// Anything it can measure the length of but not model advances eip only.
enum class EmuKind {
  MovImm32,  // b8+r imm32
  WriteCr,   // cr written from a gp register; cr index in `cr`, source in `reg`
  ReadCr,    // gp register written from a cr
  Nop,
  Opaque,    // length known, no modeled side effect
};

struct Decoded {
  std::size_t length = 0;
  EmuKind kind = EmuKind::Opaque;
  int reg = 0;            // gp register operand, when meaningful
  int cr = 0;             // control register index for WriteCr/ReadCr
  std::uint32_t imm = 0;  // immediate for MovImm32
};

// Length (and coarse semantics) for a documented subset of 32-bit x86:
//   - single-byte opcodes without operands
//   - ModRM forms, including SIB and disp8/disp32
//   - imm8/imm32 forms (no 16-bit operand-size override)
//   - 0x0f two-byte opcodes: control-register moves, jcc rel32, setcc,
//     movzx/movsx, imul, cpuid, and the vmcall group
// Prefixes (lock/rep/segment/operand-size) and everything else decode to
// nullopt; a boundary search that lands on them gives up rather than guess.
//
// Control-register moves follow the encoding used across this project:
// 0x0f 0x20 /r writes cr from the rm register, 0x0f 0x22 /r reads cr into it.
std::optional<Decoded> decode_instruction(std::span<const Byte> code);

inline std::optional<std::size_t> instruction_length(std::span<const Byte> code) {
  auto d = decode_instruction(code);
  if (!d) return std::nullopt;
  return d->length;
}

}  // namespace fastio
