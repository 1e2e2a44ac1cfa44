#include "fastio/x86_decode.hpp"

namespace fastio {
namespace {

// Bytes consumed by a ModRM byte and its SIB/displacement, or nullopt if the
// buffer runs out. `code` starts at the ModRM byte.
std::optional<std::size_t> modrm_span(std::span<const Byte> code) {
  if (code.empty()) return std::nullopt;
  const Byte modrm = code[0];
  const int mod = modrm >> 6;
  const int rm = modrm & 7;
  std::size_t n = 1;
  if (mod == 3) return n;
  bool sib = rm == 4;
  if (sib) n += 1;
  if (mod == 1) {
    n += 1;
  } else if (mod == 2) {
    n += 4;
  } else {  // mod == 0
    if (rm == 5) n += 4;
    if (sib) {
      if (code.size() < 2) return std::nullopt;
      if ((code[1] & 7) == 5) n += 4;  // base-less SIB carries disp32
    }
  }
  if (code.size() < n) return std::nullopt;
  return n;
}

std::optional<Decoded> with_modrm(std::span<const Byte> code, std::size_t opcode_len,
                                  std::size_t imm = 0) {
  auto span = modrm_span(code.subspan(opcode_len));
  if (!span) return std::nullopt;
  std::size_t total = opcode_len + *span + imm;
  if (code.size() < total) return std::nullopt;
  return Decoded{total, EmuKind::Opaque, 0, 0, 0};
}

std::optional<Decoded> fixed(std::span<const Byte> code, std::size_t len,
                             EmuKind kind = EmuKind::Opaque) {
  if (code.size() < len) return std::nullopt;
  return Decoded{len, kind, 0, 0, 0};
}

std::optional<Decoded> two_byte(std::span<const Byte> code) {
  if (code.size() < 2) return std::nullopt;
  const Byte op = code[1];
  switch (op) {
    case 0x20:    // mov %reg, %crN (cr write)
    case 0x22: {  // mov %crN, %reg (cr read)
      // Hardware treats these as register form regardless of mod bits.
      if (code.size() < 3) return std::nullopt;
      Decoded d;
      d.length = 3;
      d.kind = op == 0x20 ? EmuKind::WriteCr : EmuKind::ReadCr;
      d.cr = (code[2] >> 3) & 7;
      d.reg = code[2] & 7;
      return d;
    }
    case 0x01:  // group: vmcall/vmlaunch encode as 0f 01 c1/c2
      if (code.size() < 3) return std::nullopt;
      if (code[2] == 0xc1 || code[2] == 0xc2) return fixed(code, 3);
      return with_modrm(code, 2);
    case 0xa2:  // cpuid
      return fixed(code, 2);
    case 0xaf:  // imul r, r/m
    case 0xb6:  // movzx r, r/m8
    case 0xb7:  // movzx r, r/m16
    case 0xbe:  // movsx r, r/m8
    case 0xbf:  // movsx r, r/m16
      return with_modrm(code, 2);
    default:
      if (op >= 0x80 && op <= 0x8f) {  // jcc rel32
        if (code.size() < 6) return std::nullopt;
        return fixed(code, 6);
      }
      if (op >= 0x90 && op <= 0x9f) return with_modrm(code, 2);  // setcc
      return std::nullopt;
  }
}

}  // namespace

std::optional<Decoded> decode_instruction(std::span<const Byte> code) {
  if (code.empty()) return std::nullopt;
  const Byte op = code[0];

  if (op == 0x0f) return two_byte(code);

  // ALU block: 00-3f, column pattern repeats every 8.
  if (op < 0x40) {
    const int col = op & 7;
    switch (col) {
      case 0: case 1: case 2: case 3:
        return with_modrm(code, 1);
      case 4:
        return fixed(code, 2);  // op al, imm8
      case 5:
        return fixed(code, 5);  // op eax, imm32
      default:
        return std::nullopt;  // segment push/pop and friends
    }
  }
  if (op < 0x60) return fixed(code, 1);  // inc/dec/push/pop reg

  switch (op) {
    case 0x68: return fixed(code, 5);                       // push imm32
    case 0x6a: return fixed(code, 2);                       // push imm8
    case 0x80: return with_modrm(code, 1, 1);               // grp1 r/m8, imm8
    case 0x81: return with_modrm(code, 1, 4);               // grp1 r/m32, imm32
    case 0x83: return with_modrm(code, 1, 1);               // grp1 r/m32, imm8
    case 0x84: case 0x85:                                   // test
    case 0x86: case 0x87:                                   // xchg
    case 0x88: case 0x89: case 0x8a: case 0x8b:             // mov
    case 0x8d:                                              // lea
    case 0x8f:                                              // pop r/m
      return with_modrm(code, 1);
    case 0x90: return fixed(code, 1, EmuKind::Nop);
    case 0x98: case 0x99: return fixed(code, 1);            // cwde/cdq
    case 0x9c: case 0x9d: return fixed(code, 1);            // pushf/popf
    case 0xa8: return fixed(code, 2);                       // test al, imm8
    case 0xa9: return fixed(code, 5);                       // test eax, imm32
    case 0xc2: return fixed(code, 3);                       // ret imm16
    case 0xc3: return fixed(code, 1);                       // ret
    case 0xc6: return with_modrm(code, 1, 1);               // mov r/m8, imm8
    case 0xc7: return with_modrm(code, 1, 4);               // mov r/m32, imm32
    case 0xc9: return fixed(code, 1);                       // leave
    case 0xcc: return fixed(code, 1);                       // int3
    case 0xcd: return fixed(code, 2);                       // int imm8
    case 0xe8: case 0xe9: return fixed(code, 5);            // call/jmp rel32
    case 0xeb: return fixed(code, 2);                       // jmp rel8
    case 0xf4: return fixed(code, 1);                       // hlt
    case 0xf8: case 0xf9: case 0xfa: case 0xfb:
    case 0xfc: case 0xfd:
      return fixed(code, 1);                                // clc..std
    case 0xff: return with_modrm(code, 1);                  // grp5
    default: break;
  }

  if (op >= 0x70 && op <= 0x7f) return fixed(code, 2);      // jcc rel8

  if (op >= 0xb0 && op <= 0xb7) return fixed(code, 2);      // mov reg8, imm8
  if (op >= 0xb8 && op <= 0xbf) {                           // mov reg32, imm32
    if (code.size() < 5) return std::nullopt;
    Decoded d;
    d.length = 5;
    d.kind = EmuKind::MovImm32;
    d.reg = op & 7;
    d.imm = read_le32(code.subspan(1));
    return d;
  }

  return std::nullopt;
}

}  // namespace fastio
