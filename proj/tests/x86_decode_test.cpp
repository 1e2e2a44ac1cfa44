#include <doctest.h>

#include <vector>

#include "fastio/x86_decode.hpp"

using namespace fastio;

namespace {

std::optional<Decoded> dec(std::initializer_list<Byte> bytes) {
  const std::vector<Byte> v(bytes);
  return decode_instruction(v);
}

std::size_t len(std::initializer_list<Byte> bytes) {
  auto d = dec(bytes);
  REQUIRE(d.has_value());
  return d->length;
}

}  // namespace

TEST_CASE("fixed-length opcodes") {
  CHECK(len({0x90}) == 1);                                  // nop
  CHECK(len({0xc3}) == 1);                                  // ret
  CHECK(len({0xc2, 0x08, 0x00}) == 3);                      // ret imm16
  CHECK(len({0xf4}) == 1);                                  // hlt
  CHECK(len({0x9c}) == 1);                                  // pushf
  CHECK(len({0x9d}) == 1);                                  // popf
  CHECK(len({0xfa}) == 1);                                  // cli
  CHECK(len({0xfb}) == 1);                                  // sti
  CHECK(len({0x50}) == 1);                                  // push eax
  CHECK(len({0x5f}) == 1);                                  // pop edi
  CHECK(len({0x41}) == 1);                                  // inc ecx
  CHECK(len({0x68, 1, 2, 3, 4}) == 5);                      // push imm32
  CHECK(len({0x6a, 7}) == 2);                               // push imm8
  CHECK(len({0xcc}) == 1);                                  // int3
  CHECK(len({0xcd, 0x80}) == 2);                            // int imm8
  CHECK(len({0xe8, 0, 0, 0, 0}) == 5);                      // call rel32
  CHECK(len({0xe9, 0, 0, 0, 0}) == 5);                      // jmp rel32
  CHECK(len({0xeb, 0xfe}) == 2);                            // jmp rel8
  CHECK(len({0x74, 0x10}) == 2);                            // jz rel8
  CHECK(len({0x7f, 0x10}) == 2);                            // jg rel8
  CHECK(len({0xb0, 0x55}) == 2);                            // mov al, imm8
  CHECK(len({0xa8, 1}) == 2);                               // test al, imm8
  CHECK(len({0xa9, 1, 2, 3, 4}) == 5);                      // test eax, imm32
  CHECK(len({0x98}) == 1);                                  // cwde
  CHECK(len({0xc9}) == 1);                                  // leave
  CHECK(len({0xf8}) == 1);                                  // clc
}

TEST_CASE("alu block column pattern") {
  CHECK(len({0x01, 0xc8}) == 2);              // add eax, ecx (reg form)
  CHECK(len({0x31, 0xc0}) == 2);              // xor eax, eax
  CHECK(len({0x39, 0xd8}) == 2);              // cmp eax, ebx
  CHECK(len({0x04, 0x01}) == 2);              // add al, imm8
  CHECK(len({0x3d, 1, 2, 3, 4}) == 5);        // cmp eax, imm32
  CHECK_FALSE(dec({0x06}));                   // push es: outside the subset
  CHECK_FALSE(dec({0x0e}));                   // push cs
  CHECK_FALSE(dec({0x27}));                   // daa
}

TEST_CASE("modrm addressing spans") {
  CHECK(len({0x8b, 0xc1}) == 2);                          // reg-reg
  CHECK(len({0x8b, 0x01}) == 2);                          // [ecx]
  CHECK(len({0x8b, 0x45, 0x08}) == 3);                    // [ebp+disp8]
  CHECK(len({0x8b, 0x80, 1, 2, 3, 4}) == 6);              // [eax+disp32]
  CHECK(len({0x8b, 0x05, 1, 2, 3, 4}) == 6);              // [disp32]
  CHECK(len({0x8b, 0x04, 0x24}) == 3);                    // [esp] via SIB
  CHECK(len({0x8b, 0x44, 0x24, 0x04}) == 4);              // [esp+disp8]
  CHECK(len({0x8b, 0x84, 0x24, 1, 2, 3, 4}) == 7);        // [esp+disp32]
  CHECK(len({0x8b, 0x04, 0x25, 1, 2, 3, 4}) == 7);        // base-less SIB
  CHECK(len({0x89, 0x0d, 1, 2, 3, 4}) == 6);              // mov [disp32], ecx
  CHECK(len({0xc7, 0x05, 1, 2, 3, 4, 5, 6, 7, 8}) == 10); // mov [disp32], imm32
  CHECK(len({0xc7, 0xc0, 1, 2, 3, 4}) == 6);              // mov eax, imm32 (c7 form)
  CHECK(len({0x83, 0xc0, 0x01}) == 3);                    // add eax, imm8
  CHECK(len({0x81, 0xc0, 1, 2, 3, 4}) == 6);              // add eax, imm32
  CHECK(len({0x80, 0x3d, 1, 2, 3, 4, 9}) == 7);           // cmp byte [disp32], imm8
  CHECK(len({0xc6, 0x01, 0xab}) == 3);                    // mov byte [ecx], imm8
  CHECK(len({0xff, 0xd0}) == 2);                          // call eax
  CHECK(len({0x8d, 0x41, 0x04}) == 3);                    // lea eax, [ecx+4]
  CHECK(len({0x85, 0xc0}) == 2);                          // test eax, eax
  CHECK(len({0x87, 0xca}) == 2);                          // xchg ecx, edx
  CHECK(len({0x8f, 0x00}) == 2);                          // pop [eax]
}

TEST_CASE("mov reg32, imm32 carries its emulation payload") {
  const std::vector<Byte> code = {0xb8, 0x0f, 0x20, 0x18, 0x00};
  const auto d = decode_instruction(code);
  REQUIRE(d);
  CHECK(d->length == 5);
  CHECK(d->kind == EmuKind::MovImm32);
  CHECK(d->reg == 0);
  CHECK(d->imm == 0x0018200f);

  const std::vector<Byte> edi = {0xbf, 0x78, 0x56, 0x34, 0x12};
  const auto d2 = decode_instruction(edi);
  REQUIRE(d2);
  CHECK(d2->reg == 7);
  CHECK(d2->imm == 0x12345678);
}

TEST_CASE("control-register moves decode as register form regardless of mod") {
  for (int third = 0; third < 256; third += 9) {
    const std::vector<Byte> wr = {0x0f, 0x20, Byte(third)};
    const auto d = decode_instruction(wr);
    REQUIRE(d);
    CHECK(d->length == 3);
    CHECK(d->kind == EmuKind::WriteCr);
    CHECK(d->cr == ((third >> 3) & 7));
    CHECK(d->reg == (third & 7));
  }
  const std::vector<Byte> rd = {0x0f, 0x22, 0xda};
  const auto d = decode_instruction(rd);
  REQUIRE(d);
  CHECK(d->kind == EmuKind::ReadCr);
  CHECK(d->cr == 3);
  CHECK(d->reg == 2);
}

TEST_CASE("two-byte subset") {
  CHECK(len({0x0f, 0x01, 0xc1}) == 3);                 // vmcall
  CHECK(len({0x0f, 0x01, 0xc2}) == 3);                 // vmlaunch
  CHECK(len({0x0f, 0x01, 0x00}) == 3);                 // sgdt [eax]: modrm form
  CHECK(len({0x0f, 0xa2}) == 2);                       // cpuid
  CHECK(len({0x0f, 0xaf, 0xc1}) == 3);                 // imul
  CHECK(len({0x0f, 0xb6, 0xc1}) == 3);                 // movzx
  CHECK(len({0x0f, 0x84, 1, 2, 3, 4}) == 6);           // jz rel32
  CHECK(len({0x0f, 0x8f, 1, 2, 3, 4}) == 6);           // jg rel32
  CHECK(len({0x0f, 0x94, 0xc0}) == 3);                 // setz al
  CHECK_FALSE(dec({0x0f, 0x31}));                      // rdtsc: not in subset
  CHECK_FALSE(dec({0x0f, 0xc7, 0x08}));                // cmpxchg8b
}

TEST_CASE("truncated buffers refuse to decode") {
  CHECK_FALSE(dec({}));
  CHECK_FALSE(dec({0x0f}));
  CHECK_FALSE(dec({0x0f, 0x20}));
  CHECK_FALSE(dec({0xb8, 1, 2, 3}));
  CHECK_FALSE(dec({0xe8, 1, 2}));
  CHECK_FALSE(dec({0x68, 1}));
  CHECK_FALSE(dec({0x8b}));
  CHECK_FALSE(dec({0x8b, 0x05, 1, 2, 3}));
  CHECK_FALSE(dec({0x8b, 0x04}));                      // SIB byte missing
  CHECK_FALSE(dec({0x8b, 0x84, 0x24, 1, 2}));          // disp32 cut short
  CHECK_FALSE(dec({0xc7, 0x05, 1, 2, 3, 4, 5}));       // imm32 cut short
  CHECK_FALSE(dec({0x0f, 0x80, 1, 2, 3}));
  CHECK_FALSE(dec({0x3d, 1, 2}));
}

TEST_CASE("prefixes and exotic opcodes stay out of the subset") {
  CHECK_FALSE(dec({0x66, 0x90}));   // operand-size prefix
  CHECK_FALSE(dec({0xf0, 0x90}));   // lock
  CHECK_FALSE(dec({0xf3, 0x90}));   // rep
  CHECK_FALSE(dec({0x2e, 0x90}));   // cs override
  CHECK_FALSE(dec({0xc8, 0, 0, 0}));  // enter
  CHECK_FALSE(dec({0x9a, 1, 2, 3, 4, 5, 6}));  // far call
  CHECK_FALSE(dec({0x60}));         // pusha
  CHECK_FALSE(dec({0xd9, 0xc0}));   // x87
}

TEST_CASE("decodes_cleanly helper walks whole buffers") {
  const std::vector<Byte> good = {0x90, 0xb8, 1, 2, 3, 4, 0xc3};
  std::size_t at = 0;
  while (at < good.size()) {
    auto d = decode_instruction(std::span<const Byte>(good).subspan(at));
    REQUIRE(d);
    at += d->length;
  }
  CHECK(at == good.size());
}
