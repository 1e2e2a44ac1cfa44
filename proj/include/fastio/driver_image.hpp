#pragma once

#include <cstdint>
#include <vector>

#include "fastio/layout.hpp"
#include "fastio/types.hpp"

namespace fastio {

// Byte layout of the builtin fastio driver.  The wrapper is position-fixed
// real-mode-free 32-bit code: save flags, mask interrupts, stash the current
// cr3 in edx, switch to the privileged root, run the body on a private stack,
// switch back, and self-check that the return switch actually left the
// privileged root (vmcall if not).
//
//  0: 9c                       pushf
//  1: fa                       cli
//  2: b8 <ppt_cr3>             mov  eax, ppt_cr3
//  7: 0f 22 da                 mov  edx, cr3          ; caller's root
// 10: 0f 20 d8                 mov  cr3, eax          ; ENTRY site
// 13: 89 25 <scratch_va>       mov  [scratch], esp
// 19: bc <stack_top_va>        mov  esp, stack_top
// 24: 90                       nop
// 25: e8 <rel32>               call body
// 30: 90                       nop
// 31: 8b 25 <scratch_va>       mov  esp, [scratch]
// 37: 89 d0                    mov  eax, edx
// 39: 0f 20 d8                 mov  cr3, eax          ; EXIT site
// 42: 0f 22 d8                 mov  eax, cr3
// 45: 3d <ppt_cr3>             cmp  eax, ppt_cr3
// 50: 75 03                    jne  +3
// 52: 0f 01 c1                 vmcall
// 55: 9d                       popf
// 56: c3                       ret
//
// The body stub at kBodyOffset is a bare ret; the simulator hooks the body
// virtual address and does the device work natively.
struct DriverImage {
  std::vector<Byte> bytes;

  Vaddr code_va = 0;
  std::uint32_t ppt_cr3 = 0;
  Vaddr scratch_va = 0;
  Vaddr stack_top_va = 0;

  static constexpr std::uint32_t kEntrySite = 10;
  static constexpr std::uint32_t kExitSite = 39;
  static constexpr std::uint32_t kVmcallOffset = 52;
  static constexpr std::uint32_t kWrapperBytes = 57;
  static constexpr std::uint32_t kBodyOffset = 64;

  Vaddr entry_va() const { return code_va; }
  Vaddr body_va() const { return code_va + kBodyOffset; }
};

struct DriverConfig {
  Vaddr code_va = 0xc0100000;
  std::uint32_t ppt_cr3 = 0x00805000;
  // Both live below the device window (which starts at 4 MiB) so they can
  // never shadow a mapped device or slab page.
  Vaddr scratch_va = 0x00202000;
  Vaddr stack_top_va = 0x00201000;
};

// Immediates containing a 0x0f byte could collide with the subtracted
// sequence; the builder rejects such configs outright.
DriverImage build_driver_image(const DriverConfig& cfg = {});

DriverCertificate certify_driver(const DriverImage& image,
                                 const OpcodePredicate& pred,
                                 const std::string& algorithm = "sha256");

}  // namespace fastio
