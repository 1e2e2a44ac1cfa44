#include "fastio/driver_image.hpp"

#include <stdexcept>

#include "fastio/digest.hpp"
#include "fastio/opcode_scan.hpp"

namespace fastio {

namespace {
void put_u32(std::vector<Byte>& v, std::uint32_t x) {
  for (std::uint32_t sh = 0; sh < 4; ++sh) {
    Byte b = Byte((x >> (sh * 8)) & 0xff);
    if (b == 0x0f)
      throw std::invalid_argument("driver constant would embed a 0x0f byte");
    v.push_back(b);
  }
}
}  // namespace

DriverImage build_driver_image(const DriverConfig& cfg) {
  DriverImage img;
  img.code_va = cfg.code_va;
  img.ppt_cr3 = cfg.ppt_cr3;
  img.scratch_va = cfg.scratch_va;
  img.stack_top_va = cfg.stack_top_va;

  auto& b = img.bytes;
  b = {0x9c, 0xfa};                       //  0 pushf, cli
  b.push_back(0xb8);                      //  2 mov eax, imm32
  put_u32(b, cfg.ppt_cr3);
  b.insert(b.end(), {0x0f, 0x22, 0xda});  //  7 mov edx, cr3
  b.insert(b.end(), {0x0f, 0x20, 0xd8});  // 10 mov cr3, eax   (entry site)
  b.insert(b.end(), {0x89, 0x25});        // 13 mov [disp32], esp
  put_u32(b, cfg.scratch_va);
  b.push_back(0xbc);                      // 19 mov esp, imm32
  put_u32(b, cfg.stack_top_va);
  b.push_back(0x90);                      // 24
  b.push_back(0xe8);                      // 25 call body
  put_u32(b, DriverImage::kBodyOffset - 30);
  b.push_back(0x90);                      // 30
  b.insert(b.end(), {0x8b, 0x25});        // 31 mov esp, [disp32]
  put_u32(b, cfg.scratch_va);
  b.insert(b.end(), {0x89, 0xd0});        // 37 mov eax, edx
  b.insert(b.end(), {0x0f, 0x20, 0xd8});  // 39 mov cr3, eax   (exit site)
  b.insert(b.end(), {0x0f, 0x22, 0xd8});  // 42 mov eax, cr3
  b.push_back(0x3d);                      // 45 cmp eax, imm32
  put_u32(b, cfg.ppt_cr3);
  b.insert(b.end(), {0x75, 0x03});        // 50 jne +3
  b.insert(b.end(), {0x0f, 0x01, 0xc1});  // 52 vmcall
  b.push_back(0x9d);                      // 55 popf
  b.push_back(0xc3);                      // 56 ret

  if (b.size() != DriverImage::kWrapperBytes)
    throw std::logic_error("wrapper layout drifted");
  b.resize(DriverImage::kBodyOffset, 0x90);
  b.push_back(0xc3);  // body stub: plain return

  return img;
}

DriverCertificate certify_driver(const DriverImage& image,
                                 const OpcodePredicate& pred,
                                 const std::string& algorithm) {
  DriverCertificate cert;
  cert.algorithm = algorithm;
  cert.image_digest = digest(algorithm, image.bytes);
  for (const auto& hit : scan_page(image.bytes, pred))
    cert.predicate_sites.push_back(hit.offset);
  return cert;
}

}  // namespace fastio
