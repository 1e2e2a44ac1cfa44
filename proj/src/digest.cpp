#include "fastio/digest.hpp"

#include <openssl/evp.h>

#include <memory>
#include <stdexcept>
#include <string>

namespace fastio {

std::vector<Byte> digest(std::string_view algorithm, std::span<const Byte> data) {
  const EVP_MD* md = nullptr;
  if (algorithm == "sha256") md = EVP_sha256();
  else if (algorithm == "sha1") md = EVP_sha1();
  if (!md) throw std::invalid_argument("unknown digest algorithm: " + std::string(algorithm));

  std::vector<Byte> out(EVP_MAX_MD_SIZE);
  unsigned int out_len = 0;
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(),
                                                              EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), md, nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), data.data(), data.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), out.data(), &out_len) != 1)
    throw std::runtime_error("digest computation failed");
  out.resize(out_len);
  return out;
}

}  // namespace fastio
