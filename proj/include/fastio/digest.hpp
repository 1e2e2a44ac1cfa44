#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "fastio/types.hpp"

namespace fastio {

// Attestation digest. "sha256" is the default everywhere; "sha1" is kept for
// certificates produced by older tooling. Throws std::invalid_argument on an
// unknown algorithm name.
std::vector<Byte> digest(std::string_view algorithm, std::span<const Byte> data);

}  // namespace fastio
