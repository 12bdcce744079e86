// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace passnorm {

// SHA-256 digest of a byte string.
std::array<std::uint8_t, 32> sha256(std::string_view message);

std::string sha256_hex(std::string_view message);

// Deterministic {-1,+1} target sign for one signature bit, derived from
// the owner identity and the bit's position. pipeline: 0 = gamma, 1 = beta.
int target_sign(std::string_view owner_id, int layer_id, int pipeline, int channel);

}  // namespace passnorm
