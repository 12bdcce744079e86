// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace passnorm {

// Gradient-correctness sweep: central-difference checks for every
// differentiable primitive and for the composed passport-aware layer plus
// training loss, on seeded random instances. Returns (name, max relative
// error) per instance.
std::vector<std::pair<std::string, double>> gradient_check_suite(std::uint64_t seed, double eps);

}  // namespace passnorm
