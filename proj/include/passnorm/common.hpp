// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace passnorm {

// Shape/value contract violations on tensor operations.
class DimensionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// API misuse: bad arguments, missing gradients, wrong call order.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed checkpoint/keystore/dataset container. Carries the byte
// offset at which parsing failed.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::uint64_t byte_offset)
        : std::runtime_error(what + " (at byte " + std::to_string(byte_offset) + ")"),
          offset_(byte_offset) {}
    std::uint64_t offset() const { return offset_; }

private:
    std::uint64_t offset_;
};

// Keystore does not match the model it is applied to.
class KeystoreError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// BN inference requested before any running-statistics update.
class UninitializedStatsError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid model specification.
class SpecError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace passnorm
