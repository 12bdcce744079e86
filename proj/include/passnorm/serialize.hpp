// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>

#include <json.hpp>

#include "passnorm/attacks.hpp"
#include "passnorm/data.hpp"
#include "passnorm/model.hpp"
#include "passnorm/train.hpp"
#include "passnorm/verify.hpp"

namespace passnorm {

// Binary container shared by checkpoints, keystores, and dataset files:
//
//   bytes 0..7    magic "PASNORM1"
//   bytes 8..11   format version (u32, little-endian)
//   bytes 12..19  manifest length (u64, little-endian)
//   manifest      canonical JSON (sorted keys, no whitespace), UTF-8
//   payload       contiguous little-endian float32 tensor data
//
// The manifest's tensor directory lists (name, shape, dtype, offset, nbytes)
// with non-overlapping in-range offsets. Identical inputs serialize to
// byte-identical files.

struct Checkpoint {
    Model model;
    std::map<std::string, std::string> experiment;  // flat config the run used
};

void save_checkpoint(const Model& m, const std::map<std::string, std::string>& experiment,
                     const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct TriggerInfo {
    int n = 0;
    std::uint64_t seed = 0;
    int num_classes = 0;
    std::vector<int> input_shape;
};

struct Keystore {
    PassportBundle bundle;
    BranchParams branch;
    TriggerInfo trigger;
};

void save_keystore(const Keystore& ks, const std::string& path);
Keystore load_keystore(const std::string& path);

void save_dataset(const Dataset& d, const std::string& path);
Dataset load_dataset(const std::string& path);

// Report serialization (machine-readable side).
nlohmann::json to_json(const VerificationReport& r);
nlohmann::json to_json(const AttackReport& r);
AttackReport attack_report_from_json(const nlohmann::json& j);
std::string history_lines(const TrainHistory& h);  // one JSON record per line
TrainHistory history_from_lines(const std::string& text);

}  // namespace passnorm
