// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ctrlregen/common.hpp"

#include <json.hpp>

#include <string>

namespace ctrlregen {

// Module weights plus a JSON metadata header (config, fingerprints, parents)
// in a single torch archive.
void save_checkpoint(const std::string& path, const torch::nn::Module& module,
                     const nlohmann::json& meta);

// Reads only the metadata header.
nlohmann::json read_checkpoint_meta(const std::string& path);

// Loads weights into an already-constructed module of matching structure and
// returns the metadata header.
nlohmann::json load_checkpoint(const std::string& path, torch::nn::Module& module);

// Throws FingerprintError unless meta[key] equals `expected`.
void expect_fingerprint(const nlohmann::json& meta, const std::string& key,
                        const std::string& expected, const std::string& what);

} // namespace ctrlregen
