// SPDX-License-Identifier: Apache-2.0

#include "ctrlregen/checkpoint.hpp"

#include <filesystem>

namespace ctrlregen {

namespace {
constexpr const char* kMetaKey = "__meta__";
}

void save_checkpoint(const std::string& path, const torch::nn::Module& module,
                     const nlohmann::json& meta) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    torch::serialize::OutputArchive archive;
    module.save(archive);
    archive.write(kMetaKey, c10::IValue(meta.dump()));
    archive.save_to(path);
}

nlohmann::json read_checkpoint_meta(const std::string& path) {
    if (!std::filesystem::exists(path)) throw MissingComponentError("checkpoint not found: " + path);
    torch::serialize::InputArchive archive;
    archive.load_from(path);
    c10::IValue v;
    if (!archive.try_read(kMetaKey, v)) throw DataError("checkpoint has no metadata header: " + path);
    return nlohmann::json::parse(v.toStringRef());
}

nlohmann::json load_checkpoint(const std::string& path, torch::nn::Module& module) {
    if (!std::filesystem::exists(path)) throw MissingComponentError("checkpoint not found: " + path);
    torch::serialize::InputArchive archive;
    archive.load_from(path);
    c10::IValue v;
    if (!archive.try_read(kMetaKey, v)) throw DataError("checkpoint has no metadata header: " + path);
    module.load(archive);
    return nlohmann::json::parse(v.toStringRef());
}

void expect_fingerprint(const nlohmann::json& meta, const std::string& key,
                        const std::string& expected, const std::string& what) {
    const auto got = meta.value(key, std::string());
    if (got != expected) {
        throw FingerprintError(what + ": " + key + " is '" + got + "', expected '" + expected + "'");
    }
}

} // namespace ctrlregen
