// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ctrlregen {

// Error taxonomy. Every failure surfaced by the library derives from Error so
// the CLI can map it onto a machine-readable record.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

struct RangeError : Error {
    explicit RangeError(const std::string& what) : Error("invalid-range", what) {}
};
struct ShapeError : Error {
    explicit ShapeError(const std::string& what) : Error("shape-mismatch", what) {}
};
struct FingerprintError : Error {
    explicit FingerprintError(const std::string& what) : Error("fingerprint-mismatch", what) {}
};
struct TrainingError : Error {
    explicit TrainingError(const std::string& what) : Error("training-failure", what) {}
};
struct FrozenParameterError : Error {
    explicit FrozenParameterError(const std::string& what) : Error("frozen-parameter-update", what) {}
};
struct DataError : Error {
    explicit DataError(const std::string& what) : Error("data-error", what) {}
};
struct MissingComponentError : Error {
    explicit MissingComponentError(const std::string& what) : Error("missing-component", what) {}
};

// Shape string for diagnostics, e.g. "[4, 16, 16]".
std::string shape_str(const torch::Tensor& t);

void require_shape(const torch::Tensor& t, at::IntArrayRef expected, std::string_view what);

// Deterministic CPU generator for one randomness stream.
at::Generator make_generator(std::uint64_t seed);

// Derives an independent stream seed from a base seed and a stage label.
std::uint64_t derive_seed(std::uint64_t base, std::string_view label);

// Standard normal draw of the given shape from a dedicated stream.
torch::Tensor seeded_normal(at::IntArrayRef shape, std::uint64_t seed,
                            torch::Dtype dtype = torch::kFloat32);

// FNV-1a over the raw bytes of every tensor, in order.
std::uint64_t checksum(const std::vector<torch::Tensor>& tensors);
std::uint64_t checksum_bytes(std::string_view bytes, std::uint64_t seed = 14695981039346656037ULL);

std::string hex64(std::uint64_t v);

// Puts libtorch in a reproducible configuration (fixed intra-op threads,
// deterministic kernels where available).
void set_deterministic(bool on = true);

} // namespace ctrlregen
