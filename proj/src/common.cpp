// SPDX-License-Identifier: Apache-2.0

#include "ctrlregen/common.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cstdio>
#include <sstream>

namespace ctrlregen {

std::string shape_str(const torch::Tensor& t) {
    std::ostringstream os;
    os << t.sizes();
    return os.str();
}

void require_shape(const torch::Tensor& t, at::IntArrayRef expected, std::string_view what) {
    if (t.sizes() != expected) {
        std::ostringstream os;
        os << what << ": expected shape " << expected << ", got " << t.sizes();
        throw ShapeError(os.str());
    }
}

at::Generator make_generator(std::uint64_t seed) {
    return at::make_generator<at::CPUGeneratorImpl>(seed);
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view label) {
    std::uint64_t h = checksum_bytes(label, 14695981039346656037ULL ^ base);
    // splitmix64 finaliser
    h += 0x9e3779b97f4a7c15ULL;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ULL;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebULL;
    return (h ^ (h >> 31)) & 0x7fffffffffffffffULL;
}

torch::Tensor seeded_normal(at::IntArrayRef shape, std::uint64_t seed, torch::Dtype dtype) {
    auto gen = make_generator(seed);
    return torch::randn(shape, gen, torch::TensorOptions().dtype(dtype));
}

std::uint64_t checksum_bytes(std::string_view bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::uint64_t checksum(const std::vector<torch::Tensor>& tensors) {
    std::uint64_t h = 14695981039346656037ULL;
    for (const auto& t : tensors) {
        auto c = t.detach().contiguous().cpu();
        std::string_view bytes(static_cast<const char*>(c.data_ptr()), c.nbytes());
        h = checksum_bytes(bytes, h);
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void set_deterministic(bool on) {
    if (on) {
        torch::set_num_threads(1);
    }
    at::globalContext().setDeterministicAlgorithms(on, /*warn_only=*/true);
}

} // namespace ctrlregen
