// SPDX-License-Identifier: Apache-2.0
//
// Micro configurations and small helpers shared by the unit tests and the
// acceptance binary.

#pragma once

#include "ctrlregen/attacks.hpp"
#include "ctrlregen/codec.hpp"
#include "ctrlregen/denoiser.hpp"
#include "ctrlregen/semantic_control.hpp"
#include "ctrlregen/spatial_control.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace ctrlregen::testing {

// 2-level U-Net on 3-channel 8x8 latents, attention at both levels.
UNetConfig micro_unet(int latent_channels = 3);
// Trunk used as the adapter's image encoder in micro tests (factor 2).
AutoencoderConfig micro_trunk();
AdapterConfig micro_adapter();

// Uniform random images [n,3,h,w] in [0,1] from a fixed stream.
torch::Tensor random_images(int64_t n, int64_t h, int64_t w, std::uint64_t seed);
// Smooth structured images (gradients plus a bright square) so edge maps are
// nonempty.
torch::Tensor structured_images(int64_t n, int64_t h, int64_t w, std::uint64_t seed);

// Backbone, adapter and spatial net wired together over the identity codec,
// randomly initialised from `seed`.
struct MicroStack {
    std::shared_ptr<IdentityCodec> codec;
    NoiseSchedule schedule;
    Denoiser denoiser{nullptr};
    SemanticAdapter adapter{nullptr};
    SpatialControlNet spatial{nullptr};
    ControlledPipeline pipeline() const;
};
MicroStack make_micro_stack(std::uint64_t seed, int T = 100);

// Fills every parameter of `m` with small seeded normal values; used to make
// zero-initialised layers nonzero before gradient checks.
void randomize(torch::nn::Module& m, std::uint64_t seed, double scale = 0.1);

struct GradCheck {
    double rel_error = 0.0; // ||analytic - numeric|| / ||numeric||
    double numeric_norm = 0.0;
    int coordinates = 0;
};
// Central-difference check of d loss / d params on `coords` seeded
// coordinates per tensor. Everything is expected in double precision.
GradCheck gradient_check(const std::function<torch::Tensor()>& loss, const std::vector<torch::Tensor>& params,
                         int coords, std::uint64_t seed, double h = 1e-6);

// Fresh directory under the system temp path, removed on destruction.
struct TempDir {
    explicit TempDir(const std::string& tag);
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    std::filesystem::path path;
};

// Path of a file under tests/fixtures.
std::filesystem::path fixture(const std::string& name);

} // namespace ctrlregen::testing
