// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ctrlregen/codec.hpp"
#include "ctrlregen/denoiser.hpp"
#include "ctrlregen/edges.hpp"
#include "ctrlregen/schedule.hpp"
#include "ctrlregen/semantic_control.hpp"
#include "ctrlregen/spatial_control.hpp"

#include <memory>
#include <string>

namespace ctrlregen {

// Everything an attack needs. Adapter and spatial net are optional for the
// uncontrolled attacks.
struct ControlledPipeline {
    std::shared_ptr<const LatentCodec> codec;
    NoiseSchedule schedule;
    mutable Denoiser denoiser{nullptr};
    mutable SemanticAdapter adapter{nullptr};
    mutable SpatialControlNet spatial{nullptr};
    int full_steps = 50;
    std::uint64_t seed = 0;
    CannyParams canny;
    int64_t batch = 16;

    // Throws MissingComponentError / FingerprintError on inconsistent parts.
    void validate(bool need_adapter, bool need_spatial) const;
};

// Which conditioning the controlled reverse loop uses.
struct ControlMode {
    bool semantic = true;
    bool spatial = true;
};

// Noise draw for image `index` in pass `pass`; shape = latent shape.
torch::Tensor attack_noise(const ControlledPipeline& p, int64_t index, int pass, at::IntArrayRef latent_shape);

// Encode, noise to t_star, uncontrolled reverse, decode. Images are
// [N,3,H,W]; `first_index` offsets the per-image seeds.
torch::Tensor regen(const ControlledPipeline& p, const torch::Tensor& x_w, int t_star, int64_t first_index = 0);

// k sequential regen passes; pass j uses its own noise stream.
torch::Tensor rinse(const ControlledPipeline& p, const torch::Tensor& x_w, int t_star, int k,
                    int64_t first_index = 0);

// Controlled regeneration from pure noise.
torch::Tensor ctrl_regen(const ControlledPipeline& p, const torch::Tensor& x_w, int64_t first_index = 0,
                         ControlMode mode = {});

// Controlled regeneration from the noised latent of x_w at t_star.
torch::Tensor ctrl_regen_plus(const ControlledPipeline& p, const torch::Tensor& x_w, int t_star,
                              int64_t first_index = 0, ControlMode mode = {});

// Controlled reverse loop from z at t_start down to 0, conditioned on x_w.
// Returns the final latent.
torch::Tensor controlled_reverse(const ControlledPipeline& p, const torch::Tensor& z, int t_start,
                                 const torch::Tensor& x_w, ControlMode mode);

} // namespace ctrlregen
