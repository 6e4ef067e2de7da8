// SPDX-License-Identifier: Apache-2.0

#include "ctrlregen/attacks.hpp"

namespace ctrlregen {

void ControlledPipeline::validate(bool need_adapter, bool need_spatial) const {
    if (!codec) throw MissingComponentError("pipeline: codec missing");
    if (!denoiser) throw MissingComponentError("pipeline: denoiser missing");
    if (need_adapter && !adapter) throw MissingComponentError("pipeline: semantic adapter missing");
    if (need_spatial && !spatial) throw MissingComponentError("pipeline: spatial control net missing");
    if (codec->latent_channels() != denoiser->cfg.latent_channels) {
        throw FingerprintError("pipeline: codec latent channels do not match the denoiser");
    }
    if (adapter && adapter->image_k->size() != static_cast<std::size_t>(denoiser->attention_site_count())) {
        throw FingerprintError("pipeline: adapter sites do not match the denoiser");
    }
    if (spatial && (spatial->cfg.fingerprint() != denoiser->cfg.fingerprint() ||
                    spatial->codec_factor != codec->factor())) {
        throw FingerprintError("pipeline: spatial net was built for a different backbone or codec");
    }
    if (full_steps < 1 || batch < 1) throw RangeError("pipeline: full_steps and batch must be positive");
}

torch::Tensor attack_noise(const ControlledPipeline& p, int64_t index, int pass, at::IntArrayRef latent_shape) {
    const auto seed = derive_seed(p.seed + static_cast<std::uint64_t>(index), "attack-noise-" + std::to_string(pass));
    return seeded_normal(latent_shape, seed);
}

namespace {

void check_t_star(const ControlledPipeline& p, int t_star, int lo) {
    if (t_star < lo || t_star > p.schedule.T) {
        throw RangeError("t_star must lie in [" + std::to_string(lo) + ", " + std::to_string(p.schedule.T) +
                         "], got " + std::to_string(t_star));
    }
}

void check_images(const ControlledPipeline& p, const torch::Tensor& x) {
    p.codec->check_image(x);
}

// Stacked per-image noise draws for images first..first+n-1.
torch::Tensor noise_batch(const ControlledPipeline& p, const torch::Tensor& x, int64_t first, int pass) {
    const auto shape = p.codec->latent_shape(x.size(2), x.size(3));
    std::vector<torch::Tensor> eps;
    for (int64_t i = 0; i < x.size(0); ++i) eps.push_back(attack_noise(p, first + i, pass, shape));
    return torch::stack(eps);
}

// Runs `fn(chunk, first_index)` over batches of the pipeline's size.
torch::Tensor chunked(const ControlledPipeline& p, const torch::Tensor& x, int64_t first,
                      const std::function<torch::Tensor(const torch::Tensor&, int64_t)>& fn) {
    std::vector<torch::Tensor> parts;
    for (int64_t i = 0; i < x.size(0); i += p.batch) {
        parts.push_back(fn(x.slice(0, i, std::min(x.size(0), i + p.batch)), first + i));
    }
    return torch::cat(parts, 0);
}

torch::Tensor regen_pass(const ControlledPipeline& p, const torch::Tensor& x, int t_star, int64_t first, int pass) {
    return chunked(p, x, first, [&](const torch::Tensor& b, int64_t f) {
        torch::NoGradGuard ng;
        auto z = p.codec->encode(b);
        if (t_star > 0) {
            z = forward_noise(p.schedule, z, t_star, noise_batch(p, b, f, pass));
            const auto ts = strided_timesteps(p.schedule, t_star, p.full_steps);
            for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
                auto eps = p.denoiser->forward(z, timestep_tensor(ts[i], z.size(0)));
                z = reverse_step(p.schedule, z, eps, ts[i], ts[i + 1]);
            }
        }
        return p.codec->decode(z);
    });
}

} // namespace

torch::Tensor regen(const ControlledPipeline& p, const torch::Tensor& x_w, int t_star, int64_t first_index) {
    p.validate(false, false);
    check_images(p, x_w);
    check_t_star(p, t_star, 0);
    return regen_pass(p, x_w, t_star, first_index, 0);
}

torch::Tensor rinse(const ControlledPipeline& p, const torch::Tensor& x_w, int t_star, int k, int64_t first_index) {
    p.validate(false, false);
    check_images(p, x_w);
    check_t_star(p, t_star, 0);
    if (k < 1) throw RangeError("rinse: k must be at least 1");
    auto x = x_w;
    for (int pass = 0; pass < k; ++pass) x = regen_pass(p, x, t_star, first_index, pass);
    return x;
}

torch::Tensor controlled_reverse(const ControlledPipeline& p, const torch::Tensor& z, int t_start,
                                 const torch::Tensor& x_w, ControlMode mode) {
    torch::NoGradGuard ng;
    const auto n = z.size(0);
    torch::Tensor tokens;
    nn::ImageContext ctx;
    if (mode.semantic) {
        tokens = p.adapter->embed(x_w);
        ctx = p.adapter->image_context(tokens);
    }
    torch::Tensor edges;
    if (mode.spatial) edges = canny_batch(x_w, p.canny);

    auto out = z;
    const auto ts = strided_timesteps(p.schedule, t_start, p.full_steps);
    for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
        const auto t = timestep_tensor(ts[i], n);
        const nn::ImageContext* image = mode.semantic ? &ctx : nullptr;
        torch::Tensor eps;
        if (mode.spatial) {
            const auto residuals = p.spatial->forward(edges, out, t, image);
            eps = p.denoiser->forward(out, t, image, &residuals);
        } else {
            eps = p.denoiser->forward(out, t, image);
        }
        out = reverse_step(p.schedule, out, eps, ts[i], ts[i + 1]);
    }
    return out;
}

torch::Tensor ctrl_regen(const ControlledPipeline& p, const torch::Tensor& x_w, int64_t first_index,
                         ControlMode mode) {
    p.validate(mode.semantic, mode.spatial);
    check_images(p, x_w);
    return chunked(p, x_w, first_index, [&](const torch::Tensor& b, int64_t f) {
        // z_T comes from the seed stream only; x_w enters through the conditions.
        auto z_T = noise_batch(p, b, f, 0);
        return p.codec->decode(controlled_reverse(p, z_T, p.schedule.T, b, mode));
    });
}

torch::Tensor ctrl_regen_plus(const ControlledPipeline& p, const torch::Tensor& x_w, int t_star,
                              int64_t first_index, ControlMode mode) {
    p.validate(mode.semantic, mode.spatial);
    check_images(p, x_w);
    check_t_star(p, t_star, 1);
    return chunked(p, x_w, first_index, [&](const torch::Tensor& b, int64_t f) {
        torch::NoGradGuard ng;
        auto z = forward_noise(p.schedule, p.codec->encode(b), t_star, noise_batch(p, b, f, 0));
        return p.codec->decode(controlled_reverse(p, z, t_star, b, mode));
    });
}

} // namespace ctrlregen
