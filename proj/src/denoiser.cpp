// SPDX-License-Identifier: Apache-2.0

#include "ctrlregen/denoiser.hpp"

#include <sstream>

namespace ctrlregen {

namespace F = torch::nn::functional;

nlohmann::json UNetConfig::to_json() const {
    return {{"latent_channels", latent_channels}, {"widths", widths}, {"attention", attention},
            {"d_ctx", d_ctx}, {"heads", heads}, {"groups", groups}};
}

UNetConfig UNetConfig::from_json(const nlohmann::json& j) {
    UNetConfig c;
    c.latent_channels = j.value("latent_channels", c.latent_channels);
    c.widths = j.value("widths", c.widths);
    c.attention = j.value("attention", c.attention);
    c.d_ctx = j.value("d_ctx", c.d_ctx);
    c.heads = j.value("heads", c.heads);
    c.groups = j.value("groups", c.groups);
    c.validate();
    return c;
}

std::string UNetConfig::fingerprint() const { return hex64(checksum_bytes(to_json().dump())); }

void UNetConfig::validate() const {
    if (widths.empty() || widths.size() != attention.size()) {
        throw RangeError("unet: widths and attention flags must be nonempty and equally long");
    }
    for (int w : widths) {
        if (w % groups != 0 || w % heads != 0) {
            throw RangeError("unet: every width must be divisible by groups and heads");
        }
    }
}

UNetEncoderImpl::UNetEncoderImpl(const UNetConfig& c, int temb_dim) : cfg(c) {
    cfg.validate();
    conv_in = register_module("conv_in", torch::nn::Conv2d(
        torch::nn::Conv2dOptions(cfg.latent_channels, cfg.widths[0], 3).padding(1)));
    int prev = cfg.widths[0];
    const auto levels = cfg.widths.size();
    for (std::size_t i = 0; i < levels; ++i) {
        const int w = cfg.widths[i];
        res_blocks->push_back(nn::ResBlock(prev, w, temb_dim, cfg.groups));
        if (cfg.attention[i]) {
            attn_index.push_back(static_cast<int>(attn_blocks->size()));
            attn_blocks->push_back(nn::TransformerBlock(w, cfg.d_ctx, cfg.heads, cfg.groups));
        } else {
            attn_index.push_back(-1);
        }
        if (i + 1 < levels) {
            downsamplers->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(w, w, 3).stride(2).padding(1)));
        }
        prev = w;
    }
    register_module("res_blocks", res_blocks);
    register_module("attn_blocks", attn_blocks);
    register_module("downsamplers", downsamplers);
    mid_res1 = register_module("mid_res1", nn::ResBlock(prev, prev, temb_dim, cfg.groups));
    mid_attn = register_module("mid_attn", nn::TransformerBlock(prev, cfg.d_ctx, cfg.heads, cfg.groups));
    mid_res2 = register_module("mid_res2", nn::ResBlock(prev, prev, temb_dim, cfg.groups));
}

int UNetEncoderImpl::attention_site_count() const { return static_cast<int>(attn_blocks->size()) + 1; }

std::vector<int> UNetEncoderImpl::attention_site_channels() const {
    std::vector<int> ch;
    for (std::size_t i = 0; i < cfg.widths.size(); ++i)
        if (cfg.attention[i]) ch.push_back(cfg.widths[i]);
    ch.push_back(cfg.widths.back());
    return ch;
}

EncoderOutputs UNetEncoderImpl::forward(const torch::Tensor& z, const torch::Tensor& temb,
                                        const torch::Tensor& ctx, const nn::ImageContext* image,
                                        const torch::Tensor& hint) {
    auto site = [&](int k) -> const nn::ImageKV* {
        return image ? &image->sites.at(static_cast<std::size_t>(k)) : nullptr;
    };
    EncoderOutputs out;
    auto h = conv_in(z);
    if (hint.defined()) h = h + hint;
    int k = 0;
    const auto levels = cfg.widths.size();
    for (std::size_t i = 0; i < levels; ++i) {
        h = res_blocks[i]->as<nn::ResBlock>()->forward(h, temb);
        if (attn_index[i] >= 0) {
            h = attn_blocks[static_cast<std::size_t>(attn_index[i])]->as<nn::TransformerBlock>()->forward(h, ctx, site(k++));
        }
        out.skips.push_back(h);
        if (i + 1 < levels) h = downsamplers[i]->as<torch::nn::Conv2d>()->forward(h);
    }
    h = mid_res1(h, temb);
    h = mid_attn(h, ctx, site(k++));
    out.mid = mid_res2(h, temb);
    return out;
}

DenoiserImpl::DenoiserImpl(UNetConfig c) : cfg(std::move(c)) {
    cfg.validate();
    temb_dim = 4 * cfg.widths[0];
    time_embed = register_module("time_embed", nn::TimeEmbedding(cfg.widths[0], temb_dim));
    null_ctx = register_parameter("null_ctx", torch::randn({1, cfg.d_ctx}) * 0.02);
    encoder = register_module("encoder", UNetEncoder(cfg, temb_dim));
    const int levels = static_cast<int>(cfg.widths.size());
    int prev = cfg.widths.back();
    for (int i = levels - 1; i >= 0; --i) {
        const int w = cfg.widths[static_cast<std::size_t>(i)];
        up_res->push_back(nn::ResBlock(prev + w, w, temb_dim, cfg.groups));
        if (cfg.attention[static_cast<std::size_t>(i)]) {
            up_attn_index.push_back(static_cast<int>(up_attn->size()));
            up_attn->push_back(nn::TransformerBlock(w, cfg.d_ctx, cfg.heads, cfg.groups));
        } else {
            up_attn_index.push_back(-1);
        }
        if (i > 0) {
            upsamplers->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(w, w, 3).padding(1)));
        }
        prev = w;
    }
    register_module("up_res", up_res);
    register_module("up_attn", up_attn);
    register_module("upsamplers", upsamplers);
    out_norm = register_module("out_norm", torch::nn::GroupNorm(cfg.groups, cfg.widths[0]));
    out_conv = register_module("out_conv", torch::nn::Conv2d(
        torch::nn::Conv2dOptions(cfg.widths[0], cfg.latent_channels, 3).padding(1)));
}

torch::Tensor DenoiserImpl::null_context(int64_t batch) const {
    return null_ctx.unsqueeze(0).expand({batch, 1, cfg.d_ctx});
}

int DenoiserImpl::attention_site_count() const {
    return encoder->attention_site_count() + static_cast<int>(up_attn->size());
}

std::vector<int> DenoiserImpl::attention_site_channels() const {
    auto ch = encoder->attention_site_channels();
    for (int i = static_cast<int>(cfg.widths.size()) - 1; i >= 0; --i)
        if (cfg.attention[static_cast<std::size_t>(i)]) ch.push_back(cfg.widths[static_cast<std::size_t>(i)]);
    return ch;
}

std::vector<std::vector<int64_t>> DenoiserImpl::decoder_slot_shapes(int64_t h, int64_t w) const {
    const auto levels = cfg.widths.size();
    std::vector<std::vector<int64_t>> shapes;
    const int64_t scale = int64_t{1} << (levels - 1);
    shapes.push_back({cfg.widths.back(), h / scale, w / scale});
    for (int i = static_cast<int>(levels) - 1; i >= 0; --i) {
        const int64_t s = int64_t{1} << i;
        shapes.push_back({cfg.widths[static_cast<std::size_t>(i)], h / s, w / s});
    }
    return shapes;
}

torch::Tensor DenoiserImpl::forward(const torch::Tensor& z_t, const torch::Tensor& t,
                                    const nn::ImageContext* image, const ControlResiduals* residuals,
                                    std::vector<torch::Tensor>* taps) {
    if (z_t.dim() != 4 || z_t.size(1) != cfg.latent_channels) {
        throw ShapeError("denoiser: expected [N," + std::to_string(cfg.latent_channels) +
                         ",h,w] latent, got " + shape_str(z_t));
    }
    const auto levels = cfg.widths.size();
    const int64_t scale = int64_t{1} << (levels - 1);
    if (z_t.size(2) % scale != 0 || z_t.size(3) % scale != 0) {
        throw ShapeError("denoiser: latent spatial size must be divisible by " + std::to_string(scale));
    }
    if (t.dim() != 1 || t.size(0) != z_t.size(0)) {
        throw ShapeError("denoiser: expected one timestep per batch element");
    }
    if (image != nullptr && static_cast<int>(image->sites.size()) != attention_site_count()) {
        throw ShapeError("denoiser: image context has " + std::to_string(image->sites.size()) +
                         " sites, expected " + std::to_string(attention_site_count()));
    }
    const auto n = z_t.size(0);
    auto temb = time_embed(t);
    auto ctx = null_context(n);
    auto enc = encoder(z_t, temb, ctx, image);

    std::vector<torch::Tensor> slots;
    slots.push_back(enc.mid);
    for (int i = static_cast<int>(levels) - 1; i >= 0; --i) slots.push_back(enc.skips[static_cast<std::size_t>(i)]);

    if (residuals != nullptr) {
        if (static_cast<int>(residuals->slots.size()) != decoder_slot_count()) {
            throw ShapeError("denoiser: got " + std::to_string(residuals->slots.size()) +
                             " residual slots, expected " + std::to_string(decoder_slot_count()));
        }
        for (std::size_t k = 0; k < slots.size(); ++k) {
            if (residuals->slots[k].sizes() != slots[k].sizes()) {
                throw ShapeError("denoiser: residual slot " + std::to_string(k) + " has shape " +
                                 shape_str(residuals->slots[k]) + ", expected " + shape_str(slots[k]));
            }
            slots[k] = slots[k] + residuals->slots[k];
        }
    }
    if (taps != nullptr) *taps = slots;

    int site = encoder->attention_site_count();
    auto h = slots[0];
    for (std::size_t j = 0; j < levels; ++j) {
        h = torch::cat({h, slots[j + 1]}, 1);
        h = up_res[j]->as<nn::ResBlock>()->forward(h, temb);
        if (up_attn_index[j] >= 0) {
            const nn::ImageKV* kv = image ? &image->sites.at(static_cast<std::size_t>(site)) : nullptr;
            h = up_attn[static_cast<std::size_t>(up_attn_index[j])]->as<nn::TransformerBlock>()->forward(h, ctx, kv);
            ++site;
        }
        if (j + 1 < levels) {
            h = F::interpolate(h, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0})
                                      .mode(torch::kNearest));
            h = upsamplers[j]->as<torch::nn::Conv2d>()->forward(h);
        }
    }
    return out_conv(torch::silu(out_norm(h)));
}

torch::Tensor timestep_tensor(int t, int64_t batch) {
    return torch::full({batch}, t, torch::kLong);
}

NoiseDraw fixed_noise_draw(const torch::Tensor& z0, int T, std::uint64_t seed) {
    auto gen = make_generator(seed);
    NoiseDraw d;
    d.t = sample_timesteps(z0.size(0), T, gen);
    d.eps = torch::randn(z0.sizes(), gen, torch::TensorOptions().dtype(z0.dtype()));
    return d;
}

torch::Tensor backbone_loss(DenoiserImpl& denoiser, const torch::Tensor& z0, const torch::Tensor& t,
                            const torch::Tensor& eps, const NoiseSchedule& s) {
    auto z_t = forward_noise_batch(s, z0, t, eps);
    return F::mse_loss(denoiser.forward(z_t, t), eps);
}

BackboneTrainResult train_backbone(const torch::Tensor& train_images, const torch::Tensor& val_images,
                                   const LatentCodec& codec, const NoiseSchedule& s,
                                   const UNetConfig& unet, const TrainConfig& cfg,
                                   const ProgressFn& progress) {
    if (train_images.size(0) == 0) throw DataError("train_backbone: empty corpus");
    torch::manual_seed(derive_seed(cfg.seed, "backbone-init"));
    Denoiser net(unet);
    auto latents = map_batched(train_images, 64, [&](const torch::Tensor& b) { return codec.encode(b); });
    auto val_src = val_images.size(0) > 0 ? val_images : train_images;
    const int64_t n_val = std::min<int64_t>(val_src.size(0), int64_t{cfg.val_batches} * cfg.batch_size);
    auto val_latents = map_batched(val_src.slice(0, 0, n_val), 64, [&](const torch::Tensor& b) { return codec.encode(b); });
    const auto val_draw = fixed_noise_draw(val_latents, s.T, derive_seed(cfg.seed, "backbone-val"));

    BatchSampler sampler(latents.size(0), derive_seed(cfg.seed, "backbone-batches"));
    auto gen = make_generator(derive_seed(cfg.seed, "backbone-noise"));
    auto loss_fn = [&](int) {
        auto z0 = latents.index_select(0, sampler.next(cfg.batch_size));
        auto t = sample_timesteps(z0.size(0), s.T, gen);
        auto eps = torch::randn(z0.sizes(), gen);
        return backbone_loss(*net, z0, t, eps, s);
    };
    auto val_loss = [&]() {
        torch::NoGradGuard ng;
        double total = 0.0;
        int64_t count = 0;
        for (int64_t i = 0; i < val_latents.size(0); i += cfg.batch_size) {
            const auto j = std::min(val_latents.size(0), i + cfg.batch_size);
            total += backbone_loss(*net, val_latents.slice(0, i, j), val_draw.t.slice(0, i, j),
                                   val_draw.eps.slice(0, i, j), s).item<double>() * static_cast<double>(j - i);
            count += j - i;
        }
        return total / static_cast<double>(count);
    };
    BackboneTrainResult r;
    r.report = run_training("train-backbone", nn::parameter_list(*net), cfg, loss_fn, val_loss, {}, progress);
    r.denoiser = net;
    return r;
}

std::string module_fingerprint(const torch::nn::Module& m) {
    auto tensors = m.parameters(true);
    for (const auto& b : m.buffers(true)) tensors.push_back(b);
    return hex64(checksum(tensors));
}

} // namespace ctrlregen
