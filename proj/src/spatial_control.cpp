// SPDX-License-Identifier: Apache-2.0

#include "ctrlregen/spatial_control.hpp"

#include "ctrlregen/edges.hpp"

#include <bit>

namespace ctrlregen {

namespace F = torch::nn::functional;

SpatialControlNetImpl::SpatialControlNetImpl(const DenoiserImpl& backbone, int factor)
    : cfg(backbone.cfg), codec_factor(factor) {
    if (factor < 1 || !std::has_single_bit(static_cast<unsigned>(factor)) || factor > 8) {
        throw RangeError("spatial net: codec factor must be 1, 2, 4 or 8");
    }
    time_embed = register_module("time_embed", nn::TimeEmbedding(cfg.widths[0], backbone.temb_dim));
    null_ctx = register_parameter("null_ctx", backbone.null_ctx.detach().clone());
    encoder = register_module("encoder", UNetEncoder(cfg, backbone.temb_dim));

    // Strided layers first so the 3x3 stack sees the latent grid last.
    int strides = std::countr_zero(static_cast<unsigned>(factor));
    const int chans[] = {1, 16, 32, 32};
    edge_encoder = torch::nn::Sequential();
    for (int i = 0; i < 3; ++i) {
        const int stride = strides-- > 0 ? 2 : 1;
        edge_encoder->push_back(torch::nn::Conv2d(
            torch::nn::Conv2dOptions(chans[i], chans[i + 1], 3).stride(stride).padding(1)));
        edge_encoder->push_back(torch::nn::SiLU());
    }
    register_module("edge_encoder", edge_encoder);
    edge_out = register_module("edge_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(32, cfg.widths[0], 3).padding(1)));

    for (const auto& shape : backbone.decoder_slot_shapes(16, 16)) {
        zero_convs->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(shape[0], shape[0], 1)));
    }
    register_module("zero_convs", zero_convs);
    init_from_backbone(backbone);
}

void SpatialControlNetImpl::init_from_backbone(const DenoiserImpl& backbone) {
    nn::copy_state(*backbone.time_embed, *time_embed);
    nn::copy_state(*backbone.encoder, *encoder);
    {
        torch::NoGradGuard ng;
        null_ctx.copy_(backbone.null_ctx);
    }
    nn::zero_module(*edge_out);
    nn::zero_module(*zero_convs);
}

torch::Tensor SpatialControlNetImpl::edge_features(const torch::Tensor& edge) {
    return edge_out(edge_encoder->forward(edge));
}

ControlResiduals SpatialControlNetImpl::forward(const torch::Tensor& edge, const torch::Tensor& z_t,
                                                const torch::Tensor& t, const nn::ImageContext* image) {
    if (z_t.dim() != 4 || z_t.size(1) != cfg.latent_channels) {
        throw ShapeError("spatial net: expected [N," + std::to_string(cfg.latent_channels) + ",h,w] latent, got " +
                         shape_str(z_t));
    }
    if (edge.dim() != 4 || edge.size(0) != z_t.size(0) || edge.size(1) != 1 ||
        edge.size(2) != z_t.size(2) * codec_factor || edge.size(3) != z_t.size(3) * codec_factor) {
        throw ShapeError("spatial net: edge map " + shape_str(edge) + " does not match latent " + shape_str(z_t) +
                         " at factor " + std::to_string(codec_factor));
    }
    const auto n = z_t.size(0);
    auto temb = time_embed(t);
    auto ctx = null_ctx.unsqueeze(0).expand({n, 1, cfg.d_ctx});
    auto hint = edge_features(edge.to(z_t.dtype()));
    auto enc = encoder(z_t, temb, ctx, image, hint);

    ControlResiduals r;
    r.slots.push_back(zero_convs[0]->as<torch::nn::Conv2d>()->forward(enc.mid));
    const auto levels = enc.skips.size();
    for (std::size_t j = 0; j < levels; ++j) {
        r.slots.push_back(zero_convs[j + 1]->as<torch::nn::Conv2d>()->forward(enc.skips[levels - 1 - j]));
    }
    return r;
}

SpatialControlNet make_spatial_net(const DenoiserImpl& backbone, int codec_factor, std::uint64_t seed) {
    torch::manual_seed(seed);
    return SpatialControlNet(backbone, codec_factor);
}

torch::Tensor spatial_loss(DenoiserImpl& denoiser, SemanticAdapterImpl& adapter, SpatialControlNetImpl& net,
                           const torch::Tensor& z0, const torch::Tensor& tokens, const torch::Tensor& edges,
                           const torch::Tensor& t, const torch::Tensor& eps, const NoiseSchedule& s) {
    auto z_t = forward_noise_batch(s, z0, t, eps);
    const auto ctx = adapter.image_context(tokens);
    const auto residuals = net.forward(edges, z_t, t, &ctx);
    return F::mse_loss(denoiser.forward(z_t, t, &ctx, &residuals), eps);
}

SpatialTrainResult train_spatial_net(const torch::Tensor& train_images, const torch::Tensor& val_images,
                                     Denoiser& denoiser, SemanticAdapter& adapter, SpatialControlNet net,
                                     const LatentCodec& codec, const NoiseSchedule& s, const TrainConfig& cfg,
                                     const ProgressFn& progress) {
    if (train_images.size(0) == 0) throw DataError("train_spatial_net: empty corpus");
    nn::set_requires_grad(*denoiser, false);
    nn::set_requires_grad(*adapter, false);

    struct Cache {
        torch::Tensor latents, tokens, edges;
    };
    auto prepare = [&](const torch::Tensor& imgs) {
        torch::NoGradGuard ng;
        return Cache{map_batched(imgs, 64, [&](const torch::Tensor& b) { return codec.encode(b); }),
                     map_batched(imgs, 64, [&](const torch::Tensor& b) { return adapter->embed(b); }),
                     canny_batch(imgs)};
    };
    const auto train = prepare(train_images);
    auto val_src = val_images.size(0) > 0 ? val_images : train_images;
    const int64_t n_val = std::min<int64_t>(val_src.size(0), int64_t{cfg.val_batches} * cfg.batch_size);
    const auto val = prepare(val_src.slice(0, 0, n_val));
    const auto val_draw = fixed_noise_draw(val.latents, s.T, derive_seed(cfg.seed, "spatial-val"));

    BatchSampler sampler(train.latents.size(0), derive_seed(cfg.seed, "spatial-batches"));
    auto gen = make_generator(derive_seed(cfg.seed, "spatial-noise"));
    auto loss_fn = [&](int) {
        auto idx = sampler.next(cfg.batch_size);
        auto z0 = train.latents.index_select(0, idx);
        auto t = sample_timesteps(z0.size(0), s.T, gen);
        auto eps = torch::randn(z0.sizes(), gen);
        return spatial_loss(*denoiser, *adapter, *net, z0, train.tokens.index_select(0, idx),
                            train.edges.index_select(0, idx), t, eps, s);
    };
    auto batched_val = [&](const std::function<torch::Tensor(int64_t, int64_t)>& loss) {
        torch::NoGradGuard ng;
        double total = 0.0;
        for (int64_t i = 0; i < val.latents.size(0); i += cfg.batch_size) {
            const auto j = std::min(val.latents.size(0), i + cfg.batch_size);
            total += loss(i, j).item<double>() * static_cast<double>(j - i);
        }
        return total / static_cast<double>(val.latents.size(0));
    };
    auto val_loss = [&]() {
        return batched_val([&](int64_t i, int64_t j) {
            return spatial_loss(*denoiser, *adapter, *net, val.latents.slice(0, i, j), val.tokens.slice(0, i, j),
                                val.edges.slice(0, i, j), val_draw.t.slice(0, i, j), val_draw.eps.slice(0, i, j), s);
        });
    };

    SpatialTrainResult r;
    r.semantic_only_val_loss = batched_val([&](int64_t i, int64_t j) {
        auto t = val_draw.t.slice(0, i, j);
        auto eps = val_draw.eps.slice(0, i, j);
        auto z_t = forward_noise_batch(s, val.latents.slice(0, i, j), t, eps);
        return F::mse_loss(predict_noise(*denoiser, z_t, t, adapter.get(), val.tokens.slice(0, i, j)), eps);
    });

    auto frozen = nn::parameter_list(*denoiser);
    auto a = nn::parameter_list(*adapter);
    frozen.insert(frozen.end(), a.begin(), a.end());
    r.report = run_training("train-spatial", nn::parameter_list(*net), cfg, loss_fn, val_loss, frozen, progress);
    r.net = net;
    return r;
}

} // namespace ctrlregen
