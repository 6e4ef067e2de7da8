// SPDX-License-Identifier: Apache-2.0

#include "ctrlregen/semantic_control.hpp"

namespace ctrlregen {

namespace F = torch::nn::functional;

nlohmann::json AdapterConfig::to_json() const {
    return {{"n_tokens", n_tokens}, {"hidden", hidden}, {"patch_grid", patch_grid}};
}

AdapterConfig AdapterConfig::from_json(const nlohmann::json& j) {
    AdapterConfig c;
    c.n_tokens = j.value("n_tokens", c.n_tokens);
    c.hidden = j.value("hidden", c.hidden);
    c.patch_grid = j.value("patch_grid", c.patch_grid);
    if (c.n_tokens < 1 || c.hidden < 1 || c.patch_grid < 0) throw RangeError("adapter: invalid config");
    return c;
}

torch::Tensor decoupled_attention(const torch::Tensor& q_in, const torch::Tensor& null_ctx,
                                  const torch::Tensor& image_tokens, const DecoupledAttentionWeights& w) {
    if (q_in.dim() != 3 || null_ctx.dim() != 3) {
        throw ShapeError("decoupled_attention: expected [N,L,C] queries and [N,Lc,d] context");
    }
    if (w.w_q.size(1) != q_in.size(2) || w.w_k.size(1) != null_ctx.size(2) ||
        w.w_k.size(0) != w.w_q.size(0) || w.w_v.size(0) != w.w_q.size(0)) {
        throw ShapeError("decoupled_attention: projection dimensions disagree with inputs");
    }
    auto q = F::linear(q_in, w.w_q);
    auto z = nn::scaled_dot_attention(q, F::linear(null_ctx, w.w_k), F::linear(null_ctx, w.w_v), w.heads);
    if (image_tokens.defined()) {
        if (image_tokens.dim() != 3 || w.w_k_image.size(1) != image_tokens.size(2) ||
            w.w_k_image.size(0) != w.w_q.size(0) || w.w_v_image.size(0) != w.w_q.size(0)) {
            throw ShapeError("decoupled_attention: image projection dimensions disagree with tokens");
        }
        z = z + nn::scaled_dot_attention(q, F::linear(image_tokens, w.w_k_image),
                                         F::linear(image_tokens, w.w_v_image), w.heads);
    }
    return z;
}

SemanticAdapterImpl::SemanticAdapterImpl(const AdapterConfig& c, const AutoencoderConfig& tc,
                                         const std::vector<int>& site_channels, int d)
    : cfg(c), trunk_cfg(tc), d_ctx(d) {
    encoder = register_module("encoder", AutoencoderTrunk(trunk_cfg));
    feature_dim = int64_t{trunk_cfg.feature_channels} * (1 + int64_t{cfg.patch_grid} * cfg.patch_grid);
    fc1 = register_module("fc1", torch::nn::Linear(feature_dim, cfg.hidden));
    fc2 = register_module("fc2", torch::nn::Linear(cfg.hidden, int64_t{cfg.n_tokens} * d_ctx));
    token_norm = register_module("token_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_ctx})));
    for (int ch : site_channels) {
        image_k->push_back(torch::nn::Linear(torch::nn::LinearOptions(d_ctx, ch).bias(false)));
        image_v->push_back(torch::nn::Linear(torch::nn::LinearOptions(d_ctx, ch).bias(false)));
    }
    register_module("image_k", image_k);
    register_module("image_v", image_v);
    nn::set_requires_grad(*encoder, false);
}

torch::Tensor SemanticAdapterImpl::encoder_features(const torch::Tensor& images) {
    if (images.dim() != 4 || images.size(1) != 3 || images.size(2) % trunk_cfg.factor != 0 ||
        images.size(3) % trunk_cfg.factor != 0) {
        throw ShapeError("semantic adapter: expected [N,3,H,W] images at the working resolution, got " +
                         shape_str(images));
    }
    torch::NoGradGuard ng;
    auto f = encoder(images);
    std::vector<torch::Tensor> parts{f.mean({2, 3})};
    if (cfg.patch_grid > 0) {
        parts.push_back(F::adaptive_avg_pool2d(f, F::AdaptiveAvgPool2dFuncOptions({cfg.patch_grid, cfg.patch_grid}))
                            .flatten(1));
    }
    return torch::cat(parts, 1);
}

torch::Tensor SemanticAdapterImpl::project(const torch::Tensor& features) {
    if (features.dim() != 2 || features.size(1) != feature_dim) {
        throw ShapeError("semantic adapter: expected [N," + std::to_string(feature_dim) + "] features, got " +
                         shape_str(features));
    }
    auto h = fc2(F::gelu(fc1(features)));
    return token_norm(h.view({features.size(0), cfg.n_tokens, d_ctx}));
}

torch::Tensor SemanticAdapterImpl::embed(const torch::Tensor& images) {
    return project(encoder_features(images));
}

nn::ImageContext SemanticAdapterImpl::image_context(const torch::Tensor& tokens) {
    if (tokens.dim() != 3 || tokens.size(2) != d_ctx) {
        throw ShapeError("semantic adapter: expected [N,T," + std::to_string(d_ctx) + "] tokens, got " +
                         shape_str(tokens));
    }
    nn::ImageContext ctx;
    for (std::size_t k = 0; k < image_k->size(); ++k) {
        ctx.sites.push_back({image_k[k]->as<torch::nn::Linear>()->forward(tokens),
                             image_v[k]->as<torch::nn::Linear>()->forward(tokens)});
    }
    return ctx;
}

std::vector<torch::Tensor> SemanticAdapterImpl::encoder_parameters() const {
    return encoder->parameters();
}

std::vector<torch::Tensor> SemanticAdapterImpl::projection_parameters() const {
    std::vector<torch::Tensor> p;
    for (const auto* m : {static_cast<const torch::nn::Module*>(fc1.get()),
                          static_cast<const torch::nn::Module*>(fc2.get()),
                          static_cast<const torch::nn::Module*>(token_norm.get())}) {
        auto mp = m->parameters();
        p.insert(p.end(), mp.begin(), mp.end());
    }
    return p;
}

std::vector<torch::Tensor> SemanticAdapterImpl::attention_parameters() const {
    auto p = image_k->parameters();
    auto v = image_v->parameters();
    p.insert(p.end(), v.begin(), v.end());
    return p;
}

namespace {
// Cross-attention modules of the backbone in site order.
std::vector<nn::CrossAttention> cross_attention_sites(const DenoiserImpl& d) {
    std::vector<nn::CrossAttention> sites;
    for (const auto& m : *d.encoder->attn_blocks) sites.push_back(m->as<nn::TransformerBlock>()->cross_attn);
    sites.push_back(d.encoder->mid_attn->cross_attn);
    for (const auto& m : *d.up_attn) sites.push_back(m->as<nn::TransformerBlock>()->cross_attn);
    return sites;
}
} // namespace

void SemanticAdapterImpl::init_from_backbone(const DenoiserImpl& backbone) {
    torch::NoGradGuard ng;
    const auto sites = cross_attention_sites(backbone);
    if (sites.size() != image_k->size()) throw ShapeError("semantic adapter: site count mismatch with backbone");
    for (std::size_t k = 0; k < sites.size(); ++k) {
        image_k[k]->as<torch::nn::Linear>()->weight.copy_(sites[k]->to_k->weight);
        image_v[k]->as<torch::nn::Linear>()->weight.copy_(sites[k]->to_v->weight);
    }
}

void SemanticAdapterImpl::load_encoder(const AutoencoderTrunkImpl& trunk) {
    nn::copy_state(trunk, *encoder);
    nn::set_requires_grad(*encoder, false);
}

SemanticAdapter make_semantic_adapter(const AdapterConfig& cfg, const AutoencoderConfig& trunk_cfg,
                                      const AutoencoderTrunkImpl& trunk, const DenoiserImpl& backbone,
                                      std::uint64_t seed) {
    torch::manual_seed(seed);
    SemanticAdapter a(cfg, trunk_cfg, backbone.attention_site_channels(), backbone.cfg.d_ctx);
    a->load_encoder(trunk);
    a->init_from_backbone(backbone);
    return a;
}

DecoupledAttentionWeights site_attention_weights(DenoiserImpl& backbone, SemanticAdapterImpl& adapter, int site) {
    const auto sites = cross_attention_sites(backbone);
    const auto& ca = sites.at(static_cast<std::size_t>(site));
    return {ca->to_q->weight, ca->to_k->weight, ca->to_v->weight,
            adapter.image_k[static_cast<std::size_t>(site)]->as<torch::nn::Linear>()->weight,
            adapter.image_v[static_cast<std::size_t>(site)]->as<torch::nn::Linear>()->weight, ca->heads};
}

torch::Tensor predict_noise(DenoiserImpl& denoiser, const torch::Tensor& z_t, const torch::Tensor& t,
                            SemanticAdapterImpl* adapter, const torch::Tensor& image_tokens,
                            const ControlResiduals* residuals) {
    if (adapter != nullptr && image_tokens.defined()) {
        const auto ctx = adapter->image_context(image_tokens);
        return denoiser.forward(z_t, t, &ctx, residuals);
    }
    return denoiser.forward(z_t, t, nullptr, residuals);
}

torch::Tensor semantic_loss(DenoiserImpl& denoiser, SemanticAdapterImpl& adapter, const torch::Tensor& z0,
                            const torch::Tensor& features, const torch::Tensor& t, const torch::Tensor& eps,
                            const NoiseSchedule& s) {
    auto z_t = forward_noise_batch(s, z0, t, eps);
    auto tokens = adapter.project(features);
    return F::mse_loss(predict_noise(denoiser, z_t, t, &adapter, tokens), eps);
}

SemanticTrainResult train_semantic_adapter(const torch::Tensor& train_images, const torch::Tensor& val_images,
                                           Denoiser& denoiser, SemanticAdapter adapter,
                                           const LatentCodec& codec, const NoiseSchedule& s,
                                           const TrainConfig& cfg, const ProgressFn& progress) {
    if (train_images.size(0) == 0) throw DataError("train_semantic_adapter: empty corpus");
    nn::set_requires_grad(*denoiser, false);
    nn::set_requires_grad(*adapter->encoder, false);

    auto encode_all = [&](const torch::Tensor& imgs) {
        return std::pair{map_batched(imgs, 64, [&](const torch::Tensor& b) { return codec.encode(b); }),
                         map_batched(imgs, 64, [&](const torch::Tensor& b) { return adapter->encoder_features(b); })};
    };
    auto [latents, feats] = encode_all(train_images);
    auto val_src = val_images.size(0) > 0 ? val_images : train_images;
    const int64_t n_val = std::min<int64_t>(val_src.size(0), int64_t{cfg.val_batches} * cfg.batch_size);
    auto [val_latents, val_feats] = encode_all(val_src.slice(0, 0, n_val));
    const auto val_draw = fixed_noise_draw(val_latents, s.T, derive_seed(cfg.seed, "semantic-val"));

    BatchSampler sampler(latents.size(0), derive_seed(cfg.seed, "semantic-batches"));
    auto gen = make_generator(derive_seed(cfg.seed, "semantic-noise"));
    auto loss_fn = [&](int) {
        auto idx = sampler.next(cfg.batch_size);
        auto z0 = latents.index_select(0, idx);
        auto t = sample_timesteps(z0.size(0), s.T, gen);
        auto eps = torch::randn(z0.sizes(), gen);
        return semantic_loss(*denoiser, *adapter, z0, feats.index_select(0, idx), t, eps, s);
    };
    auto val_loss = [&]() {
        torch::NoGradGuard ng;
        double total = 0.0;
        for (int64_t i = 0; i < val_latents.size(0); i += cfg.batch_size) {
            const auto j = std::min(val_latents.size(0), i + cfg.batch_size);
            total += semantic_loss(*denoiser, *adapter, val_latents.slice(0, i, j), val_feats.slice(0, i, j),
                                   val_draw.t.slice(0, i, j), val_draw.eps.slice(0, i, j), s)
                         .item<double>() * static_cast<double>(j - i);
        }
        return total / static_cast<double>(val_latents.size(0));
    };

    auto trainable = adapter->projection_parameters();
    auto attn = adapter->attention_parameters();
    trainable.insert(trainable.end(), attn.begin(), attn.end());
    auto frozen = nn::parameter_list(*denoiser);
    auto enc = adapter->encoder_parameters();
    frozen.insert(frozen.end(), enc.begin(), enc.end());

    SemanticTrainResult r;
    r.report = run_training("train-semantic", trainable, cfg, loss_fn, val_loss, frozen, progress);
    r.adapter = adapter;
    return r;
}

} // namespace ctrlregen
