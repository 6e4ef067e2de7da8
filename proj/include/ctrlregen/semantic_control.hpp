// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ctrlregen/codec.hpp"
#include "ctrlregen/denoiser.hpp"
#include "ctrlregen/schedule.hpp"
#include "ctrlregen/training.hpp"

#include <json.hpp>

#include <memory>
#include <optional>

namespace ctrlregen {

struct AdapterConfig {
    int n_tokens = 4;
    int hidden = 256;
    int patch_grid = 2; // patch features pooled on a grid x grid layout

    nlohmann::json to_json() const;
    static AdapterConfig from_json(const nlohmann::json& j);
};

// Raw weight matrices ([out, in], torch Linear layout) for one decoupled
// attention evaluation.
struct DecoupledAttentionWeights {
    torch::Tensor w_q, w_k, w_v;         // shared query and null-context branch
    torch::Tensor w_k_image, w_v_image;  // image branch
    int heads = 1;
};

// Z = Attn(Q, K, V) + Attn(Q, K', V') with Q = q_in W_Q^T, K/V from the null
// context and K'/V' from the image tokens. An undefined `image_tokens` drops
// the image branch. q_in: [N,L,C], null_ctx: [N,Lc,d], image_tokens: [N,T,d].
torch::Tensor decoupled_attention(const torch::Tensor& q_in, const torch::Tensor& null_ctx,
                                  const torch::Tensor& image_tokens,
                                  const DecoupledAttentionWeights& w);

// Frozen image encoder (theta_e), trainable projection network (theta_p) and
// per-site image key/value projections (theta_a).
struct SemanticAdapterImpl : torch::nn::Module {
    SemanticAdapterImpl(const AdapterConfig& cfg, const AutoencoderConfig& trunk_cfg,
                        const std::vector<int>& site_channels, int d_ctx);

    // Frozen encoder features: global pool + grid-pooled patches, flattened.
    torch::Tensor encoder_features(const torch::Tensor& images);
    // Tokens [N, n_tokens, d_ctx] from encoder features.
    torch::Tensor project(const torch::Tensor& features);
    // phi(x): images -> tokens.
    torch::Tensor embed(const torch::Tensor& images);
    nn::ImageContext image_context(const torch::Tensor& tokens);

    std::vector<torch::Tensor> encoder_parameters() const;
    std::vector<torch::Tensor> projection_parameters() const;
    std::vector<torch::Tensor> attention_parameters() const;

    // Seeds the image key/value projections from the backbone's null-context
    // key/value projections at each site.
    void init_from_backbone(const DenoiserImpl& backbone);
    // Copies the codec trunk into the (frozen) image encoder.
    void load_encoder(const AutoencoderTrunkImpl& trunk);

    AdapterConfig cfg;
    AutoencoderConfig trunk_cfg;
    int d_ctx;
    int64_t feature_dim;
    AutoencoderTrunk encoder{nullptr};
    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
    torch::nn::LayerNorm token_norm{nullptr};
    torch::nn::ModuleList image_k, image_v;
};
TORCH_MODULE(SemanticAdapter);

// Builds an adapter matched to `backbone`, with encoder copied from `trunk`
// and image projections seeded from the backbone. Encoder is frozen.
SemanticAdapter make_semantic_adapter(const AdapterConfig& cfg, const AutoencoderConfig& trunk_cfg,
                                      const AutoencoderTrunkImpl& trunk, const DenoiserImpl& backbone,
                                      std::uint64_t seed);

// Weights of one attention site, for evaluating decoupled_attention directly.
DecoupledAttentionWeights site_attention_weights(DenoiserImpl& backbone, SemanticAdapterImpl& adapter,
                                                 int site);

// eps_theta(z_t, phi(x), t, residuals). Either conditioning may be absent.
torch::Tensor predict_noise(DenoiserImpl& denoiser, const torch::Tensor& z_t, const torch::Tensor& t,
                            SemanticAdapterImpl* adapter, const torch::Tensor& image_tokens,
                            const ControlResiduals* residuals = nullptr);

struct SemanticTrainResult {
    SemanticAdapter adapter{nullptr};
    TrainReport report;
};

// Conditional epsilon-prediction loss on a fixed batch; shared by the trainer
// and the gradient checks.
torch::Tensor semantic_loss(DenoiserImpl& denoiser, SemanticAdapterImpl& adapter,
                            const torch::Tensor& z0, const torch::Tensor& features,
                            const torch::Tensor& t, const torch::Tensor& eps,
                            const NoiseSchedule& s);

// Trains theta_p and theta_a with theta_d and theta_e frozen. Training images
// are clean; the latents come from `codec`.
SemanticTrainResult train_semantic_adapter(const torch::Tensor& train_images, const torch::Tensor& val_images,
                                           Denoiser& denoiser, SemanticAdapter adapter,
                                           const LatentCodec& codec, const NoiseSchedule& s,
                                           const TrainConfig& cfg, const ProgressFn& progress = {});

} // namespace ctrlregen
