// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ctrlregen/codec.hpp"
#include "ctrlregen/nn.hpp"
#include "ctrlregen/schedule.hpp"
#include "ctrlregen/training.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace ctrlregen {

struct UNetConfig {
    int latent_channels = 4;
    std::vector<int> widths{64, 128, 256};
    std::vector<bool> attention{false, true, true}; // per resolution level
    int d_ctx = 64;
    int heads = 4;
    int groups = 8;

    nlohmann::json to_json() const;
    static UNetConfig from_json(const nlohmann::json& j);
    std::string fingerprint() const;
    void validate() const;
};

// Additive tensors for the decoder slots: slot 0 is the mid-block output that
// enters the decoder, slots 1..L are the skip tensors consumed by decoder
// levels L-1..0.
struct ControlResiduals {
    std::vector<torch::Tensor> slots;
};

struct EncoderOutputs {
    std::vector<torch::Tensor> skips; // per level, highest resolution first
    torch::Tensor mid;
};

// conv_in + down path + mid block. Shared by the backbone and the spatial
// control network's trainable clone.
struct UNetEncoderImpl : torch::nn::Module {
    UNetEncoderImpl(const UNetConfig& cfg, int temb_dim);

    // `hint` (optional) is added right after conv_in. Image keys/values are
    // read from `image->sites[site_offset + k]` for the k-th encoder site.
    EncoderOutputs forward(const torch::Tensor& z, const torch::Tensor& temb, const torch::Tensor& ctx,
                           const nn::ImageContext* image, const torch::Tensor& hint = {});

    int attention_site_count() const;
    std::vector<int> attention_site_channels() const;

    UNetConfig cfg;
    torch::nn::Conv2d conv_in{nullptr};
    torch::nn::ModuleList res_blocks, attn_blocks, downsamplers;
    std::vector<int> attn_index; // per level, index into attn_blocks or -1
    nn::ResBlock mid_res1{nullptr}, mid_res2{nullptr};
    nn::TransformerBlock mid_attn{nullptr};
};
TORCH_MODULE(UNetEncoder);

// Toy U-Net noise predictor with declared hook points: a decoupled
// cross-attention slot at every attention site and an additive residual slot
// per decoder input.
struct DenoiserImpl : torch::nn::Module {
    explicit DenoiserImpl(UNetConfig cfg);

    // Predicted noise, same shape as z_t. `t` holds one integer timestep per
    // batch element. `taps`, when given, receives the decoder-slot tensors
    // after residual injection.
    torch::Tensor forward(const torch::Tensor& z_t, const torch::Tensor& t,
                          const nn::ImageContext* image = nullptr,
                          const ControlResiduals* residuals = nullptr,
                          std::vector<torch::Tensor>* taps = nullptr);

    torch::Tensor null_context(int64_t batch) const;
    int decoder_slot_count() const { return static_cast<int>(cfg.widths.size()) + 1; }
    // Expected [C,h,w] of each decoder slot for a latent of spatial size h x w.
    std::vector<std::vector<int64_t>> decoder_slot_shapes(int64_t h, int64_t w) const;
    int attention_site_count() const;
    std::vector<int> attention_site_channels() const;
    int encoder_attention_sites() const { return encoder->attention_site_count(); }

    UNetConfig cfg;
    int temb_dim;
    nn::TimeEmbedding time_embed{nullptr};
    torch::Tensor null_ctx; // [1, d_ctx], the empty-prompt token
    UNetEncoder encoder{nullptr};
    torch::nn::ModuleList up_res, up_attn, upsamplers;
    std::vector<int> up_attn_index;
    torch::nn::GroupNorm out_norm{nullptr};
    torch::nn::Conv2d out_conv{nullptr};
};
TORCH_MODULE(Denoiser);

// Integer timesteps as the [N] tensor expected by the denoiser.
torch::Tensor timestep_tensor(int t, int64_t batch);

// Fixed (t, eps) draws for reproducible loss evaluation on a latent batch.
struct NoiseDraw {
    torch::Tensor t;
    torch::Tensor eps;
};
NoiseDraw fixed_noise_draw(const torch::Tensor& z0, int T, std::uint64_t seed);

// Unconditional epsilon-prediction loss E||eps - eps_theta(z_t, t)||^2.
torch::Tensor backbone_loss(DenoiserImpl& denoiser, const torch::Tensor& z0, const torch::Tensor& t,
                            const torch::Tensor& eps, const NoiseSchedule& s);

struct BackboneTrainResult {
    Denoiser denoiser{nullptr};
    TrainReport report;
};

// Trains the toy backbone on codec latents of `train_images` (codec frozen).
BackboneTrainResult train_backbone(const torch::Tensor& train_images, const torch::Tensor& val_images,
                                   const LatentCodec& codec, const NoiseSchedule& s,
                                   const UNetConfig& unet, const TrainConfig& cfg,
                                   const ProgressFn& progress = {});

// Fingerprint over all parameters and buffers of a module.
std::string module_fingerprint(const torch::nn::Module& m);

} // namespace ctrlregen
