// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ctrlregen/nn.hpp"
#include "ctrlregen/training.hpp"

#include <json.hpp>

#include <memory>
#include <string>
#include <vector>

namespace ctrlregen {

// Maps images [N,3,H,W] in [0,1] to latents [N,C,H/f,W/f] and back.
class LatentCodec {
public:
    virtual ~LatentCodec() = default;

    virtual torch::Tensor encode(const torch::Tensor& images) const = 0;
    // Output clamped to [0,1].
    virtual torch::Tensor decode(const torch::Tensor& latents) const = 0;

    virtual int latent_channels() const = 0;
    virtual int factor() const = 0;
    virtual std::string kind() const = 0;
    virtual std::string fingerprint() const = 0;

    std::vector<int64_t> latent_shape(int64_t height, int64_t width) const;
    void check_image(const torch::Tensor& images) const;
    void check_latent(const torch::Tensor& latents) const;
};

// Pixel space: the latent is the image itself.
class IdentityCodec final : public LatentCodec {
public:
    torch::Tensor encode(const torch::Tensor& images) const override;
    torch::Tensor decode(const torch::Tensor& latents) const override;
    int latent_channels() const override { return 3; }
    int factor() const override { return 1; }
    std::string kind() const override { return "identity"; }
    std::string fingerprint() const override { return "identity"; }
};

struct AutoencoderConfig {
    int latent_channels = 4;
    int factor = 4;            // power of two
    int base_width = 32;
    int feature_channels = 64; // trunk output width
    int groups = 8;

    nlohmann::json to_json() const;
    static AutoencoderConfig from_json(const nlohmann::json& j);
    std::string fingerprint() const;
};

// Convolutional encoder trunk: image -> [N, feature_channels, H/f, W/f].
// Reused (frozen) as the semantic image encoder and the feature-FID encoder.
struct AutoencoderTrunkImpl : torch::nn::Module {
    explicit AutoencoderTrunkImpl(const AutoencoderConfig& cfg);
    torch::Tensor forward(const torch::Tensor& x);
    // Global average of the trunk features: [N, feature_channels].
    torch::Tensor pooled(const torch::Tensor& x);

    torch::nn::Conv2d conv_in{nullptr};
    torch::nn::ModuleList blocks, downs;
    nn::ResBlock final_block{nullptr};
    torch::nn::GroupNorm out_norm{nullptr};
};
TORCH_MODULE(AutoencoderTrunk);

struct AutoencoderNetImpl : torch::nn::Module {
    explicit AutoencoderNetImpl(const AutoencoderConfig& cfg);
    torch::Tensor encode_raw(const torch::Tensor& x);
    torch::Tensor decode_raw(const torch::Tensor& z);

    AutoencoderConfig cfg;
    AutoencoderTrunk trunk{nullptr};
    torch::nn::Conv2d head{nullptr};
    torch::nn::Conv2d dec_in{nullptr};
    nn::ResBlock dec_block{nullptr};
    torch::nn::ModuleList ups, up_blocks;
    torch::nn::GroupNorm dec_norm{nullptr};
    torch::nn::Conv2d dec_out{nullptr};
    // Per-channel latent standardisation, fitted after training.
    torch::Tensor latent_shift, latent_scale;
};
TORCH_MODULE(AutoencoderNet);

// Deterministic (non-variational) autoencoder codec.
class AutoencoderCodec final : public LatentCodec {
public:
    explicit AutoencoderCodec(AutoencoderConfig cfg, std::uint64_t init_seed = 0);

    torch::Tensor encode(const torch::Tensor& images) const override;
    torch::Tensor decode(const torch::Tensor& latents) const override;
    int latent_channels() const override { return cfg_.latent_channels; }
    int factor() const override { return cfg_.factor; }
    std::string kind() const override { return "autoencoder"; }
    std::string fingerprint() const override;

    const AutoencoderConfig& config() const { return cfg_; }
    AutoencoderNet& net() { return net_; }
    const AutoencoderNet& net() const { return net_; }
    torch::Tensor pooled_features(const torch::Tensor& images) const;

    void save(const std::string& path, const nlohmann::json& meta) const;
    static AutoencoderCodec load(const std::string& path, nlohmann::json* meta = nullptr);

private:
    AutoencoderConfig cfg_;
    mutable AutoencoderNet net_{nullptr}; // inference does not mutate weights
};

struct CodecTrainResult {
    std::shared_ptr<AutoencoderCodec> codec;
    TrainReport report;
};

// Plain MSE reconstruction training; latent statistics are fitted on the
// training images afterwards (skipped when cfg.steps == 0 so that the result
// equals the initialisation).
CodecTrainResult train_autoencoder(const torch::Tensor& train_images, const torch::Tensor& val_images,
                                   const AutoencoderConfig& ae_cfg, const TrainConfig& cfg,
                                   const ProgressFn& progress = {});

// Runs `fn` over [N,...] in chunks and concatenates the results.
torch::Tensor map_batched(const torch::Tensor& x, int64_t chunk,
                          const std::function<torch::Tensor(const torch::Tensor&)>& fn);

} // namespace ctrlregen
