// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ctrlregen/codec.hpp"
#include "ctrlregen/denoiser.hpp"
#include "ctrlregen/metrics.hpp"
#include "ctrlregen/schedule.hpp"
#include "ctrlregen/training.hpp"

#include <json.hpp>

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace ctrlregen {

struct DetectionOutcome {
    double score = 0.0;        // higher means more watermark-like
    std::optional<Bits> bits;  // recovered payload, when the scheme carries one
    bool warning = false;      // detector could not run normally
};

// Payloads are serialised as lowercase hex, most significant bit first within
// each nibble; lengths that are not a multiple of four are zero-padded.
std::string bits_to_hex(const Bits& bits);
Bits bits_from_hex(const std::string& hex, std::size_t length);
Bits random_bits(std::size_t length, std::uint64_t seed);

class Watermarker {
public:
    virtual ~Watermarker() = default;
    virtual std::string name() const = 0;
    // 0 for zero-bit schemes.
    virtual int payload_bits() const = 0;
    // One outcome per image of [N,3,H,W]; `query` is the payload scored against.
    virtual std::vector<DetectionOutcome> detect(const torch::Tensor& images, const Bits& query) const = 0;
};

// Schemes that watermark an existing image.
class PostHocWatermarker : public Watermarker {
public:
    virtual torch::Tensor embed(const torch::Tensor& images, const Bits& payload) const = 0;
};

// ---- DwtDctSvd: QIM on the largest singular value of 4x4 DCT blocks of the
// Haar LL band of luminance (0..255 scale).

class DwtDctSvd final : public PostHocWatermarker {
public:
    explicit DwtDctSvd(double step = 36.0, int bits = 32);

    std::string name() const override { return "dwtdctsvd"; }
    int payload_bits() const override { return bits_; }
    torch::Tensor embed(const torch::Tensor& images, const Bits& payload) const override;
    std::vector<DetectionOutcome> detect(const torch::Tensor& images, const Bits& query) const override;

    // Recovered bits of one [3,H,W] image.
    Bits extract(const torch::Tensor& image) const;
    // Largest singular value of every block, raster order.
    std::vector<double> block_singular_values(const torch::Tensor& image) const;
    // QIM target for one coefficient; never below `floor`.
    double quantize(double s1, int bit, double floor = 0.0) const;
    // Soft vote in [-1,1] for bit 1 from one coefficient.
    double soft_vote(double s1) const;
    double step() const { return step_; }

private:
    double step_;
    int bits_;
};

// ---- Toy StegaStamp: learned encoder/decoder trained through corruptions.

struct StegaConfig {
    int bits = 16;
    double linf = 0.08;     // L-infinity budget of the residual
    int width = 32;
    int message_grid = 8;   // payload is rendered on a grid x grid map
    double image_weight = 2.0;
    double noise_max = 0.08;
    double crop_min = 0.8;
    double blur_sigma_max = 1.5;

    nlohmann::json to_json() const;
    static StegaConfig from_json(const nlohmann::json& j);
};

struct StegaEncoderImpl : torch::nn::Module {
    explicit StegaEncoderImpl(const StegaConfig& cfg);
    // Residual in [-linf, linf].
    torch::Tensor forward(const torch::Tensor& images, const torch::Tensor& bits);

    StegaConfig cfg;
    torch::nn::Linear msg_fc{nullptr};
    torch::nn::Conv2d c1{nullptr}, c2{nullptr}, c3{nullptr}, c4{nullptr}, c_out{nullptr};
};
TORCH_MODULE(StegaEncoder);

struct StegaDecoderImpl : torch::nn::Module {
    explicit StegaDecoderImpl(const StegaConfig& cfg);
    // Bit logits [N,bits].
    torch::Tensor forward(const torch::Tensor& images);

    torch::nn::Sequential convs{nullptr};
    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(StegaDecoder);

struct StegaNetImpl : torch::nn::Module {
    explicit StegaNetImpl(const StegaConfig& cfg);
    StegaConfig cfg;
    StegaEncoder encoder{nullptr};
    StegaDecoder decoder{nullptr};
};
TORCH_MODULE(StegaNet);

class StegaToy final : public PostHocWatermarker {
public:
    explicit StegaToy(StegaNet net);

    std::string name() const override { return "stega"; }
    int payload_bits() const override { return net_->cfg.bits; }
    torch::Tensor embed(const torch::Tensor& images, const Bits& payload) const override;
    std::vector<DetectionOutcome> detect(const torch::Tensor& images, const Bits& query) const override;
    std::vector<Bits> decode_bits(const torch::Tensor& images) const;

    StegaNet& net() { return net_; }
    void save(const std::string& path, const nlohmann::json& meta) const;
    static StegaToy load(const std::string& path, nlohmann::json* meta = nullptr);

private:
    mutable StegaNet net_;
};

// Differentiable corruption layer used during training: one of identity,
// additive noise, blur or crop-resize per call.
torch::Tensor corrupt(const torch::Tensor& images, const StegaConfig& cfg, at::Generator& gen);

torch::Tensor gaussian_blur_batch(const torch::Tensor& images, double sigma);

struct StegaTrainResult {
    std::shared_ptr<StegaToy> scheme;
    TrainReport report;
};

StegaTrainResult train_stega_toy(const torch::Tensor& train_images, const torch::Tensor& val_images,
                                 const StegaConfig& scfg, const TrainConfig& cfg, const ProgressFn& progress = {});

// ---- Ring: key planted in the Fourier transform of the initial noise.

struct RingConfig {
    int channel = 0;
    double r_min = 6.0;
    double r_max = 10.0;
    std::uint64_t key_seed = 0;
    int full_steps = 50;

    nlohmann::json to_json() const;
    static RingConfig from_json(const nlohmann::json& j);
};

// Generator stack the ring scheme samples from and inverts through.
struct GenerationPipeline {
    std::shared_ptr<const LatentCodec> codec;
    NoiseSchedule schedule;
    mutable Denoiser denoiser{nullptr};
};

class RingWatermark final : public Watermarker {
public:
    RingWatermark(RingConfig cfg, GenerationPipeline pipe, int latent_h, int latent_w);

    std::string name() const override { return "ring"; }
    int payload_bits() const override { return 0; }
    std::vector<DetectionOutcome> detect(const torch::Tensor& images, const Bits& query) const override;

    // Initial noise for image `index`, with or without the key.
    torch::Tensor initial_noise(std::uint64_t seed, bool keyed) const;
    torch::Tensor plant(const torch::Tensor& noise) const;
    // Unconditional generations from per-image seeds base_seed + i.
    torch::Tensor generate(int64_t count, std::uint64_t base_seed, bool keyed) const;
    // Negative RMS distance between the ring region of a latent and the key.
    double key_score(const torch::Tensor& latent) const;
    torch::Tensor invert(const torch::Tensor& images) const;

    const torch::Tensor& mask() const { return mask_; }
    const torch::Tensor& key() const { return key_; }

private:
    RingConfig cfg_;
    GenerationPipeline pipe_;
    int h_, w_;
    torch::Tensor mask_; // [h,w] bool, FFT layout
    torch::Tensor key_;  // [h,w] real, FFT layout, zero outside the mask
};

// Deterministic DDIM sampling from z_T (unconditional), strided.
torch::Tensor sample_from_noise(const GenerationPipeline& pipe, const torch::Tensor& z_T, int full_steps);
// Deterministic DDIM inversion of a latent up to t = T, strided.
torch::Tensor ddim_invert(const GenerationPipeline& pipe, const torch::Tensor& z0, int full_steps);

struct PerturbationReport {
    double pixel_l2 = 0.0;  // mean per-image L2 in pixel space
    double latent_l2 = 0.0; // mean per-image L2 between codec latents
};

PerturbationReport perturbation_probe(const torch::Tensor& clean, const torch::Tensor& watermarked,
                                      const LatentCodec& codec);

} // namespace ctrlregen
