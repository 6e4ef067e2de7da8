// SPDX-License-Identifier: Apache-2.0

#include "ctrlregen/codec.hpp"

#include "ctrlregen/checkpoint.hpp"

#include <bit>

namespace ctrlregen {

namespace F = torch::nn::functional;

std::vector<int64_t> LatentCodec::latent_shape(int64_t height, int64_t width) const {
    if (height % factor() != 0 || width % factor() != 0) {
        throw ShapeError("codec: image " + std::to_string(height) + "x" + std::to_string(width) +
                         " not divisible by downsample factor " + std::to_string(factor()));
    }
    return {latent_channels(), height / factor(), width / factor()};
}

void LatentCodec::check_image(const torch::Tensor& images) const {
    if (images.dim() != 4 || images.size(1) != 3) {
        throw ShapeError("codec: expected [N,3,H,W] images, got " + shape_str(images));
    }
    latent_shape(images.size(2), images.size(3));
}

void LatentCodec::check_latent(const torch::Tensor& latents) const {
    if (latents.dim() != 4 || latents.size(1) != latent_channels()) {
        throw ShapeError("codec: expected [N," + std::to_string(latent_channels()) +
                         ",h,w] latents, got " + shape_str(latents));
    }
}

torch::Tensor IdentityCodec::encode(const torch::Tensor& images) const {
    check_image(images);
    return images.clone();
}

torch::Tensor IdentityCodec::decode(const torch::Tensor& latents) const {
    check_latent(latents);
    return latents.clamp(0.0, 1.0);
}

nlohmann::json AutoencoderConfig::to_json() const {
    return {{"latent_channels", latent_channels}, {"factor", factor}, {"base_width", base_width},
            {"feature_channels", feature_channels}, {"groups", groups}};
}

namespace {
void check_factor(int factor) {
    if (factor < 1 || !std::has_single_bit(static_cast<unsigned>(factor)))
        throw RangeError("autoencoder: factor must be a power of two");
}
} // namespace

AutoencoderConfig AutoencoderConfig::from_json(const nlohmann::json& j) {
    AutoencoderConfig c;
    c.latent_channels = j.value("latent_channels", c.latent_channels);
    c.factor = j.value("factor", c.factor);
    c.base_width = j.value("base_width", c.base_width);
    c.feature_channels = j.value("feature_channels", c.feature_channels);
    c.groups = j.value("groups", c.groups);
    check_factor(c.factor);
    return c;
}

std::string AutoencoderConfig::fingerprint() const { return hex64(checksum_bytes(to_json().dump())); }

namespace {
int levels_of(int factor) { return std::countr_zero(static_cast<unsigned>(factor)); }
} // namespace

AutoencoderTrunkImpl::AutoencoderTrunkImpl(const AutoencoderConfig& cfg) {
    check_factor(cfg.factor);
    conv_in = register_module("conv_in", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, cfg.base_width, 3).padding(1)));
    int ch = cfg.base_width;
    const int levels = levels_of(cfg.factor);
    for (int i = 0; i < levels; ++i) {
        blocks->push_back(nn::ResBlock(ch, ch, 0, cfg.groups));
        const int next = i + 1 == levels ? cfg.feature_channels : std::min(2 * ch, cfg.feature_channels);
        downs->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, next, 3).stride(2).padding(1)));
        ch = next;
    }
    register_module("blocks", blocks);
    register_module("downs", downs);
    final_block = register_module("final_block", nn::ResBlock(ch, cfg.feature_channels, 0, cfg.groups));
    out_norm = register_module("out_norm", torch::nn::GroupNorm(cfg.groups, cfg.feature_channels));
}

torch::Tensor AutoencoderTrunkImpl::forward(const torch::Tensor& x) {
    auto h = conv_in(x * 2.0 - 1.0);
    for (std::size_t i = 0; i < blocks->size(); ++i) {
        h = blocks[i]->as<nn::ResBlock>()->forward(h);
        h = downs[i]->as<torch::nn::Conv2d>()->forward(h);
    }
    return torch::silu(out_norm(final_block(h)));
}

torch::Tensor AutoencoderTrunkImpl::pooled(const torch::Tensor& x) {
    return forward(x).mean({2, 3});
}

AutoencoderNetImpl::AutoencoderNetImpl(const AutoencoderConfig& c) : cfg(c) {
    trunk = register_module("trunk", AutoencoderTrunk(cfg));
    head = register_module("head", torch::nn::Conv2d(
        torch::nn::Conv2dOptions(cfg.feature_channels, cfg.latent_channels, 3).padding(1)));
    dec_in = register_module("dec_in", torch::nn::Conv2d(
        torch::nn::Conv2dOptions(cfg.latent_channels, cfg.feature_channels, 3).padding(1)));
    dec_block = register_module("dec_block", nn::ResBlock(cfg.feature_channels, cfg.feature_channels, 0, cfg.groups));
    int ch = cfg.feature_channels;
    const int levels = levels_of(cfg.factor);
    for (int i = 0; i < levels; ++i) {
        const int next = i + 1 == levels ? cfg.base_width : std::max(cfg.base_width, ch);
        ups->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, next, 3).padding(1)));
        up_blocks->push_back(nn::ResBlock(next, next, 0, cfg.groups));
        ch = next;
    }
    register_module("ups", ups);
    register_module("up_blocks", up_blocks);
    dec_norm = register_module("dec_norm", torch::nn::GroupNorm(cfg.groups, ch));
    dec_out = register_module("dec_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, 3, 3).padding(1)));
    latent_shift = register_buffer("latent_shift", torch::zeros({cfg.latent_channels}));
    latent_scale = register_buffer("latent_scale", torch::ones({cfg.latent_channels}));
}

torch::Tensor AutoencoderNetImpl::encode_raw(const torch::Tensor& x) { return head(trunk(x)); }

torch::Tensor AutoencoderNetImpl::decode_raw(const torch::Tensor& z) {
    auto h = dec_block(dec_in(z));
    for (std::size_t i = 0; i < ups->size(); ++i) {
        h = F::interpolate(h, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0})
                                  .mode(torch::kNearest));
        h = ups[i]->as<torch::nn::Conv2d>()->forward(h);
        h = up_blocks[i]->as<nn::ResBlock>()->forward(h);
    }
    return (dec_out(torch::silu(dec_norm(h))) + 1.0) * 0.5;
}

AutoencoderCodec::AutoencoderCodec(AutoencoderConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
    torch::manual_seed(init_seed);
    net_ = AutoencoderNet(cfg_);
    net_->eval();
}

torch::Tensor AutoencoderCodec::encode(const torch::Tensor& images) const {
    check_image(images);
    torch::NoGradGuard ng;
    auto shift = net_->latent_shift.view({1, -1, 1, 1});
    auto scale = net_->latent_scale.view({1, -1, 1, 1});
    return (net_->encode_raw(images) - shift) / scale;
}

torch::Tensor AutoencoderCodec::decode(const torch::Tensor& latents) const {
    check_latent(latents);
    torch::NoGradGuard ng;
    auto shift = net_->latent_shift.view({1, -1, 1, 1});
    auto scale = net_->latent_scale.view({1, -1, 1, 1});
    return net_->decode_raw(latents * scale + shift).clamp(0.0, 1.0);
}

torch::Tensor AutoencoderCodec::pooled_features(const torch::Tensor& images) const {
    check_image(images);
    torch::NoGradGuard ng;
    return net_->trunk->pooled(images);
}

std::string AutoencoderCodec::fingerprint() const {
    return hex64(checksum(nn::parameter_list(*net_)) ^ checksum({net_->latent_shift, net_->latent_scale}));
}

void AutoencoderCodec::save(const std::string& path, const nlohmann::json& meta) const {
    auto m = meta;
    m["kind"] = "autoencoder";
    m["config"] = cfg_.to_json();
    m["weights_fingerprint"] = fingerprint();
    save_checkpoint(path, *net_, m);
}

AutoencoderCodec AutoencoderCodec::load(const std::string& path, nlohmann::json* meta) {
    const auto header = read_checkpoint_meta(path);
    AutoencoderCodec codec(AutoencoderConfig::from_json(header.at("config")));
    auto m = load_checkpoint(path, *codec.net_);
    codec.net_->eval();
    if (m.contains("weights_fingerprint")) {
        expect_fingerprint(m, "weights_fingerprint", codec.fingerprint(), "codec checkpoint " + path);
    }
    if (meta) *meta = m;
    return codec;
}

torch::Tensor map_batched(const torch::Tensor& x, int64_t chunk,
                          const std::function<torch::Tensor(const torch::Tensor&)>& fn) {
    std::vector<torch::Tensor> parts;
    for (int64_t i = 0; i < x.size(0); i += chunk) {
        parts.push_back(fn(x.slice(0, i, std::min(x.size(0), i + chunk))));
    }
    return torch::cat(parts, 0);
}

CodecTrainResult train_autoencoder(const torch::Tensor& train_images, const torch::Tensor& val_images,
                                   const AutoencoderConfig& ae_cfg, const TrainConfig& cfg,
                                   const ProgressFn& progress) {
    if (train_images.size(0) == 0) throw DataError("train_autoencoder: empty corpus");
    auto codec = std::make_shared<AutoencoderCodec>(ae_cfg, derive_seed(cfg.seed, "codec-init"));
    codec->check_image(train_images);
    auto& net = codec->net();
    net->train();
    BatchSampler sampler(train_images.size(0), derive_seed(cfg.seed, "codec-batches"));
    const auto& val = val_images.size(0) > 0 ? val_images : train_images;

    auto val_loss = [&]() {
        torch::NoGradGuard ng;
        const int64_t n = std::min<int64_t>(val.size(0), int64_t{cfg.val_batches} * cfg.batch_size);
        auto v = val.slice(0, 0, n);
        auto rec = map_batched(v, cfg.batch_size, [&](const torch::Tensor& b) { return net->decode_raw(net->encode_raw(b)); });
        return F::mse_loss(rec, v).item<double>();
    };
    auto loss_fn = [&](int) {
        auto batch = train_images.index_select(0, sampler.next(cfg.batch_size));
        return F::mse_loss(net->decode_raw(net->encode_raw(batch)), batch);
    };

    CodecTrainResult result;
    result.report = run_training("train-codec", nn::parameter_list(*net), cfg, loss_fn, val_loss, {}, progress);
    net->eval();
    if (cfg.steps > 0) {
        torch::NoGradGuard ng;
        auto raw = map_batched(train_images, 64, [&](const torch::Tensor& b) { return net->encode_raw(b); });
        net->latent_shift.copy_(raw.mean({0, 2, 3}));
        net->latent_scale.copy_(raw.std(std::vector<int64_t>{0, 2, 3}).clamp_min(1e-4));
    }
    result.codec = std::move(codec);
    return result;
}

} // namespace ctrlregen
