// SPDX-License-Identifier: Apache-2.0

#include "ctrlregen/watermarks.hpp"

#include "ctrlregen/checkpoint.hpp"

#include <opencv2/core.hpp>

#include <cmath>
#include <limits>
#include <numbers>

namespace ctrlregen {

namespace F = torch::nn::functional;

std::string bits_to_hex(const Bits& bits) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    for (std::size_t i = 0; i < bits.size(); i += 4) {
        int nibble = 0;
        for (std::size_t j = 0; j < 4; ++j) {
            nibble = (nibble << 1) | (i + j < bits.size() ? (bits[i + j] & 1) : 0);
        }
        out.push_back(digits[nibble]);
    }
    return out;
}

Bits bits_from_hex(const std::string& hex, std::size_t length) {
    if (hex.size() * 4 < length) throw RangeError("payload hex too short for " + std::to_string(length) + " bits");
    Bits bits;
    for (char c : hex) {
        int v;
        if (c >= '0' && c <= '9') v = c - '0';
        else if (c >= 'a' && c <= 'f') v = c - 'a' + 10;
        else if (c >= 'A' && c <= 'F') v = c - 'A' + 10;
        else throw RangeError(std::string("invalid hex digit '") + c + "'");
        for (int j = 3; j >= 0; --j) bits.push_back(static_cast<std::uint8_t>((v >> j) & 1));
    }
    bits.resize(length);
    return bits;
}

Bits random_bits(std::size_t length, std::uint64_t seed) {
    auto gen = make_generator(seed);
    auto t = torch::randint(0, 2, {static_cast<int64_t>(length)}, gen, torch::kLong);
    Bits bits(length);
    for (std::size_t i = 0; i < length; ++i) bits[i] = static_cast<std::uint8_t>(t[static_cast<int64_t>(i)].item<int64_t>());
    return bits;
}

namespace {

void check_images(const torch::Tensor& images, const char* who) {
    if (images.dim() != 4 || images.size(1) != 3) {
        throw ShapeError(std::string(who) + ": expected [N,3,H,W] images, got " + shape_str(images));
    }
}

void check_payload(const Bits& p, int bits, const char* who) {
    if (static_cast<int>(p.size()) != bits) {
        throw RangeError(std::string(who) + ": payload has " + std::to_string(p.size()) + " bits, expected " +
                         std::to_string(bits));
    }
    for (auto b : p)
        if (b > 1) throw RangeError(std::string(who) + ": payload bits must be 0 or 1");
}

// Luminance on the 0..255 scale over the region divisible by 8.
cv::Mat luma_255(const torch::Tensor& image, int h, int w) {
    auto img = image.to(torch::kFloat64).contiguous();
    auto y = (img[0] * 0.299 + img[1] * 0.587 + img[2] * 0.114) * 255.0;
    y = y.slice(0, 0, h).slice(1, 0, w).contiguous();
    cv::Mat m(h, w, CV_64F);
    std::memcpy(m.ptr<double>(), y.data_ptr<double>(), sizeof(double) * static_cast<std::size_t>(h * w));
    return m;
}

cv::Mat haar_ll(const cv::Mat& y) {
    cv::Mat ll(y.rows / 2, y.cols / 2, CV_64F);
    for (int i = 0; i < ll.rows; ++i)
        for (int j = 0; j < ll.cols; ++j)
            ll.at<double>(i, j) = (y.at<double>(2 * i, 2 * j) + y.at<double>(2 * i, 2 * j + 1) +
                                   y.at<double>(2 * i + 1, 2 * j) + y.at<double>(2 * i + 1, 2 * j + 1)) / 2.0;
    return ll;
}

struct BlockSvd {
    cv::Mat dct, w, u, vt;
};

BlockSvd block_svd(const cv::Mat& ll, int bi, int bj) {
    BlockSvd b;
    cv::dct(ll(cv::Rect(bj * 4, bi * 4, 4, 4)).clone(), b.dct);
    cv::SVD::compute(b.dct, b.w, b.u, b.vt);
    return b;
}

} // namespace

DwtDctSvd::DwtDctSvd(double step, int bits) : step_(step), bits_(bits) {
    if (!(step > 0.0) || bits < 1) throw RangeError("dwtdctsvd: step and payload length must be positive");
}

double DwtDctSvd::quantize(double s1, int bit, double floor) const {
    const double off = bit ? 0.75 : 0.25;
    double k = std::round(s1 / step_ - off);
    double target = (k + off) * step_;
    while (target < floor) target += step_;
    return target;
}

double DwtDctSvd::soft_vote(double s1) const {
    const double r = s1 / step_ - std::floor(s1 / step_);
    return std::cos(2.0 * std::numbers::pi * (r - 0.75));
}

std::vector<double> DwtDctSvd::block_singular_values(const torch::Tensor& image) const {
    const int h = static_cast<int>(image.size(1) / 8 * 8), w = static_cast<int>(image.size(2) / 8 * 8);
    const auto ll = haar_ll(luma_255(image, h, w));
    std::vector<double> s;
    for (int bi = 0; bi < ll.rows / 4; ++bi)
        for (int bj = 0; bj < ll.cols / 4; ++bj) s.push_back(block_svd(ll, bi, bj).w.at<double>(0));
    return s;
}

torch::Tensor DwtDctSvd::embed(const torch::Tensor& images, const Bits& payload) const {
    check_images(images, "dwtdctsvd");
    check_payload(payload, bits_, "dwtdctsvd");
    const int h = static_cast<int>(images.size(2) / 8 * 8), w = static_cast<int>(images.size(3) / 8 * 8);
    if ((h / 8) * (w / 8) < bits_) {
        throw ShapeError("dwtdctsvd: " + std::to_string(images.size(2)) + "x" + std::to_string(images.size(3)) +
                         " image has fewer 8x8 blocks than payload bits");
    }
    auto out = images.to(torch::kFloat64).clone();
    for (int64_t n = 0; n < images.size(0); ++n) {
        const auto ll = haar_ll(luma_255(out[n], h, w));
        cv::Mat dll = cv::Mat::zeros(ll.size(), CV_64F);
        int block = 0;
        for (int bi = 0; bi < ll.rows / 4; ++bi) {
            for (int bj = 0; bj < ll.cols / 4; ++bj, ++block) {
                auto b = block_svd(ll, bi, bj);
                const double s1 = b.w.at<double>(0), s2 = b.w.at<double>(1);
                const double target = quantize(s1, payload[static_cast<std::size_t>(block % bits_)], s2 + step_ / 4);
                cv::Mat delta = (target - s1) * (b.u.col(0) * b.vt.row(0));
                cv::Mat spatial;
                cv::idct(delta, spatial);
                spatial.copyTo(dll(cv::Rect(bj * 4, bi * 4, 4, 4)));
            }
        }
        // Inverse Haar with only LL changed spreads dLL / 2 over each 2x2 cell.
        auto dy = torch::zeros({images.size(2), images.size(3)}, torch::kFloat64);
        auto acc = dy.accessor<double, 2>();
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) acc[i][j] = dll.at<double>(i / 2, j / 2) / 2.0 / 255.0;
        out[n] += dy.unsqueeze(0);
    }
    return out.clamp(0.0, 1.0).to(images.scalar_type());
}

Bits DwtDctSvd::extract(const torch::Tensor& image) const {
    const auto s = block_singular_values(image);
    if (static_cast<int>(s.size()) < bits_) throw ShapeError("dwtdctsvd: image too small to carry the payload");
    std::vector<double> votes(static_cast<std::size_t>(bits_), 0.0);
    for (std::size_t b = 0; b < s.size(); ++b) votes[b % static_cast<std::size_t>(bits_)] += soft_vote(s[b]);
    Bits out(votes.size());
    for (std::size_t i = 0; i < votes.size(); ++i) out[i] = votes[i] > 0.0 ? 1 : 0;
    return out;
}

std::vector<DetectionOutcome> DwtDctSvd::detect(const torch::Tensor& images, const Bits& query) const {
    check_images(images, "dwtdctsvd");
    check_payload(query, bits_, "dwtdctsvd");
    std::vector<DetectionOutcome> out;
    for (int64_t n = 0; n < images.size(0); ++n) {
        DetectionOutcome d;
        d.bits = extract(images[n]);
        d.score = bit_accuracy(*d.bits, query);
        out.push_back(std::move(d));
    }
    return out;
}

// ---- toy StegaStamp

nlohmann::json StegaConfig::to_json() const {
    return {{"bits", bits}, {"linf", linf}, {"width", width}, {"message_grid", message_grid},
            {"image_weight", image_weight}, {"noise_max", noise_max}, {"crop_min", crop_min},
            {"blur_sigma_max", blur_sigma_max}};
}

StegaConfig StegaConfig::from_json(const nlohmann::json& j) {
    StegaConfig c;
    c.bits = j.value("bits", c.bits);
    c.linf = j.value("linf", c.linf);
    c.width = j.value("width", c.width);
    c.message_grid = j.value("message_grid", c.message_grid);
    c.image_weight = j.value("image_weight", c.image_weight);
    c.noise_max = j.value("noise_max", c.noise_max);
    c.crop_min = j.value("crop_min", c.crop_min);
    c.blur_sigma_max = j.value("blur_sigma_max", c.blur_sigma_max);
    if (c.bits < 1 || !(c.linf > 0.0) || c.width < 1 || c.message_grid < 1 || c.crop_min <= 0.0 || c.crop_min > 1.0) {
        throw RangeError("stega: invalid config");
    }
    return c;
}

StegaEncoderImpl::StegaEncoderImpl(const StegaConfig& c) : cfg(c) {
    const int w = cfg.width;
    msg_fc = register_module("msg_fc", torch::nn::Linear(cfg.bits, 4 * cfg.message_grid * cfg.message_grid));
    auto conv = [](int in, int out, int stride) {
        return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
    };
    c1 = register_module("c1", conv(7, w, 1));
    c2 = register_module("c2", conv(w, 2 * w, 2));
    c3 = register_module("c3", conv(2 * w, 2 * w, 1));
    c4 = register_module("c4", conv(3 * w, w, 1));
    c_out = register_module("c_out", conv(w, 3, 1));
}

torch::Tensor StegaEncoderImpl::forward(const torch::Tensor& images, const torch::Tensor& bits) {
    const auto n = images.size(0), h = images.size(2), w = images.size(3);
    auto m = msg_fc(bits * 2.0 - 1.0).view({n, 4, cfg.message_grid, cfg.message_grid});
    m = F::interpolate(m, F::InterpolateFuncOptions().size(std::vector<int64_t>{h, w}).mode(torch::kNearest));
    auto h1 = torch::silu(c1(torch::cat({images * 2.0 - 1.0, m}, 1)));
    auto h3 = torch::silu(c3(torch::silu(c2(h1))));
    auto up = F::interpolate(h3, F::InterpolateFuncOptions().size(std::vector<int64_t>{h, w}).mode(torch::kNearest));
    auto h4 = torch::silu(c4(torch::cat({up, h1}, 1)));
    return cfg.linf * torch::tanh(c_out(h4));
}

StegaDecoderImpl::StegaDecoderImpl(const StegaConfig& cfg) {
    const int w = cfg.width;
    auto conv = [](int in, int out) {
        return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(2).padding(1));
    };
    convs = register_module("convs", torch::nn::Sequential(conv(3, w), torch::nn::SiLU(), conv(w, 2 * w),
                                                           torch::nn::SiLU(), conv(2 * w, 2 * w), torch::nn::SiLU(),
                                                           conv(2 * w, 2 * w), torch::nn::SiLU(),
                                                           torch::nn::AdaptiveAvgPool2d(4)));
    fc1 = register_module("fc1", torch::nn::Linear(2 * w * 16, 256));
    fc2 = register_module("fc2", torch::nn::Linear(256, cfg.bits));
}

torch::Tensor StegaDecoderImpl::forward(const torch::Tensor& images) {
    return fc2(torch::silu(fc1(convs->forward(images * 2.0 - 1.0).flatten(1))));
}

StegaNetImpl::StegaNetImpl(const StegaConfig& c) : cfg(c) {
    encoder = register_module("encoder", StegaEncoder(cfg));
    decoder = register_module("decoder", StegaDecoder(cfg));
}

StegaToy::StegaToy(StegaNet net) : net_(std::move(net)) { net_->eval(); }

namespace {
torch::Tensor bits_tensor(const Bits& p, int64_t n) {
    std::vector<float> v(p.begin(), p.end());
    return torch::tensor(v).unsqueeze(0).expand({n, static_cast<int64_t>(p.size())}).contiguous();
}
} // namespace

torch::Tensor StegaToy::embed(const torch::Tensor& images, const Bits& payload) const {
    check_images(images, "stega");
    check_payload(payload, net_->cfg.bits, "stega");
    torch::NoGradGuard ng;
    return map_batched(images, 64, [&](const torch::Tensor& b) {
        return (b + net_->encoder->forward(b, bits_tensor(payload, b.size(0)))).clamp(0.0, 1.0);
    });
}

std::vector<Bits> StegaToy::decode_bits(const torch::Tensor& images) const {
    check_images(images, "stega");
    torch::NoGradGuard ng;
    auto logits = map_batched(images, 64, [&](const torch::Tensor& b) { return net_->decoder->forward(b); });
    auto hard = (logits > 0).to(torch::kUInt8).contiguous();
    std::vector<Bits> out;
    for (int64_t n = 0; n < hard.size(0); ++n) {
        const auto* p = hard[n].data_ptr<std::uint8_t>();
        out.emplace_back(p, p + hard.size(1));
    }
    return out;
}

std::vector<DetectionOutcome> StegaToy::detect(const torch::Tensor& images, const Bits& query) const {
    check_payload(query, net_->cfg.bits, "stega");
    std::vector<DetectionOutcome> out;
    for (auto& b : decode_bits(images)) {
        DetectionOutcome d;
        d.score = bit_accuracy(b, query);
        d.bits = std::move(b);
        out.push_back(std::move(d));
    }
    return out;
}

void StegaToy::save(const std::string& path, const nlohmann::json& meta) const {
    auto m = meta;
    m["kind"] = "stega";
    m["config"] = net_->cfg.to_json();
    m["weights_fingerprint"] = hex64(checksum(nn::parameter_list(*net_)));
    save_checkpoint(path, *net_, m);
}

StegaToy StegaToy::load(const std::string& path, nlohmann::json* meta) {
    const auto header = read_checkpoint_meta(path);
    StegaNet net(StegaConfig::from_json(header.at("config")));
    auto m = load_checkpoint(path, *net);
    expect_fingerprint(m, "weights_fingerprint", hex64(checksum(nn::parameter_list(*net))), "stega checkpoint " + path);
    if (meta) *meta = m;
    return StegaToy(net);
}

torch::Tensor gaussian_blur_batch(const torch::Tensor& images, double sigma) {
    if (!(sigma > 0.0)) return images;
    const int radius = std::max(1, static_cast<int>(std::ceil(2.0 * sigma)));
    auto x = torch::arange(-radius, radius + 1, images.options());
    auto k = torch::exp(-(x * x) / (2.0 * sigma * sigma));
    k = k / k.sum();
    const auto c = images.size(1);
    auto kh = k.view({1, 1, 1, -1}).expand({c, 1, 1, 2 * radius + 1});
    auto kv = k.view({1, 1, -1, 1}).expand({c, 1, 2 * radius + 1, 1});
    auto pad = F::pad(images, F::PadFuncOptions({radius, radius, radius, radius}).mode(torch::kReplicate));
    auto out = F::conv2d(pad, kh, F::Conv2dFuncOptions().groups(c));
    return F::conv2d(out, kv, F::Conv2dFuncOptions().groups(c));
}

torch::Tensor corrupt(const torch::Tensor& images, const StegaConfig& cfg, at::Generator& gen) {
    auto u = [&]() { return torch::rand({1}, gen).item<double>(); };
    const int kind = static_cast<int>(torch::randint(0, 4, {1}, gen).item<int64_t>());
    switch (kind) {
    case 1:
        return images + torch::randn(images.sizes(), gen) * (u() * cfg.noise_max);
    case 2:
        return gaussian_blur_batch(images, 0.5 + u() * std::max(0.0, cfg.blur_sigma_max - 0.5));
    case 3: {
        const auto h = images.size(2), w = images.size(3);
        const double frac = cfg.crop_min + u() * (1.0 - cfg.crop_min);
        const auto ch = std::max<int64_t>(1, std::llround(frac * static_cast<double>(h)));
        const auto cw = std::max<int64_t>(1, std::llround(frac * static_cast<double>(w)));
        const auto y0 = static_cast<int64_t>(u() * static_cast<double>(h - ch));
        const auto x0 = static_cast<int64_t>(u() * static_cast<double>(w - cw));
        auto crop = images.slice(2, y0, y0 + ch).slice(3, x0, x0 + cw);
        return F::interpolate(crop, F::InterpolateFuncOptions()
                                        .size(std::vector<int64_t>{h, w})
                                        .mode(torch::kBilinear)
                                        .align_corners(false));
    }
    default:
        return images;
    }
}

StegaTrainResult train_stega_toy(const torch::Tensor& train_images, const torch::Tensor& val_images,
                                 const StegaConfig& scfg, const TrainConfig& cfg, const ProgressFn& progress) {
    if (train_images.size(0) == 0) throw DataError("train_stega_toy: empty corpus");
    check_images(train_images, "train_stega_toy");
    torch::manual_seed(derive_seed(cfg.seed, "stega-init"));
    StegaNet net(scfg);
    net->train();

    BatchSampler sampler(train_images.size(0), derive_seed(cfg.seed, "stega-batches"));
    auto gen = make_generator(derive_seed(cfg.seed, "stega-noise"));
    auto loss_on = [&](const torch::Tensor& x, const torch::Tensor& bits, at::Generator* g) {
        auto residual = net->encoder->forward(x, bits);
        auto marked = (x + residual).clamp(0.0, 1.0);
        auto seen = g ? corrupt(marked, scfg, *g) : marked;
        auto logits = net->decoder->forward(seen);
        return F::binary_cross_entropy_with_logits(logits, bits) +
               scfg.image_weight * residual.pow(2).mean();
    };
    auto loss_fn = [&](int) {
        auto x = train_images.index_select(0, sampler.next(cfg.batch_size));
        auto bits = torch::randint(0, 2, {x.size(0), scfg.bits}, gen).to(torch::kFloat32);
        return loss_on(x, bits, &gen);
    };
    auto val_src = val_images.size(0) > 0 ? val_images : train_images;
    const auto val_x = val_src.slice(0, 0, std::min<int64_t>(val_src.size(0), int64_t{cfg.val_batches} * cfg.batch_size));
    auto vgen = make_generator(derive_seed(cfg.seed, "stega-val"));
    const auto val_bits = torch::randint(0, 2, {val_x.size(0), scfg.bits}, vgen).to(torch::kFloat32);
    auto val_loss = [&]() {
        torch::NoGradGuard ng;
        return loss_on(val_x, val_bits, nullptr).item<double>();
    };

    StegaTrainResult r;
    r.report = run_training("train-watermark", nn::parameter_list(*net), cfg, loss_fn, val_loss, {}, progress);
    r.scheme = std::make_shared<StegaToy>(net);
    return r;
}

// ---- ring

nlohmann::json RingConfig::to_json() const {
    return {{"channel", channel}, {"r_min", r_min}, {"r_max", r_max}, {"key_seed", key_seed},
            {"full_steps", full_steps}};
}

RingConfig RingConfig::from_json(const nlohmann::json& j) {
    RingConfig c;
    c.channel = j.value("channel", c.channel);
    c.r_min = j.value("r_min", c.r_min);
    c.r_max = j.value("r_max", c.r_max);
    c.key_seed = j.value("key_seed", c.key_seed);
    c.full_steps = j.value("full_steps", c.full_steps);
    if (c.channel < 0 || c.r_min < 0.0 || c.r_max < c.r_min || c.full_steps < 1) throw RangeError("ring: invalid config");
    return c;
}

RingWatermark::RingWatermark(RingConfig cfg, GenerationPipeline pipe, int latent_h, int latent_w)
    : cfg_(cfg), pipe_(std::move(pipe)), h_(latent_h), w_(latent_w) {
    if (!pipe_.codec || !pipe_.denoiser) throw MissingComponentError("ring: generator pipeline is incomplete");
    if (cfg_.channel >= pipe_.codec->latent_channels()) throw RangeError("ring: channel out of range");
    mask_ = torch::zeros({h_, w_}, torch::kBool);
    key_ = torch::zeros({h_, w_}, torch::kFloat64);
    const int rings = static_cast<int>(std::floor(cfg_.r_max)) + 1;
    auto profile = seeded_normal({rings}, derive_seed(cfg_.key_seed, "ring-key"), torch::kFloat64) *
                   std::sqrt(static_cast<double>(h_ * w_));
    auto m = mask_.accessor<bool, 2>();
    auto k = key_.accessor<double, 2>();
    auto p = profile.accessor<double, 1>();
    for (int i = 0; i < h_; ++i) {
        for (int j = 0; j < w_; ++j) {
            const double fi = i <= h_ / 2 ? i : i - h_;
            const double fj = j <= w_ / 2 ? j : j - w_;
            const double r = std::hypot(fi, fj);
            if (r >= cfg_.r_min && r <= cfg_.r_max) {
                m[i][j] = true;
                k[i][j] = p[static_cast<int64_t>(std::lround(r))];
            }
        }
    }
    if (!mask_.any().item<bool>()) throw RangeError("ring: radius band selects no frequencies");
}

torch::Tensor RingWatermark::plant(const torch::Tensor& noise) const {
    auto out = noise.clone();
    auto f = torch::fft::fft2(noise[cfg_.channel].to(torch::kFloat64));
    f = torch::where(mask_, key_.to(torch::kComplexDouble), f);
    out[cfg_.channel] = torch::real(torch::fft::ifft2(f)).to(noise.scalar_type());
    return out;
}

torch::Tensor RingWatermark::initial_noise(std::uint64_t seed, bool keyed) const {
    auto z = seeded_normal({pipe_.codec->latent_channels(), h_, w_}, derive_seed(seed, "ring-noise"));
    return keyed ? plant(z) : z;
}

torch::Tensor RingWatermark::generate(int64_t count, std::uint64_t base_seed, bool keyed) const {
    std::vector<torch::Tensor> z;
    for (int64_t i = 0; i < count; ++i) z.push_back(initial_noise(base_seed + static_cast<std::uint64_t>(i), keyed));
    auto z_T = torch::stack(z);
    return map_batched(z_T, 32, [&](const torch::Tensor& b) {
        return pipe_.codec->decode(sample_from_noise(pipe_, b, cfg_.full_steps));
    });
}

double RingWatermark::key_score(const torch::Tensor& latent) const {
    auto f = torch::fft::fft2(latent[cfg_.channel].to(torch::kFloat64));
    auto d = torch::abs(f - key_.to(torch::kComplexDouble)).masked_select(mask_);
    return -std::sqrt(d.pow(2).mean().item<double>() / static_cast<double>(h_ * w_));
}

torch::Tensor RingWatermark::invert(const torch::Tensor& images) const {
    return map_batched(images, 32, [&](const torch::Tensor& b) {
        return ddim_invert(pipe_, pipe_.codec->encode(b), cfg_.full_steps);
    });
}

std::vector<DetectionOutcome> RingWatermark::detect(const torch::Tensor& images, const Bits&) const {
    check_images(images, "ring");
    const auto z = invert(images);
    std::vector<DetectionOutcome> out;
    for (int64_t n = 0; n < z.size(0); ++n) {
        DetectionOutcome d;
        if (!torch::isfinite(z[n]).all().item<bool>()) {
            d.score = std::numeric_limits<double>::lowest();
            d.warning = true;
        } else {
            d.score = key_score(z[n]);
        }
        out.push_back(d);
    }
    return out;
}

torch::Tensor sample_from_noise(const GenerationPipeline& pipe, const torch::Tensor& z_T, int full_steps) {
    torch::NoGradGuard ng;
    const auto ts = strided_timesteps(pipe.schedule, pipe.schedule.T, full_steps);
    auto z = z_T;
    for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
        auto eps = pipe.denoiser->forward(z, timestep_tensor(ts[i], z.size(0)));
        z = reverse_step(pipe.schedule, z, eps, ts[i], ts[i + 1]);
    }
    return z;
}

torch::Tensor ddim_invert(const GenerationPipeline& pipe, const torch::Tensor& z0, int full_steps) {
    torch::NoGradGuard ng;
    auto ts = strided_timesteps(pipe.schedule, pipe.schedule.T, full_steps);
    std::reverse(ts.begin(), ts.end());
    auto z = z0;
    for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
        // The network is trained on t >= 1; the first step borrows t = 1.
        auto eps = pipe.denoiser->forward(z, timestep_tensor(std::max(ts[i], 1), z.size(0)));
        z = inversion_step(pipe.schedule, z, eps, ts[i], ts[i + 1]);
    }
    return z;
}

PerturbationReport perturbation_probe(const torch::Tensor& clean, const torch::Tensor& watermarked,
                                      const LatentCodec& codec) {
    if (clean.sizes() != watermarked.sizes()) throw ShapeError("perturbation_probe: image sets differ in shape");
    const auto n = clean.size(0);
    if (n == 0) return {};
    auto per_image = [](const torch::Tensor& a, const torch::Tensor& b) {
        return (a - b).to(torch::kFloat64).flatten(1).norm(2, 1).mean().item<double>();
    };
    auto enc = [&](const torch::Tensor& x) {
        return map_batched(x, 64, [&](const torch::Tensor& b) { return codec.encode(b); });
    };
    return {per_image(clean, watermarked), per_image(enc(clean), enc(watermarked))};
}

} // namespace ctrlregen
