// SPDX-License-Identifier: Apache-2.0

#include "support.hpp"

#include "ctrlregen/common.hpp"
#include "ctrlregen/nn.hpp"

#include <random>

#include <unistd.h>

namespace fs = std::filesystem;

namespace ctrlregen::testing {

UNetConfig micro_unet(int latent_channels) {
    UNetConfig c;
    c.latent_channels = latent_channels;
    c.widths = {8, 16};
    c.attention = {true, true};
    c.d_ctx = 8;
    c.heads = 2;
    c.groups = 4;
    return c;
}

AutoencoderConfig micro_trunk() {
    AutoencoderConfig c;
    c.latent_channels = 3;
    c.factor = 2;
    c.base_width = 8;
    c.feature_channels = 8;
    c.groups = 4;
    return c;
}

AdapterConfig micro_adapter() {
    AdapterConfig c;
    c.n_tokens = 4;
    c.hidden = 16;
    c.patch_grid = 2;
    return c;
}

torch::Tensor random_images(int64_t n, int64_t h, int64_t w, std::uint64_t seed) {
    auto gen = make_generator(seed);
    return torch::rand({n, 3, h, w}, gen);
}

torch::Tensor structured_images(int64_t n, int64_t h, int64_t w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto out = torch::zeros({n, 3, h, w});
    const auto ys = torch::linspace(0.0, 1.0, h).view({h, 1});
    const auto xs = torch::linspace(0.0, 1.0, w).view({1, w});
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t c = 0; c < 3; ++c) {
            const double a = u(rng), b = u(rng);
            out[i][c] = 0.15 + 0.3 * (a * ys + b * xs).clamp(0.0, 1.0);
        }
        const int64_t side = std::max<int64_t>(2, h / 3);
        const auto y0 = static_cast<int64_t>(u(rng) * static_cast<double>(h - side));
        const auto x0 = static_cast<int64_t>(u(rng) * static_cast<double>(w - side));
        const double v = 0.7 + 0.3 * u(rng);
        out.index_put_({i, torch::indexing::Slice(), torch::indexing::Slice(y0, y0 + side),
                        torch::indexing::Slice(x0, x0 + side)},
                       v);
    }
    return out;
}

ControlledPipeline MicroStack::pipeline() const {
    ControlledPipeline p;
    p.codec = codec;
    p.schedule = schedule;
    p.denoiser = denoiser;
    p.adapter = adapter;
    p.spatial = spatial;
    p.full_steps = 5;
    p.seed = 11;
    p.batch = 3;
    return p;
}

MicroStack make_micro_stack(std::uint64_t seed, int T) {
    MicroStack s;
    s.codec = std::make_shared<IdentityCodec>();
    s.schedule = make_schedule(T, 1e-3, 0.1);
    torch::manual_seed(seed);
    s.denoiser = Denoiser(micro_unet());
    s.denoiser->eval();
    torch::manual_seed(seed + 1);
    AutoencoderTrunk trunk(micro_trunk());
    s.adapter = make_semantic_adapter(micro_adapter(), micro_trunk(), *trunk, *s.denoiser, seed + 2);
    s.adapter->eval();
    s.spatial = make_spatial_net(*s.denoiser, 1, seed + 3);
    s.spatial->eval();
    return s;
}

void randomize(torch::nn::Module& m, std::uint64_t seed, double scale) {
    torch::NoGradGuard ng;
    std::uint64_t k = 0;
    for (auto& p : m.parameters()) {
        p.copy_(seeded_normal(p.sizes(), derive_seed(seed, "randomize-" + std::to_string(k++)), p.scalar_type()) *
                scale);
    }
}

GradCheck gradient_check(const std::function<torch::Tensor()>& loss, const std::vector<torch::Tensor>& params,
                         int coords, std::uint64_t seed, double h) {
    for (const auto& p : params) {
        if (p.grad().defined()) p.mutable_grad().zero_();
    }
    loss().backward();
    std::mt19937_64 rng(seed);
    double diff2 = 0.0, num2 = 0.0;
    GradCheck out;
    for (const auto& p : params) {
        const auto flat_grad = p.grad().reshape({-1});
        auto data = p.detach().view({-1}); // shares storage with p
        const auto numel = data.numel();
        for (int c = 0; c < coords; ++c) {
            const auto idx = static_cast<int64_t>(rng() % static_cast<std::uint64_t>(numel));
            const double orig = data[idx].item<double>();
            double up = 0.0, down = 0.0;
            {
                torch::NoGradGuard ng;
                data[idx].fill_(orig + h);
                up = loss().item<double>();
                data[idx].fill_(orig - h);
                down = loss().item<double>();
                data[idx].fill_(orig);
            }
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = flat_grad[idx].item<double>();
            diff2 += (analytic - numeric) * (analytic - numeric);
            num2 += numeric * numeric;
            ++out.coordinates;
        }
    }
    out.numeric_norm = std::sqrt(num2);
    out.rel_error = std::sqrt(diff2) / std::max(out.numeric_norm, 1e-300);
    return out;
}

TempDir::TempDir(const std::string& tag) {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("ctrlregen-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
}

TempDir::~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
}

fs::path fixture(const std::string& name) { return fs::path(CTRLREGEN_FIXTURE_DIR) / name; }

} // namespace ctrlregen::testing
