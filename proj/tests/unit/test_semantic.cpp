// SPDX-License-Identifier: Apache-2.0

#include "ctrlregen/semantic_control.hpp"
#include "ctrlregen/common.hpp"
#include "ctrlregen/nn.hpp"

#include "support.hpp"

#include <doctest.h>

#include <array>

using namespace ctrlregen;
namespace T = ctrlregen::testing;

namespace {

using M2 = std::array<std::array<double, 2>, 2>;

std::array<double, 2> mul(const M2& w, const std::array<double, 2>& x) {
    return {w[0][0] * x[0] + w[0][1] * x[1], w[1][0] * x[0] + w[1][1] * x[1]};
}

torch::Tensor tensor2(const M2& m) {
    return torch::tensor({m[0][0], m[0][1], m[1][0], m[1][1]}, torch::kFloat64).view({2, 2});
}

} // namespace

TEST_SUITE("semantic_control") {

TEST_CASE("2x2 decoupled attention against a scalar oracle") {
    const M2 wq{{{1, 2}, {0, 1}}}, wk{{{1, 0}, {0, 1}}}, wv{{{0, 1}, {1, 0}}};
    const M2 wk2{{{1, 1}, {0, 1}}}, wv2{{{2, 0}, {0, 3}}};
    const std::array<std::array<double, 2>, 2> queries{{{1, 0}, {0.3, -0.7}}};
    const std::array<double, 2> c{0.5, -1.0};
    const std::array<std::array<double, 2>, 2> tokens{{{1, 0}, {-0.4, 1.2}}};

    // scalar oracle
    std::array<std::array<double, 2>, 2> expect{};
    const double scale = 1.0 / std::sqrt(2.0);
    for (int i = 0; i < 2; ++i) {
        const auto q = mul(wq, queries[i]);
        const auto v = mul(wv, c); // one null token: softmax weight 1
        double s[2];
        for (int j = 0; j < 2; ++j) {
            const auto k = mul(wk2, tokens[j]);
            s[j] = (q[0] * k[0] + q[1] * k[1]) * scale;
        }
        const double m = std::max(s[0], s[1]);
        const double e0 = std::exp(s[0] - m), e1 = std::exp(s[1] - m);
        const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
        const auto v0 = mul(wv2, tokens[0]), v1 = mul(wv2, tokens[1]);
        for (int d = 0; d < 2; ++d) expect[i][d] = v[d] + p0 * v0[d] + p1 * v1[d];
    }

    DecoupledAttentionWeights w{tensor2(wq), tensor2(wk), tensor2(wv), tensor2(wk2), tensor2(wv2), 1};
    const auto q_in = torch::tensor({queries[0][0], queries[0][1], queries[1][0], queries[1][1]}, torch::kFloat64)
                          .view({1, 2, 2});
    const auto ctx = torch::tensor({c[0], c[1]}, torch::kFloat64).view({1, 1, 2});
    const auto tok = torch::tensor({tokens[0][0], tokens[0][1], tokens[1][0], tokens[1][1]}, torch::kFloat64)
                         .view({1, 2, 2});
    const auto out = decoupled_attention(q_in, ctx, tok, w);
    for (int i = 0; i < 2; ++i)
        for (int d = 0; d < 2; ++d) CHECK(std::fabs(out[0][i][d].item<double>() - expect[i][d]) <= 1e-6);
}

TEST_CASE("zero image tokens contribute nothing") {
    const auto w = DecoupledAttentionWeights{seeded_normal({8, 8}, 1), seeded_normal({8, 4}, 2),
                                             seeded_normal({8, 4}, 3), seeded_normal({8, 4}, 4),
                                             seeded_normal({8, 4}, 5), 2};
    const auto q = seeded_normal({2, 5, 8}, 6);
    const auto ctx = seeded_normal({2, 1, 4}, 7);
    CHECK(torch::equal(decoupled_attention(q, ctx, torch::zeros({2, 3, 4}), w), decoupled_attention(q, ctx, {}, w)));
}

TEST_CASE("single image token passes its value row") {
    const auto w = DecoupledAttentionWeights{seeded_normal({4, 4}, 1, torch::kFloat64),
                                             seeded_normal({4, 4}, 2, torch::kFloat64),
                                             seeded_normal({4, 4}, 3, torch::kFloat64),
                                             seeded_normal({4, 4}, 4, torch::kFloat64),
                                             seeded_normal({4, 4}, 5, torch::kFloat64), 2};
    const auto q = seeded_normal({1, 6, 4}, 6, torch::kFloat64);
    const auto ctx = seeded_normal({1, 1, 4}, 7, torch::kFloat64);
    const auto tok = seeded_normal({1, 1, 4}, 8, torch::kFloat64);
    const auto diff = decoupled_attention(q, ctx, tok, w) - decoupled_attention(q, ctx, {}, w);
    const auto v_row = torch::matmul(tok[0][0], w.w_v_image.t());
    for (int i = 0; i < 6; ++i) CHECK(torch::allclose(diff[0][i], v_row, 1e-12, 1e-12));
}

TEST_CASE("joint token permutation leaves the output unchanged") {
    const auto w = DecoupledAttentionWeights{seeded_normal({8, 8}, 1, torch::kFloat64),
                                             seeded_normal({8, 4}, 2, torch::kFloat64),
                                             seeded_normal({8, 4}, 3, torch::kFloat64),
                                             seeded_normal({8, 4}, 4, torch::kFloat64),
                                             seeded_normal({8, 4}, 5, torch::kFloat64), 2};
    const auto q = seeded_normal({1, 5, 8}, 6, torch::kFloat64);
    const auto ctx = seeded_normal({1, 1, 4}, 7, torch::kFloat64);
    const auto tok = seeded_normal({1, 4, 4}, 8, torch::kFloat64);
    const auto perm = torch::tensor({2, 0, 3, 1}, torch::kLong);
    CHECK(torch::allclose(decoupled_attention(q, ctx, tok, w), decoupled_attention(q, ctx, tok.index_select(1, perm), w),
                          1e-12, 1e-12));
    CHECK_THROWS_AS(decoupled_attention(q, ctx, seeded_normal({1, 4, 5}, 9, torch::kFloat64), w), ShapeError);
}

TEST_CASE("site weights reproduce the backbone's cross attention") {
    auto s = T::make_micro_stack(20);
    const auto w = site_attention_weights(*s.denoiser, *s.adapter, 0);
    auto& ca = s.denoiser->encoder->attn_blocks[0]->as<nn::TransformerBlock>()->cross_attn;
    const auto x = seeded_normal({1, 7, 8}, 21);
    const auto ctx = s.denoiser->null_context(1);
    const auto tok = seeded_normal({1, 4, 8}, 22);
    const auto ctx_img = s.adapter->image_context(tok);
    torch::NoGradGuard ng;
    const auto expect = ca->forward(x, ctx, &ctx_img.sites[0]);
    const auto got = ca->to_out(decoupled_attention(x, ctx, tok, w));
    CHECK(torch::allclose(got, expect, 1e-5, 1e-6));
}

TEST_CASE("embedding shape and determinism") {
    auto s = T::make_micro_stack(30);
    const auto x = T::structured_images(3, 8, 8, 31);
    const auto a = s.adapter->embed(x);
    CHECK(a.sizes() == torch::IntArrayRef({3, 4, 8}));
    CHECK(torch::equal(a, s.adapter->embed(x)));
    CHECK(torch::isfinite(a).all().item<bool>());
    CHECK_THROWS_AS(s.adapter->embed(torch::rand({1, 3, 7, 8})), ShapeError);
}

TEST_CASE("zero embedding reproduces the adapter-free backbone bit-exactly") {
    auto s = T::make_micro_stack(40);
    torch::NoGradGuard ng;
    const auto z = seeded_normal({2, 3, 8, 8}, 41);
    const auto t = timestep_tensor(33, 2);
    const auto bare = s.denoiser->forward(z, t);
    CHECK(torch::equal(predict_noise(*s.denoiser, z, t, s.adapter.get(), torch::zeros({2, 4, 8})), bare));
    CHECK(torch::equal(predict_noise(*s.denoiser, z, t, s.adapter.get(), {}), bare));
    CHECK(!torch::equal(predict_noise(*s.denoiser, z, t, s.adapter.get(), seeded_normal({2, 4, 8}, 42)), bare));
}

TEST_CASE("semantic loss gradients match central differences") {
    auto s = T::make_micro_stack(50);
    s.denoiser->to(torch::kFloat64);
    s.adapter->to(torch::kFloat64);
    nn::set_requires_grad(*s.denoiser, false);
    const auto imgs = T::structured_images(2, 8, 8, 51).to(torch::kFloat64);
    const auto feats = s.adapter->encoder_features(imgs);
    const auto z0 = imgs;
    const auto draw = fixed_noise_draw(z0, s.schedule.T, 52);
    auto loss = [&] { return semantic_loss(*s.denoiser, *s.adapter, z0, feats, draw.t, draw.eps, s.schedule); };
    const auto gp = T::gradient_check(loss, s.adapter->projection_parameters(), 4, 53);
    const auto ga = T::gradient_check(loss, s.adapter->attention_parameters(), 4, 54);
    CHECK(gp.numeric_norm > 0.0);
    CHECK(ga.numeric_norm > 0.0);
    CHECK(gp.rel_error <= 1e-4);
    CHECK(ga.rel_error <= 1e-4);
}

TEST_CASE("training: zero steps, frozen groups, overfit beats the unconditional backbone") {
    const auto imgs = T::structured_images(8, 8, 8, 60);
    IdentityCodec codec;
    const auto sched = make_schedule(100, 1e-3, 0.1);
    TrainConfig btc;
    btc.steps = 300;
    btc.batch_size = 8;
    btc.lr = 3e-3;
    btc.val_batches = 1;
    btc.seed = 61;
    auto bb = train_backbone(imgs, imgs, codec, sched, T::micro_unet(), btc).denoiser;

    torch::manual_seed(62);
    AutoencoderTrunk trunk(T::micro_trunk());
    auto adapter = make_semantic_adapter(T::micro_adapter(), T::micro_trunk(), *trunk, *bb, 63);
    const auto init = checksum(nn::parameter_list(*adapter));
    const auto frozen_d = checksum(nn::parameter_list(*bb));
    const auto frozen_e = checksum(adapter->encoder_parameters());

    TrainConfig tc;
    tc.steps = 0;
    tc.batch_size = 8;
    tc.val_batches = 1;
    tc.seed = 64;
    train_semantic_adapter(imgs, imgs, bb, adapter, codec, sched, tc);
    CHECK(checksum(nn::parameter_list(*adapter)) == init);

    tc.steps = 1000;
    tc.lr = 3e-3;
    auto r = train_semantic_adapter(imgs, imgs, bb, adapter, codec, sched, tc);
    CHECK(checksum(nn::parameter_list(*bb)) == frozen_d);
    CHECK(checksum(r.adapter->encoder_parameters()) == frozen_e);
    CHECK(checksum(nn::parameter_list(*r.adapter)) != init);

    // same draws, with and without the image tokens
    torch::NoGradGuard ng;
    r.adapter->eval();
    double cond = 0.0, uncond = 0.0;
    for (int rep = 0; rep < 8; ++rep) {
        const auto d = fixed_noise_draw(imgs, sched.T, derive_seed(65, std::to_string(rep)));
        cond += semantic_loss(*bb, *r.adapter, imgs, r.adapter->encoder_features(imgs), d.t, d.eps, sched)
                    .item<double>();
        uncond += backbone_loss(*bb, imgs, d.t, d.eps, sched).item<double>();
    }
    MESSAGE("conditional " << cond / 8 << " unconditional " << uncond / 8);
    CHECK(cond < uncond);

    const auto e = r.adapter->embed(imgs).flatten(1);
    const double cos = torch::cosine_similarity(e[0], e[1], 0).item<double>();
    CHECK(cos < 0.999);
}

TEST_CASE("adapter config JSON round trip") {
    AdapterConfig c;
    c.n_tokens = 6;
    c.hidden = 32;
    const auto r = AdapterConfig::from_json(c.to_json());
    CHECK(r.n_tokens == 6);
    CHECK(r.hidden == 32);
    CHECK(r.patch_grid == c.patch_grid);
}

}
