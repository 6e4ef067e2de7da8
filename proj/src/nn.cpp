// SPDX-License-Identifier: Apache-2.0

#include "ctrlregen/nn.hpp"

#include <cmath>

namespace ctrlregen::nn {

namespace F = torch::nn::functional;

torch::Tensor timestep_embedding(const torch::Tensor& t, int dim) {
    const int half = dim / 2;
    auto freqs = torch::exp(-std::log(10000.0) *
                            torch::arange(half, torch::kFloat32) / static_cast<double>(half));
    auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
    auto emb = torch::cat({torch::cos(args), torch::sin(args)}, 1);
    if (dim % 2 == 1) emb = torch::cat({emb, torch::zeros({emb.size(0), 1})}, 1);
    return emb;
}

torch::Tensor scaled_dot_attention(const torch::Tensor& q, const torch::Tensor& k,
                                   const torch::Tensor& v, int heads) {
    const auto n = q.size(0);
    const auto c = q.size(2);
    if (k.size(2) != c || v.size(2) != c || k.size(1) != v.size(1)) {
        throw ShapeError("attention: q " + shape_str(q) + ", k " + shape_str(k) + ", v " + shape_str(v));
    }
    if (c % heads != 0) throw ShapeError("attention: channels not divisible by heads");
    const auto dh = c / heads;
    auto split = [&](const torch::Tensor& x) {
        return x.reshape({n, x.size(1), heads, dh}).transpose(1, 2);
    };
    auto qh = split(q), kh = split(k), vh = split(v);
    auto scores = torch::matmul(qh, kh.transpose(-2, -1)) / std::sqrt(static_cast<double>(dh));
    auto out = torch::matmul(torch::softmax(scores, -1), vh);
    return out.transpose(1, 2).reshape({n, q.size(1), c});
}

TimeEmbeddingImpl::TimeEmbeddingImpl(int base_dim_, int out_dim) : base_dim(base_dim_) {
    fc1 = register_module("fc1", torch::nn::Linear(base_dim, out_dim));
    fc2 = register_module("fc2", torch::nn::Linear(out_dim, out_dim));
}

torch::Tensor TimeEmbeddingImpl::forward(const torch::Tensor& t) {
    return fc2(torch::silu(fc1(timestep_embedding(t, base_dim).to(fc1->weight.dtype()))));
}

ResBlockImpl::ResBlockImpl(int in_ch, int out_ch, int temb_dim, int groups) {
    norm1 = register_module("norm1", torch::nn::GroupNorm(groups, in_ch));
    conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, 3).padding(1)));
    norm2 = register_module("norm2", torch::nn::GroupNorm(groups, out_ch));
    conv2 = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out_ch, out_ch, 3).padding(1)));
    if (temb_dim > 0) temb_proj = register_module("temb_proj", torch::nn::Linear(temb_dim, out_ch));
    if (in_ch != out_ch) {
        shortcut = register_module("shortcut", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, 1)));
    }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
    auto h = conv1(torch::silu(norm1(x)));
    if (temb_proj && temb.defined()) {
        h = h + temb_proj(torch::silu(temb)).unsqueeze(-1).unsqueeze(-1);
    }
    h = conv2(torch::silu(norm2(h)));
    return (shortcut ? shortcut(x) : x) + h;
}

SelfAttentionImpl::SelfAttentionImpl(int ch, int heads_) : heads(heads_) {
    to_qkv = register_module("to_qkv", torch::nn::Linear(torch::nn::LinearOptions(ch, 3 * ch).bias(false)));
    to_out = register_module("to_out", torch::nn::Linear(ch, ch));
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x) {
    auto qkv = to_qkv(x).chunk(3, -1);
    return to_out(scaled_dot_attention(qkv[0], qkv[1], qkv[2], heads));
}

CrossAttentionImpl::CrossAttentionImpl(int ch, int d_ctx, int heads_) : heads(heads_) {
    to_q = register_module("to_q", torch::nn::Linear(torch::nn::LinearOptions(ch, ch).bias(false)));
    to_k = register_module("to_k", torch::nn::Linear(torch::nn::LinearOptions(d_ctx, ch).bias(false)));
    to_v = register_module("to_v", torch::nn::Linear(torch::nn::LinearOptions(d_ctx, ch).bias(false)));
    to_out = register_module("to_out", torch::nn::Linear(ch, ch));
}

torch::Tensor CrossAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& ctx,
                                          const ImageKV* image) {
    auto q = to_q(x);
    auto z = scaled_dot_attention(q, to_k(ctx), to_v(ctx), heads);
    if (image != nullptr) {
        z = z + scaled_dot_attention(q, image->k, image->v, heads);
    }
    return to_out(z);
}

TransformerBlockImpl::TransformerBlockImpl(int ch, int d_ctx, int heads, int groups) {
    norm = register_module("norm", torch::nn::GroupNorm(groups, ch));
    proj_in = register_module("proj_in", torch::nn::Linear(ch, ch));
    ln1 = register_module("ln1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({ch})));
    self_attn = register_module("self_attn", SelfAttention(ch, heads));
    ln2 = register_module("ln2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({ch})));
    cross_attn = register_module("cross_attn", CrossAttention(ch, d_ctx, heads));
    ln3 = register_module("ln3", torch::nn::LayerNorm(torch::nn::LayerNormOptions({ch})));
    ff1 = register_module("ff1", torch::nn::Linear(ch, 4 * ch));
    ff2 = register_module("ff2", torch::nn::Linear(4 * ch, ch));
    proj_out = register_module("proj_out", torch::nn::Linear(ch, ch));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& ctx,
                                            const ImageKV* image) {
    const auto n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    auto tokens = norm(x).reshape({n, c, h * w}).transpose(1, 2);
    tokens = proj_in(tokens);
    tokens = tokens + self_attn(ln1(tokens));
    tokens = tokens + cross_attn(ln2(tokens), ctx, image);
    tokens = tokens + ff2(F::gelu(ff1(ln3(tokens))));
    tokens = proj_out(tokens);
    return x + tokens.transpose(1, 2).reshape({n, c, h, w});
}

std::vector<torch::Tensor> parameter_list(const torch::nn::Module& m) {
    return m.parameters(/*recurse=*/true);
}

void set_requires_grad(torch::nn::Module& m, bool on) {
    for (auto& p : m.parameters()) {
        p.set_requires_grad(on);
        if (!on) p.mutable_grad().reset(); // stale gradients would look like updates
    }
}

void copy_state(const torch::nn::Module& src, torch::nn::Module& dst) {
    torch::NoGradGuard ng;
    auto sp = src.named_parameters(true);
    auto dp = dst.named_parameters(true);
    for (auto& item : dp) {
        const auto* s = sp.find(item.key());
        if (s == nullptr) throw ShapeError("copy_state: missing parameter " + item.key());
        item.value().copy_(*s);
    }
    auto sb = src.named_buffers(true);
    auto db = dst.named_buffers(true);
    for (auto& item : db) {
        const auto* s = sb.find(item.key());
        if (s == nullptr) throw ShapeError("copy_state: missing buffer " + item.key());
        item.value().copy_(*s);
    }
}

void zero_module(torch::nn::Module& m) {
    torch::NoGradGuard ng;
    for (auto& p : m.parameters()) p.zero_();
}

} // namespace ctrlregen::nn
