// SPDX-License-Identifier: Apache-2.0

// Building blocks shared by the codec, denoiser, control networks and the
// learned watermark.

#pragma once

#include "ctrlregen/common.hpp"

#include <optional>
#include <utility>
#include <vector>

namespace ctrlregen::nn {

// Sinusoidal embedding of integer timesteps: [N] -> [N, dim].
torch::Tensor timestep_embedding(const torch::Tensor& t, int dim);

// softmax(Q K^T / sqrt(d_head)) V with heads split out of the channel axis.
// Q: [N,Lq,C], K: [N,Lk,C], V: [N,Lk,C] -> [N,Lq,C].
torch::Tensor scaled_dot_attention(const torch::Tensor& q, const torch::Tensor& k,
                                   const torch::Tensor& v, int heads);

struct TimeEmbeddingImpl : torch::nn::Module {
    TimeEmbeddingImpl(int base_dim, int out_dim);
    torch::Tensor forward(const torch::Tensor& t);

    int base_dim;
    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(TimeEmbedding);

// GroupNorm -> SiLU -> conv, twice, with an optional timestep projection in
// between and a 1x1 shortcut when the width changes.
struct ResBlockImpl : torch::nn::Module {
    ResBlockImpl(int in_ch, int out_ch, int temb_dim, int groups);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb = {});

    torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
    torch::nn::Linear temb_proj{nullptr};
    torch::nn::Conv2d shortcut{nullptr};
};
TORCH_MODULE(ResBlock);

struct SelfAttentionImpl : torch::nn::Module {
    SelfAttentionImpl(int ch, int heads);
    torch::Tensor forward(const torch::Tensor& x);

    int heads;
    torch::nn::Linear to_qkv{nullptr}, to_out{nullptr};
};
TORCH_MODULE(SelfAttention);

// Image-branch keys and values for one attention site, already projected:
// K' = W'_K phi(x), V' = W'_V phi(x), each [N, N_tok, C].
struct ImageKV {
    torch::Tensor k;
    torch::Tensor v;
};

// One entry per attention site, in the denoiser's site order.
struct ImageContext {
    std::vector<ImageKV> sites;
};

// Cross-attention over the null context with an optional decoupled image
// branch. W_Q is shared between both branches; the branch outputs are summed
// before the output projection.
struct CrossAttentionImpl : torch::nn::Module {
    CrossAttentionImpl(int ch, int d_ctx, int heads);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& ctx,
                          const ImageKV* image = nullptr);

    int heads;
    torch::nn::Linear to_q{nullptr}, to_k{nullptr}, to_v{nullptr}, to_out{nullptr};
};
TORCH_MODULE(CrossAttention);

// GroupNorm + token projection around self-attention, decoupled
// cross-attention and a feed-forward layer, all residual.
struct TransformerBlockImpl : torch::nn::Module {
    TransformerBlockImpl(int ch, int d_ctx, int heads, int groups);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& ctx,
                          const ImageKV* image = nullptr);

    torch::nn::GroupNorm norm{nullptr};
    torch::nn::Linear proj_in{nullptr}, proj_out{nullptr};
    torch::nn::LayerNorm ln1{nullptr}, ln2{nullptr}, ln3{nullptr};
    SelfAttention self_attn{nullptr};
    CrossAttention cross_attn{nullptr};
    torch::nn::Linear ff1{nullptr}, ff2{nullptr};
};
TORCH_MODULE(TransformerBlock);

// All parameters of a module, in registration order.
std::vector<torch::Tensor> parameter_list(const torch::nn::Module& m);
void set_requires_grad(torch::nn::Module& m, bool on);
// Copies parameters and buffers of `src` into `dst` (identical structure).
void copy_state(const torch::nn::Module& src, torch::nn::Module& dst);
void zero_module(torch::nn::Module& m);

} // namespace ctrlregen::nn
