// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ctrlregen/codec.hpp"
#include "ctrlregen/denoiser.hpp"
#include "ctrlregen/semantic_control.hpp"

namespace ctrlregen {

// Trainable clone of the backbone encoder driven by an edge map. Produces one
// additive residual per decoder slot through zero-initialised 1x1 convs.
struct SpatialControlNetImpl : torch::nn::Module {
    // `codec_factor` is the pixel-to-latent downsampling of the codec.
    SpatialControlNetImpl(const DenoiserImpl& backbone, int codec_factor);

    // edge: [N,1,H,W] binary map at image resolution; z_t: [N,C,h,w].
    ControlResiduals forward(const torch::Tensor& edge, const torch::Tensor& z_t, const torch::Tensor& t,
                             const nn::ImageContext* image = nullptr);

    // Edge features at latent resolution, width of the first encoder level.
    torch::Tensor edge_features(const torch::Tensor& edge);

    // Copies backbone weights into the clone and re-zeroes the output convs
    // and the last edge-encoder layer.
    void init_from_backbone(const DenoiserImpl& backbone);

    UNetConfig cfg;
    int codec_factor;
    nn::TimeEmbedding time_embed{nullptr};
    torch::Tensor null_ctx;
    UNetEncoder encoder{nullptr};
    torch::nn::Sequential edge_encoder{nullptr};
    torch::nn::Conv2d edge_out{nullptr};
    torch::nn::ModuleList zero_convs;
};
TORCH_MODULE(SpatialControlNet);

SpatialControlNet make_spatial_net(const DenoiserImpl& backbone, int codec_factor, std::uint64_t seed);

// L = E||eps - eps_theta(z_t, phi(x), edge, t)||^2 on a fixed batch.
torch::Tensor spatial_loss(DenoiserImpl& denoiser, SemanticAdapterImpl& adapter, SpatialControlNetImpl& net,
                           const torch::Tensor& z0, const torch::Tensor& tokens, const torch::Tensor& edges,
                           const torch::Tensor& t, const torch::Tensor& eps, const NoiseSchedule& s);

struct SpatialTrainResult {
    SpatialControlNet net{nullptr};
    TrainReport report;
    double semantic_only_val_loss = 0.0; // same split and draws, no residuals
};

// Trains the control net with backbone and adapter frozen. Edge maps are
// derived from the training images with the default Canny parameters.
SpatialTrainResult train_spatial_net(const torch::Tensor& train_images, const torch::Tensor& val_images,
                                     Denoiser& denoiser, SemanticAdapter& adapter, SpatialControlNet net,
                                     const LatentCodec& codec, const NoiseSchedule& s, const TrainConfig& cfg,
                                     const ProgressFn& progress = {});

} // namespace ctrlregen
