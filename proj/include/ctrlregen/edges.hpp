// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ctrlregen/common.hpp"

#include <cstdint>
#include <vector>

namespace ctrlregen {

struct CannyParams {
    double sigma = 1.4;
    double low = 0.1;
    double high = 0.2;
};

// Row-major double-precision single-channel image.
struct Plane {
    int height = 0;
    int width = 0;
    std::vector<double> px;

    Plane() = default;
    Plane(int h, int w, double fill = 0.0)
        : height(h), width(w), px(static_cast<std::size_t>(h) * w, fill) {}
    double& at(int y, int x) { return px[static_cast<std::size_t>(y) * width + x]; }
    double at(int y, int x) const { return px[static_cast<std::size_t>(y) * width + x]; }
};

// Binary edge mask (1 = edge), same spatial size as its source image.
struct EdgeMap {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> mask;

    std::uint8_t at(int y, int x) const { return mask[static_cast<std::size_t>(y) * width + x]; }
    std::size_t count() const;
    torch::Tensor to_tensor() const; // [1,H,W] float32 in {0,1}
};

// 0.299 R + 0.587 G + 0.114 B of a [3,H,W] image; a [1,H,W] image is taken as is.
Plane luminance(const torch::Tensor& image);

Plane gaussian_blur(const Plane& in, double sigma);

struct Gradients {
    Plane gx, gy, magnitude;
};
Gradients sobel(const Plane& in);

// Gaussian blur -> Sobel -> non-maximum suppression over four direction bins
// -> hysteresis (weak pixels survive only when 8-connected to a strong one).
EdgeMap canny(const Plane& gray, const CannyParams& params = {});
EdgeMap canny(const torch::Tensor& image, const CannyParams& params = {});

// [N,3,H,W] -> [N,1,H,W] float mask.
torch::Tensor canny_batch(const torch::Tensor& images, const CannyParams& params = {});

} // namespace ctrlregen
