// SPDX-License-Identifier: Apache-2.0

#include "ctrlregen/edges.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

namespace ctrlregen {

namespace {

int clampi(int v, int lo, int hi) { return std::min(std::max(v, lo), hi); }

} // namespace

std::size_t EdgeMap::count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

torch::Tensor EdgeMap::to_tensor() const {
    auto t = torch::empty({1, height, width}, torch::kFloat32);
    auto p = t.data_ptr<float>();
    for (std::size_t i = 0; i < mask.size(); ++i) p[i] = mask[i] ? 1.0f : 0.0f;
    return t;
}

Plane luminance(const torch::Tensor& image) {
    if (image.dim() != 3 || (image.size(0) != 3 && image.size(0) != 1)) {
        throw ShapeError("luminance: expected [3,H,W] or [1,H,W], got " + shape_str(image));
    }
    auto img = image.to(torch::kFloat64).contiguous();
    const int h = static_cast<int>(img.size(1));
    const int w = static_cast<int>(img.size(2));
    Plane out(h, w);
    const double* p = img.data_ptr<double>();
    const std::size_t n = static_cast<std::size_t>(h) * w;
    if (img.size(0) == 1) {
        std::copy(p, p + n, out.px.begin());
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            out.px[i] = 0.299 * p[i] + 0.587 * p[n + i] + 0.114 * p[2 * n + i];
        }
    }
    return out;
}

Plane gaussian_blur(const Plane& in, double sigma) {
    if (sigma <= 0.0) return in;
    const int radius = std::max(1, static_cast<int>(std::lround(1.5 * sigma)));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
        sum += k[i + radius];
    }
    for (auto& v : k) v /= sum;

    // Separable, replicate border: horizontal pass then vertical pass.
    Plane tmp(in.height, in.width);
    for (int y = 0; y < in.height; ++y) {
        for (int x = 0; x < in.width; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                acc += k[i + radius] * in.at(y, clampi(x + i, 0, in.width - 1));
            }
            tmp.at(y, x) = acc;
        }
    }
    Plane out(in.height, in.width);
    for (int y = 0; y < in.height; ++y) {
        for (int x = 0; x < in.width; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                acc += k[i + radius] * tmp.at(clampi(y + i, 0, in.height - 1), x);
            }
            out.at(y, x) = acc;
        }
    }
    return out;
}

Gradients sobel(const Plane& in) {
    Gradients g{Plane(in.height, in.width), Plane(in.height, in.width), Plane(in.height, in.width)};
    auto px = [&](int y, int x) {
        return in.at(clampi(y, 0, in.height - 1), clampi(x, 0, in.width - 1));
    };
    for (int y = 0; y < in.height; ++y) {
        for (int x = 0; x < in.width; ++x) {
            const double gx = (px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1)) -
                              (px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1));
            const double gy = (px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1)) -
                              (px(y - 1, x - 1) + 2.0 * px(y - 1, x) + px(y - 1, x + 1));
            g.gx.at(y, x) = gx;
            g.gy.at(y, x) = gy;
            g.magnitude.at(y, x) = std::hypot(gx, gy);
        }
    }
    return g;
}

EdgeMap canny(const Plane& gray, const CannyParams& params) {
    if (!(params.low < params.high)) {
        throw RangeError("canny: low threshold must be below high threshold");
    }
    const int h = gray.height;
    const int w = gray.width;
    const auto grad = sobel(gaussian_blur(gray, params.sigma));
    const auto& mag = grad.magnitude;
    auto m_at = [&](int y, int x) {
        return (y < 0 || y >= h || x < 0 || x >= w) ? 0.0 : mag.at(y, x);
    };

    // Non-maximum suppression. The pixel must strictly beat its neighbour on
    // the negative side and tie-or-beat the positive side, so plateaus of two
    // equal magnitudes keep exactly one pixel.
    Plane thin(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double m = mag.at(y, x);
            if (m <= 0.0) continue;
            double angle = std::atan2(grad.gy.at(y, x), grad.gx.at(y, x)) * 180.0 / M_PI;
            if (angle < 0.0) angle += 180.0;
            int dy = 0, dx = 1;
            if (angle >= 22.5 && angle < 67.5) {
                dy = 1; dx = 1;
            } else if (angle >= 67.5 && angle < 112.5) {
                dy = 1; dx = 0;
            } else if (angle >= 112.5 && angle < 157.5) {
                dy = 1; dx = -1;
            }
            const double prev = m_at(y - dy, x - dx);
            const double next = m_at(y + dy, x + dx);
            if (m > prev && m >= next) thin.at(y, x) = m;
        }
    }

    EdgeMap out{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 0)};
    std::deque<std::pair<int, int>> frontier;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (thin.at(y, x) >= params.high) {
                out.mask[static_cast<std::size_t>(y) * w + x] = 1;
                frontier.emplace_back(y, x);
            }
        }
    }
    while (!frontier.empty()) {
        const auto [y, x] = frontier.front();
        frontier.pop_front();
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                const int ny = y + dy, nx = x + dx;
                if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                auto& cell = out.mask[static_cast<std::size_t>(ny) * w + nx];
                if (cell == 0 && thin.at(ny, nx) >= params.low) {
                    cell = 1;
                    frontier.emplace_back(ny, nx);
                }
            }
        }
    }
    return out;
}

EdgeMap canny(const torch::Tensor& image, const CannyParams& params) {
    return canny(luminance(image), params);
}

torch::Tensor canny_batch(const torch::Tensor& images, const CannyParams& params) {
    if (images.dim() != 4) throw ShapeError("canny_batch: expected [N,C,H,W], got " + shape_str(images));
    std::vector<torch::Tensor> maps;
    maps.reserve(static_cast<std::size_t>(images.size(0)));
    for (int64_t i = 0; i < images.size(0); ++i) {
        maps.push_back(canny(images[i], params).to_tensor());
    }
    return torch::stack(maps);
}

} // namespace ctrlregen
