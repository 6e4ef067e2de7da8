// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ctrlregen/common.hpp"

#include <functional>
#include <span>
#include <vector>

namespace ctrlregen {

using Bits = std::vector<std::uint8_t>;

enum class SampleLabel { watermarked, clean };

struct ScoreSample {
    SampleLabel label;
    double score;
};

double bit_accuracy(std::span<const std::uint8_t> recovered, std::span<const std::uint8_t> truth);

// True-positive rate at the threshold chosen on the negatives: the smallest
// threshold whose false-positive fraction does not exceed `fpr`. Equivalent to
// counting positives strictly above the (floor(fpr*n)+1)-th largest negative.
double tpr_at_fpr(std::span<const double> positives, std::span<const double> negatives,
                  double fpr = 0.01);
double tpr_at_fpr(std::span<const ScoreSample> samples, double fpr = 0.01);

// PSNR on the [0,1] scale over equal-shaped tensors; identical inputs return
// kPsnrCap.
inline constexpr double kPsnrCap = 100.0;
double psnr(const torch::Tensor& a, const torch::Tensor& b);
// Per-image PSNR for [N,...] batches.
std::vector<double> psnr_per_image(const torch::Tensor& a, const torch::Tensor& b);

struct FidResult {
    double value = 0.0;
    bool shrinkage_applied = false;
};

// Fréchet distance between Gaussian fits of two feature sets ([N,d] each).
// When either set has fewer than 2d rows its covariance is shrunk toward
// (tr(S)/d) I with weight d/(n+d).
FidResult frechet_distance(const torch::Tensor& features_a, const torch::Tensor& features_b);

// Closed form for known moments; shared by the empirical path.
double frechet_from_moments(const torch::Tensor& mu_a, const torch::Tensor& cov_a,
                            const torch::Tensor& mu_b, const torch::Tensor& cov_b);

using FeatureEncoder = std::function<torch::Tensor(const torch::Tensor& images)>;

FidResult feature_fid(const torch::Tensor& set_a, const torch::Tensor& set_b,
                      const FeatureEncoder& encoder);

// Spearman rank correlation (average ranks for ties).
double spearman(std::span<const double> x, std::span<const double> y);

} // namespace ctrlregen
