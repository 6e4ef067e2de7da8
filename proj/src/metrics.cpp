// SPDX-License-Identifier: Apache-2.0

#include "ctrlregen/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace ctrlregen {

double bit_accuracy(std::span<const std::uint8_t> recovered, std::span<const std::uint8_t> truth) {
    if (recovered.size() != truth.size()) {
        throw ShapeError("bit_accuracy: length " + std::to_string(recovered.size()) + " vs " +
                         std::to_string(truth.size()));
    }
    if (truth.empty()) throw ShapeError("bit_accuracy: empty payload");
    std::size_t match = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        match += (recovered[i] != 0) == (truth[i] != 0);
    }
    return static_cast<double>(match) / static_cast<double>(truth.size());
}

double tpr_at_fpr(std::span<const double> positives, std::span<const double> negatives, double fpr) {
    if (positives.empty() || negatives.empty()) {
        throw DataError("tpr_at_fpr: positive and negative sets must be nonempty");
    }
    if (fpr < 0.0 || fpr > 1.0) throw RangeError("tpr_at_fpr: fpr outside [0,1]");
    std::vector<double> neg(negatives.begin(), negatives.end());
    std::sort(neg.begin(), neg.end(), std::greater<>());
    const auto allowed = static_cast<std::size_t>(std::floor(fpr * static_cast<double>(neg.size()) + 1e-12));
    if (allowed >= neg.size()) return 1.0;
    const double cut = neg[allowed];
    const auto hits = std::count_if(positives.begin(), positives.end(), [&](double p) { return p > cut; });
    return static_cast<double>(hits) / static_cast<double>(positives.size());
}

double tpr_at_fpr(std::span<const ScoreSample> samples, double fpr) {
    std::vector<double> pos, neg;
    for (const auto& s : samples) {
        (s.label == SampleLabel::watermarked ? pos : neg).push_back(s.score);
    }
    return tpr_at_fpr(pos, neg, fpr);
}

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
    if (a.sizes() != b.sizes()) {
        throw ShapeError("psnr: " + shape_str(a) + " vs " + shape_str(b));
    }
    const double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

std::vector<double> psnr_per_image(const torch::Tensor& a, const torch::Tensor& b) {
    if (a.sizes() != b.sizes()) {
        throw ShapeError("psnr: " + shape_str(a) + " vs " + shape_str(b));
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(a.size(0)));
    for (int64_t i = 0; i < a.size(0); ++i) out.push_back(psnr(a[i], b[i]));
    return out;
}

namespace {

Eigen::MatrixXd to_eigen(const torch::Tensor& t) {
    auto c = t.to(torch::kFloat64).contiguous();
    const auto rows = c.dim() == 1 ? c.size(0) : c.size(0);
    const auto cols = c.dim() == 1 ? 1 : c.size(1);
    Eigen::MatrixXd m(rows, cols);
    auto acc = c.reshape({rows, cols});
    auto p = acc.data_ptr<double>();
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) m(i, j) = p[i * cols + j];
    return m;
}

double frechet_eigen(const Eigen::VectorXd& mu_a, const Eigen::MatrixXd& cov_a,
                     const Eigen::VectorXd& mu_b, const Eigen::MatrixXd& cov_b) {
    // Tr((A B)^{1/2}) = Tr((A^{1/2} B A^{1/2})^{1/2}) for symmetric PSD A, B.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(cov_a);
    Eigen::VectorXd la = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    Eigen::MatrixXd sqrt_a = ea.eigenvectors() * la.asDiagonal() * ea.eigenvectors().transpose();
    Eigen::MatrixXd m = sqrt_a * cov_b * sqrt_a;
    m = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(m, Eigen::EigenvaluesOnly);
    const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double d = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    return std::max(0.0, d);
}

struct Moments {
    Eigen::VectorXd mu;
    Eigen::MatrixXd cov;
    bool shrunk = false;
};

Moments moments(const Eigen::MatrixXd& x) {
    const auto n = x.rows();
    const auto d = x.cols();
    Moments m;
    m.mu = x.colwise().mean().transpose();
    Eigen::MatrixXd c = x.rowwise() - m.mu.transpose();
    m.cov = (c.transpose() * c) / static_cast<double>(std::max<Eigen::Index>(1, n - 1));
    if (n < 2 * d) {
        const double lambda = static_cast<double>(d) / static_cast<double>(n + d);
        const double target = m.cov.trace() / static_cast<double>(d);
        m.cov = (1.0 - lambda) * m.cov + lambda * target * Eigen::MatrixXd::Identity(d, d);
        m.shrunk = true;
    }
    return m;
}

} // namespace

double frechet_from_moments(const torch::Tensor& mu_a, const torch::Tensor& cov_a,
                            const torch::Tensor& mu_b, const torch::Tensor& cov_b) {
    return frechet_eigen(to_eigen(mu_a), to_eigen(cov_a), to_eigen(mu_b), to_eigen(cov_b));
}

FidResult frechet_distance(const torch::Tensor& features_a, const torch::Tensor& features_b) {
    if (features_a.dim() != 2 || features_b.dim() != 2 || features_a.size(1) != features_b.size(1)) {
        throw ShapeError("frechet_distance: need [N,d] features with equal d, got " +
                         shape_str(features_a) + " and " + shape_str(features_b));
    }
    if (features_a.size(0) < 2 || features_b.size(0) < 2) {
        throw DataError("frechet_distance: need at least two samples per set");
    }
    const auto ma = moments(to_eigen(features_a));
    const auto mb = moments(to_eigen(features_b));
    FidResult r;
    r.shrinkage_applied = ma.shrunk || mb.shrunk;
    if (r.shrinkage_applied) {
        std::cerr << "warning: feature_fid with fewer than 2x feature-dimension samples; "
                     "covariance shrinkage applied\n";
    }
    r.value = frechet_eigen(ma.mu, ma.cov, mb.mu, mb.cov);
    return r;
}

FidResult feature_fid(const torch::Tensor& set_a, const torch::Tensor& set_b,
                      const FeatureEncoder& encoder) {
    torch::NoGradGuard ng;
    return frechet_distance(encoder(set_a), encoder(set_b));
}

namespace {
std::vector<double> ranks(std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}
} // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw ShapeError("spearman: need equal lengths >= 2");
    const auto rx = ranks(x);
    const auto ry = ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

} // namespace ctrlregen
