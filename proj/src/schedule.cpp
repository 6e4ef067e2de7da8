// SPDX-License-Identifier: Apache-2.0

#include "ctrlregen/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ctrlregen {

namespace {

// Floor for abar_t in divisions; only reachable with hand-built schedules that
// pin abar_T to zero.
constexpr double kMinAlphaBar = 1e-12;

void check_t(const NoiseSchedule& s, int t, const char* what) {
    if (t < 0 || t > s.T) {
        std::ostringstream os;
        os << what << ": timestep " << t << " outside [0, " << s.T << "]";
        throw RangeError(os.str());
    }
}

torch::Tensor ddim_update(const NoiseSchedule& s, const torch::Tensor& z_t,
                          const torch::Tensor& eps_pred, int t, int t_to) {
    if (z_t.sizes() != eps_pred.sizes()) {
        throw ShapeError("ddim: eps_pred " + shape_str(eps_pred) + " vs z_t " + shape_str(z_t));
    }
    const double ab_t = std::max(s.alpha_bar(t), kMinAlphaBar);
    const double ab_to = s.alpha_bar(t_to);
    auto z0_hat = (z_t - std::sqrt(1.0 - s.alpha_bar(t)) * eps_pred) / std::sqrt(ab_t);
    return std::sqrt(ab_to) * z0_hat + std::sqrt(1.0 - ab_to) * eps_pred;
}

} // namespace

std::string to_string(BetaKind k) {
    return k == BetaKind::linear ? "linear" : "scaled_linear";
}

BetaKind beta_kind_from_string(const std::string& s) {
    if (s == "linear") return BetaKind::linear;
    if (s == "scaled_linear") return BetaKind::scaled_linear;
    throw RangeError("unknown beta schedule kind '" + s + "'");
}

NoiseSchedule make_schedule(int T, double beta_min, double beta_max, BetaKind kind) {
    if (T < 1) throw RangeError("make_schedule: T must be >= 1");
    if (!(beta_min > 0.0) || beta_min > beta_max || !(beta_max < 1.0)) {
        throw RangeError("make_schedule: need 0 < beta_min <= beta_max < 1");
    }
    NoiseSchedule s;
    s.T = T;
    s.beta_min = beta_min;
    s.beta_max = beta_max;
    s.kind = kind;
    s.betas.resize(static_cast<std::size_t>(T));
    for (int i = 0; i < T; ++i) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
        if (kind == BetaKind::linear) {
            s.betas[i] = beta_min + frac * (beta_max - beta_min);
        } else {
            const double r = std::sqrt(beta_min) + frac * (std::sqrt(beta_max) - std::sqrt(beta_min));
            s.betas[i] = r * r;
        }
    }
    s.alpha_bars.resize(static_cast<std::size_t>(T) + 1);
    s.alpha_bars[0] = 1.0;
    for (int t = 1; t <= T; ++t) {
        s.alpha_bars[t] = s.alpha_bars[t - 1] * (1.0 - s.betas[t - 1]);
    }
    return s;
}

std::string NoiseSchedule::fingerprint() const {
    std::ostringstream os;
    os.precision(17);
    os << "schedule:" << T << ':' << beta_min << ':' << beta_max << ':' << to_string(kind);
    return hex64(checksum_bytes(os.str()));
}

nlohmann::json NoiseSchedule::to_json() const {
    return {{"T", T}, {"beta_min", beta_min}, {"beta_max", beta_max}, {"kind", to_string(kind)}};
}

NoiseSchedule schedule_from_json(const nlohmann::json& j) {
    return make_schedule(j.value("T", 1000), j.value("beta_min", 1e-4), j.value("beta_max", 0.02),
                         beta_kind_from_string(j.value("kind", std::string("linear"))));
}

torch::Tensor forward_noise(const NoiseSchedule& s, const torch::Tensor& z0, int t_star,
                            const torch::Tensor& eps) {
    check_t(s, t_star, "forward_noise");
    if (z0.sizes() != eps.sizes()) {
        throw ShapeError("forward_noise: eps " + shape_str(eps) + " vs z0 " + shape_str(z0));
    }
    if (t_star == 0) return z0.clone();
    const double ab = s.alpha_bar(t_star);
    return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

torch::Tensor forward_noise_batch(const NoiseSchedule& s, const torch::Tensor& z0, const torch::Tensor& t,
                                  const torch::Tensor& eps) {
    if (z0.sizes() != eps.sizes()) {
        throw ShapeError("forward_noise_batch: eps " + shape_str(eps) + " vs z0 " + shape_str(z0));
    }
    if (t.dim() != 1 || t.size(0) != z0.size(0)) {
        throw ShapeError("forward_noise_batch: need one timestep per batch element");
    }
    if (t.min().item<int64_t>() < 0 || t.max().item<int64_t>() > s.T) {
        throw RangeError("forward_noise_batch: timestep outside [0, T]");
    }
    auto table = torch::tensor(s.alpha_bars, torch::kFloat64);
    auto ab = table.index_select(0, t.to(torch::kLong)).to(z0.dtype());
    std::vector<int64_t> view(static_cast<std::size_t>(z0.dim()), 1);
    view[0] = z0.size(0);
    ab = ab.view(view);
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps;
}

torch::Tensor reverse_step(const NoiseSchedule& s, const torch::Tensor& z_t,
                           const torch::Tensor& eps_pred, int t, int t_prev) {
    check_t(s, t, "reverse_step");
    check_t(s, t_prev, "reverse_step");
    if (!(t_prev < t)) {
        throw RangeError("reverse_step: need t_prev < t, got t=" + std::to_string(t) +
                         " t_prev=" + std::to_string(t_prev));
    }
    return ddim_update(s, z_t, eps_pred, t, t_prev);
}

torch::Tensor inversion_step(const NoiseSchedule& s, const torch::Tensor& z_t,
                             const torch::Tensor& eps_pred, int t, int t_next) {
    check_t(s, t, "inversion_step");
    check_t(s, t_next, "inversion_step");
    if (!(t < t_next)) {
        throw RangeError("inversion_step: need t < t_next");
    }
    return ddim_update(s, z_t, eps_pred, t, t_next);
}

std::vector<int> strided_timesteps(const NoiseSchedule& s, int t_start, int full_steps) {
    check_t(s, t_start, "strided_timesteps");
    if (full_steps < 1) throw RangeError("strided_timesteps: full_steps must be >= 1");
    if (t_start == 0) return {0};
    const double ratio = static_cast<double>(t_start) / s.T;
    int n = static_cast<int>(std::lround(full_steps * ratio));
    n = std::clamp(n, 1, t_start);
    std::vector<int> ts;
    ts.reserve(static_cast<std::size_t>(n) + 1);
    for (int k = n; k >= 0; --k) {
        ts.push_back(static_cast<int>(std::lround(static_cast<double>(t_start) * k / n)));
    }
    return ts;
}

} // namespace ctrlregen
