// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ctrlregen/common.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace ctrlregen {

enum class BetaKind { linear, scaled_linear };

std::string to_string(BetaKind k);
BetaKind beta_kind_from_string(const std::string& s);

// Variance-preserving schedule. alpha_bars has T+1 entries; alpha_bars[0] == 1
// is the "no noise" convention so that t == 0 leaves a latent untouched.
struct NoiseSchedule {
    int T = 0;
    double beta_min = 0.0;
    double beta_max = 0.0;
    BetaKind kind = BetaKind::linear;
    std::vector<double> betas;      // betas[t-1] for t = 1..T
    std::vector<double> alpha_bars; // alpha_bars[t] for t = 0..T

    double alpha_bar(int t) const { return alpha_bars.at(static_cast<std::size_t>(t)); }
    std::string fingerprint() const;
    nlohmann::json to_json() const;
};

NoiseSchedule make_schedule(int T, double beta_min, double beta_max,
                            BetaKind kind = BetaKind::linear);
NoiseSchedule schedule_from_json(const nlohmann::json& j);

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
torch::Tensor forward_noise(const NoiseSchedule& s, const torch::Tensor& z0, int t_star,
                            const torch::Tensor& eps);

// Per-sample forward noising for a batch: t is an [N] integer tensor.
torch::Tensor forward_noise_batch(const NoiseSchedule& s, const torch::Tensor& z0, const torch::Tensor& t,
                                  const torch::Tensor& eps);

// Deterministic DDIM update from t to t_prev < t given a noise prediction.
torch::Tensor reverse_step(const NoiseSchedule& s, const torch::Tensor& z_t,
                           const torch::Tensor& eps_pred, int t, int t_prev);

// Same update run forwards in time (t < t_next); used for DDIM inversion.
torch::Tensor inversion_step(const NoiseSchedule& s, const torch::Tensor& z_t,
                             const torch::Tensor& eps_pred, int t, int t_next);

// Strided descending timestep sequence t_start = t_0 > t_1 > ... > t_n = 0 with
// n = max(1, round(full_steps * t_start / T)), capped at t_start.
std::vector<int> strided_timesteps(const NoiseSchedule& s, int t_start, int full_steps);

// Sampler interface so stochastic variants can be slotted in later.
class Sampler {
public:
    virtual ~Sampler() = default;
    virtual torch::Tensor step(const NoiseSchedule& s, const torch::Tensor& z_t,
                               const torch::Tensor& eps_pred, int t, int t_prev) const = 0;
    virtual std::string name() const = 0;
};

class DdimSampler final : public Sampler {
public:
    torch::Tensor step(const NoiseSchedule& s, const torch::Tensor& z_t,
                       const torch::Tensor& eps_pred, int t, int t_prev) const override {
        return reverse_step(s, z_t, eps_pred, t, t_prev);
    }
    std::string name() const override { return "ddim"; }
};

} // namespace ctrlregen
