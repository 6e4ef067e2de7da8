// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ctrlregen/common.hpp"

#include <json.hpp>

#include <functional>
#include <string>
#include <vector>

namespace ctrlregen {

struct TrainConfig {
    int steps = 1000;
    int batch_size = 16;
    double lr = 2e-4;
    double weight_decay = 0.0;
    double grad_clip = 1.0; // <= 0 disables
    int log_every = 100;
    int val_batches = 4;    // validation batches used for before/after loss
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
    static TrainConfig from_json(const nlohmann::json& j, TrainConfig defaults);
};

struct TrainReport {
    double initial_train_loss = 0.0;
    double final_train_loss = 0.0;
    double val_loss_before = 0.0;
    double val_loss_after = 0.0;
    int steps = 0;
    std::vector<double> loss_curve; // smoothed, one entry per log interval

    nlohmann::json to_json() const;
};

using ProgressFn = std::function<void(int step, double loss)>;

// Mini-batch index draws from a dedicated stream.
class BatchSampler {
public:
    BatchSampler(int64_t population, std::uint64_t seed);
    torch::Tensor next(int64_t batch);

private:
    int64_t population_;
    at::Generator gen_;
};

// Uniform integer timesteps in [1, T].
torch::Tensor sample_timesteps(int64_t batch, int T, at::Generator& gen);

void check_finite_loss(double loss, const std::string& stage, int step);

// Throws FrozenParameterError if any frozen tensor carries a gradient.
void assert_no_frozen_grads(const std::vector<torch::Tensor>& frozen, const std::string& stage);

// Runs the shared optimisation loop: Adam over `params`, per-step closure
// returning the loss tensor, gradient clipping, finite-loss abort.
TrainReport run_training(const std::string& stage, std::vector<torch::Tensor> params,
                         const TrainConfig& cfg, const std::function<torch::Tensor(int step)>& loss_fn,
                         const std::function<double()>& val_loss_fn,
                         const std::vector<torch::Tensor>& frozen = {},
                         const ProgressFn& progress = {});

} // namespace ctrlregen
