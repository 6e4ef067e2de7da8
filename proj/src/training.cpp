// SPDX-License-Identifier: Apache-2.0

#include "ctrlregen/training.hpp"

#include <cmath>
#include <iostream>

namespace ctrlregen {

nlohmann::json TrainConfig::to_json() const {
    return {{"steps", steps}, {"batch_size", batch_size}, {"lr", lr}, {"weight_decay", weight_decay},
            {"grad_clip", grad_clip}, {"log_every", log_every}, {"val_batches", val_batches},
            {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }

TrainConfig TrainConfig::from_json(const nlohmann::json& j, TrainConfig d) {
    d.steps = j.value("steps", d.steps);
    d.batch_size = j.value("batch_size", d.batch_size);
    d.lr = j.value("lr", d.lr);
    d.weight_decay = j.value("weight_decay", d.weight_decay);
    d.grad_clip = j.value("grad_clip", d.grad_clip);
    d.log_every = j.value("log_every", d.log_every);
    d.val_batches = j.value("val_batches", d.val_batches);
    d.seed = j.value("seed", d.seed);
    if (d.steps < 0 || d.batch_size < 1 || !(d.lr > 0.0)) {
        throw RangeError("train config: need steps >= 0, batch_size >= 1, lr > 0");
    }
    return d;
}

nlohmann::json TrainReport::to_json() const {
    return {{"initial_train_loss", initial_train_loss}, {"final_train_loss", final_train_loss},
            {"val_loss_before", val_loss_before}, {"val_loss_after", val_loss_after},
            {"steps", steps}, {"loss_curve", loss_curve}};
}

BatchSampler::BatchSampler(int64_t population, std::uint64_t seed)
    : population_(population), gen_(make_generator(seed)) {
    if (population_ < 1) throw DataError("batch sampler: empty population");
}

torch::Tensor BatchSampler::next(int64_t batch) {
    return torch::randint(population_, {batch}, gen_, torch::kLong);
}

torch::Tensor sample_timesteps(int64_t batch, int T, at::Generator& gen) {
    return torch::randint(1, T + 1, {batch}, gen, torch::kLong);
}

void check_finite_loss(double loss, const std::string& stage, int step) {
    if (!std::isfinite(loss)) {
        throw TrainingError(stage + ": non-finite loss at step " + std::to_string(step));
    }
}

void assert_no_frozen_grads(const std::vector<torch::Tensor>& frozen, const std::string& stage) {
    for (const auto& p : frozen) {
        if (p.requires_grad() || (p.grad().defined() && p.grad().abs().sum().item<double>() != 0.0)) {
            throw FrozenParameterError(stage + ": a frozen parameter is set up to receive updates");
        }
    }
}

TrainReport run_training(const std::string& stage, std::vector<torch::Tensor> params,
                         const TrainConfig& cfg, const std::function<torch::Tensor(int)>& loss_fn,
                         const std::function<double()>& val_loss_fn,
                         const std::vector<torch::Tensor>& frozen, const ProgressFn& progress) {
    TrainReport report;
    assert_no_frozen_grads(frozen, stage);
    const auto frozen_sum = checksum(frozen);
    if (val_loss_fn) report.val_loss_before = val_loss_fn();
    if (cfg.steps == 0) {
        report.val_loss_after = report.val_loss_before;
        return report;
    }
    torch::optim::Adam opt(params, torch::optim::AdamOptions(cfg.lr).weight_decay(cfg.weight_decay));
    double ema = 0.0;
    double window = 0.0;
    int window_n = 0;
    for (int step = 0; step < cfg.steps; ++step) {
        opt.zero_grad();
        auto loss = loss_fn(step);
        const double lv = loss.item<double>();
        check_finite_loss(lv, stage, step);
        loss.backward();
        if (cfg.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(params, cfg.grad_clip);
        opt.step();
        if (step == 0) {
            report.initial_train_loss = lv;
            ema = lv;
        }
        ema = 0.98 * ema + 0.02 * lv;
        window += lv;
        ++window_n;
        if (cfg.log_every > 0 && ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps)) {
            report.loss_curve.push_back(window / window_n);
            if (progress) progress(step + 1, window / window_n);
            window = 0.0;
            window_n = 0;
        }
    }
    report.final_train_loss = ema;
    report.steps = cfg.steps;
    assert_no_frozen_grads(frozen, stage);
    if (checksum(frozen) != frozen_sum) {
        throw FrozenParameterError(stage + ": frozen parameter checksum changed during training");
    }
    if (val_loss_fn) report.val_loss_after = val_loss_fn();
    return report;
}

} // namespace ctrlregen
