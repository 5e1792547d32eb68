#pragma once

// Trainer: Adam with a step-decay schedule, group-wise PR loss, batch-norm
// freezing, checkpointing and line-JSON logging. Single-threaded and fully
// deterministic for a fixed (seed, config, dataset).

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prn/dataset.hpp"
#include "prn/loss.hpp"
#include "prn/network.hpp"
#include "prn/types.hpp"

namespace prn {

struct TrainConfig {
    long total_iters = 20000;
    double lr0 = 1e-4;
    double lr_decay = 0.8;
    long decay_every = 5000;
    double lambda = 0.05;
    double bn_freeze_fraction = 0.7;
    SamplerConfig sampler;
    NetworkConfig network;
    std::uint64_t seed = 0;
    long checkpoint_every = 1000;
    bool sum_groups = true;    // sum group losses; false averages them
    bool warm_start = true;    // reuse the previous iteration's rotations per group slot
    double svd_rank_tol = 1e-8;

    void validate() const {
        if (total_iters < 1 || lr0 <= 0.0 || lr_decay <= 0.0 || lr_decay > 1.0 ||
            decay_every < 1 || lambda < 0.0 || bn_freeze_fraction < 0.0 ||
            bn_freeze_fraction > 1.0 || checkpoint_every < 1)
            throw InvalidSpec("TrainConfig: invalid field");
        sampler.validate();
        network.validate();
    }
};

struct AdamState {
    Eigen::VectorXd m, v;
    long step = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

// Standard bias-corrected Adam update on a flat parameter vector.
inline void adam_step(Eigen::VectorXd& theta, const Eigen::VectorXd& grads, AdamState& state,
                      double lr) {
    if (theta.size() != grads.size())
        throw DimensionMismatch("adam_step: parameter/gradient size mismatch");
    if (state.m.size() == 0) {
        state.m.setZero(theta.size());
        state.v.setZero(theta.size());
    }
    if (state.m.size() != theta.size())
        throw DimensionMismatch("adam_step: state size mismatch");
    state.step += 1;
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads;
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads.cwiseProduct(grads);
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    const Eigen::VectorXd mhat = state.m / bc1;
    const Eigen::VectorXd vhat = state.v / bc2;
    theta -= lr * (mhat.array() / (vhat.array().sqrt() + state.eps)).matrix();
}

inline double lr_at(long iter, const TrainConfig& cfg) {
    return cfg.lr0 * std::pow(cfg.lr_decay, static_cast<double>(iter / cfg.decay_every));
}

struct LogLine {
    long iter = 0;
    double lr = 0.0;
    double loss = 0.0;
    double data = 0.0;
    double reg = 0.0;

    std::string to_json() const {
        nlohmann::json j{{"iter", iter}, {"lr", lr}, {"loss", loss}, {"data", data}, {"reg", reg}};
        return j.dump();
    }
};

struct TrainResult {
    NetworkParams params;
    std::vector<LogLine> log;
};

// One training run. Per iteration: sample num_groups groups, forward each
// group, evaluate the PR loss and its gradient per group independently,
// back-propagate, sum parameter gradients across groups, Adam step. Batch
// norm switches to frozen statistics at bn_freeze_fraction of the run. Writes
// a line-JSON log entry per iteration to `log_out` when given, and periodic
// checkpoints under `ckpt_dir` when non-empty.
inline TrainResult train(const TrainConfig& cfg,
                         const std::vector<const SequenceDataset*>& data,
                         std::ostream* log_out = nullptr,
                         const std::string& ckpt_dir = std::string()) {
    cfg.validate();
    if (data.empty()) throw InsufficientData("train: no datasets");
    for (const auto* ds : data)
        if (ds->n_p != cfg.network.n_p)
            throw DimensionMismatch("train: dataset n_p does not match network config");

    TrainResult result;
    result.params = init_params(cfg.network, cfg.seed);
    AdamState adam;
    Eigen::VectorXd theta = flatten_trainable(result.params, cfg.network);

    LossConfig loss_cfg;
    loss_cfg.lambda = cfg.lambda;
    loss_cfg.svd_rank_tol = cfg.svd_rank_tol;

    const long freeze_at =
        static_cast<long>(std::floor(cfg.bn_freeze_fraction * static_cast<double>(cfg.total_iters)));
    std::vector<std::vector<Rotation>> warm(cfg.sampler.num_groups);

    if (!ckpt_dir.empty()) std::filesystem::create_directories(ckpt_dir);

    for (long iter = 0; iter < cfg.total_iters; ++iter) {
        if (iter >= freeze_at) freeze_batch_norm(result.params);
        const double lr = lr_at(iter, cfg);

        auto groups = sample_batch(data, cfg.sampler, iter);
        Eigen::VectorXd grad_acc = Eigen::VectorXd::Zero(theta.size());
        LogLine line;
        line.iter = iter;
        line.lr = lr;

        for (int g = 0; g < cfg.sampler.num_groups; ++g) {
            auto [shapes, trace] = forward(result.params, cfg.network, groups[g].inputs, Mode::train);
            ShapeBatch batch(std::move(shapes));

            const std::vector<Rotation>* warm_ptr = nullptr;
            if (cfg.warm_start && static_cast<int>(warm[g].size()) == batch.size())
                warm_ptr = &warm[g];
            LossGradient lg = pr_loss_and_grad(batch, groups[g].obs, loss_cfg, warm_ptr);
            if (cfg.warm_start && cfg.lambda > 0.0) warm[g] = lg.alignment.rotations;

            if (!std::isfinite(lg.value)) {
                nlohmann::json dump{{"iter", iter},
                                    {"group", g},
                                    {"loss", lg.value},
                                    {"data", lg.data_value},
                                    {"reg", lg.reg_value}};
                if (log_out) *log_out << dump.dump() << "\n";
                throw NonFiniteLoss("train: non-finite loss at iteration " + std::to_string(iter));
            }

            const double scale = cfg.sum_groups ? 1.0 : 1.0 / cfg.sampler.num_groups;
            line.loss += scale * lg.value;
            line.data += scale * lg.data_value;
            line.reg += scale * cfg.lambda * lg.reg_value;

            std::vector<Shape3D> grad_out = std::move(lg.grad);
            if (scale != 1.0)
                for (auto& gmat : grad_out) gmat *= scale;
            NetworkParams group_grads = backward(result.params, cfg.network, trace, grad_out);
            grad_acc += flatten_trainable(group_grads, cfg.network);
            commit_bn_updates(result.params, cfg.network, trace);
        }

        adam_step(theta, grad_acc, adam, lr);
        unflatten_trainable(result.params, cfg.network, theta);

        result.log.push_back(line);
        if (log_out) *log_out << line.to_json() << "\n";

        if (!ckpt_dir.empty() && ((iter + 1) % cfg.checkpoint_every == 0)) {
            std::ostringstream name;
            name << ckpt_dir << "/ckpt_" << (iter + 1) << ".ckpt";
            save_checkpoint(result.params, cfg.network, name.str());
        }
    }
    if (!ckpt_dir.empty())
        save_checkpoint(result.params, cfg.network, ckpt_dir + "/final.ckpt");
    return result;
}

inline TrainResult train(const TrainConfig& cfg, const SequenceDataset& data,
                         std::ostream* log_out = nullptr,
                         const std::string& ckpt_dir = std::string()) {
    std::vector<const SequenceDataset*> sets{&data};
    return train(cfg, sets, log_out, ckpt_dir);
}

}  // namespace prn
