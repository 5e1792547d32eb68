#pragma once

// Finite-difference verification of the analytic PR-loss gradient, runnable
// from the CLI. Central differences re-solve the alignment from a cold start
// at every probe, so they are independent of the Jacobian machinery they
// check.

#include <Eigen/Dense>

#include <ostream>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "prn/loss.hpp"
#include "prn/network.hpp"
#include "prn/types.hpp"

namespace prn {

struct GradCheckConfig {
    int n_f = 6;
    int n_p = 8;
    int batches = 20;
    double lambda = 0.05;
    double fd_step = 1e-5;
    double tol = 1e-4;
    std::uint64_t seed = 0;
    // Batches whose aligned matrix has two singular values closer than this
    // (relative to sigma_max) are skipped: the subgradient is set-valued there.
    double spectrum_gap = 1e-3;
};

struct GradCheckResult {
    std::vector<double> rel_errors;  // one per checked batch
    int skipped = 0;
    double worst = 0.0;
    bool passed = false;
};

namespace detail {

inline ShapeBatch random_shape_batch(int n_f, int n_p, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<Shape3D> frames(n_f);
    for (auto& f : frames) {
        f.resize(3, n_p);
        for (int c = 0; c < n_p; ++c)
            for (int r = 0; r < 3; ++r) f(r, c) = normal(rng);
    }
    return ShapeBatch(std::move(frames));
}

inline ObservationBatch random_observations(const ShapeBatch& batch, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    ObservationBatch obs;
    for (int i = 0; i < batch.size(); ++i) {
        Obs2D u(2, batch.points());
        for (int c = 0; c < batch.points(); ++c)
            for (int r = 0; r < 2; ++r) u(r, c) = normal(rng);
        obs.u.push_back(u);
        obs.w.push_back(Obs2D::Ones(2, batch.points()));
    }
    return obs;
}

inline bool spectrum_near_degenerate(const ShapeBatch& batch, const LossConfig& cfg,
                                     double gap) {
    const AlignmentState state = gpa_align(batch, cfg.align_tol, cfg.align_max_iter);
    const Eigen::VectorXd sigma =
        Eigen::JacobiSVD<Eigen::MatrixXd>(to_aligned_matrix(state)).singularValues();
    const double ref = sigma(0);
    for (int i = 0; i + 1 < sigma.size(); ++i)
        if (sigma(i) - sigma(i + 1) < gap * ref) return true;
    return sigma(sigma.size() - 1) < gap * ref;
}

}  // namespace detail

// Central-difference gradient of the full loss w.r.t. every shape coordinate.
inline std::vector<Shape3D> fd_loss_gradient(const ShapeBatch& batch, const ObservationBatch& obs,
                                             const LossConfig& cfg, double h) {
    std::vector<Shape3D> grads(batch.size());
    ShapeBatch probe = batch;
    for (int i = 0; i < batch.size(); ++i) {
        grads[i].resize(3, batch.points());
        for (int c = 0; c < batch.points(); ++c)
            for (int r = 0; r < 3; ++r) {
                const double saved = probe.frames[i](r, c);
                probe.frames[i](r, c) = saved + h;
                const double plus = pr_loss_value(probe, obs, cfg);
                probe.frames[i](r, c) = saved - h;
                const double minus = pr_loss_value(probe, obs, cfg);
                probe.frames[i](r, c) = saved;
                grads[i](r, c) = (plus - minus) / (2.0 * h);
            }
    }
    return grads;
}

inline double max_rel_error(const std::vector<Shape3D>& a, const std::vector<Shape3D>& b) {
    double diff = 0.0, scale = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        diff = std::max(diff, (a[i] - b[i]).cwiseAbs().maxCoeff());
        scale = std::max({scale, a[i].cwiseAbs().maxCoeff(), b[i].cwiseAbs().maxCoeff()});
    }
    return diff / std::max(scale, 1e-12);
}

// Runs the FD oracle over `batches` random non-degenerate instances. Prints a
// line-JSON record per batch when `out` is given.
inline GradCheckResult run_gradcheck(const GradCheckConfig& gc, std::ostream* out = nullptr) {
    LossConfig cfg;
    cfg.lambda = gc.lambda;

    GradCheckResult result;
    std::mt19937_64 rng(gc.seed);
    int attempts = 0;
    while (static_cast<int>(result.rel_errors.size()) < gc.batches && attempts < 50 * gc.batches) {
        ++attempts;
        const ShapeBatch batch = detail::random_shape_batch(gc.n_f, gc.n_p, rng);
        const ObservationBatch obs = detail::random_observations(batch, rng);
        if (detail::spectrum_near_degenerate(batch, cfg, gc.spectrum_gap)) {
            ++result.skipped;
            continue;
        }
        const LossGradient lg = pr_loss_and_grad(batch, obs, cfg);
        const std::vector<Shape3D> fd = fd_loss_gradient(batch, obs, cfg, gc.fd_step);
        const double rel = max_rel_error(lg.grad, fd);
        result.rel_errors.push_back(rel);
        result.worst = std::max(result.worst, rel);
        if (out) {
            nlohmann::json j{{"batch", result.rel_errors.size() - 1},
                             {"rel_error", rel},
                             {"loss", lg.value}};
            *out << j.dump() << "\n";
        }
    }
    result.passed =
        static_cast<int>(result.rel_errors.size()) == gc.batches && result.worst <= gc.tol;
    return result;
}

// Central-difference gradient of `loss_of_params` w.r.t. every trainable
// parameter; used to verify backward() end to end.
template <class LossFn>
Eigen::VectorXd fd_param_gradient(const NetworkParams& params, const NetworkConfig& cfg,
                                  LossFn&& loss_of_params, double h) {
    Eigen::VectorXd theta = flatten_trainable(params, cfg);
    Eigen::VectorXd grad(theta.size());
    NetworkParams probe = params;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
        const double saved = theta(i);
        theta(i) = saved + h;
        unflatten_trainable(probe, cfg, theta);
        const double plus = loss_of_params(probe);
        theta(i) = saved - h;
        unflatten_trainable(probe, cfg, theta);
        const double minus = loss_of_params(probe);
        theta(i) = saved;
        grad(i) = (plus - minus) / (2.0 * h);
    }
    unflatten_trainable(probe, cfg, theta);
    return grad;
}

}  // namespace prn
