#pragma once

#include <Eigen/Dense>

#include <vector>

#include "prn/geometry.hpp"
#include "prn/types.hpp"

namespace prn {

inline constexpr double kDefaultAlignTol = 1e-10;
inline constexpr int kDefaultAlignMaxIter = 100;

// Result of aligning a batch to its own mean. `aligned[i] = rotations[i] *
// center(frames[i])` by construction; at convergence every aligned shape is
// Kabsch-stationary against `mean_shape`.
struct AlignmentState {
    std::vector<Rotation> rotations;
    ShapeBatch aligned;
    Shape3D mean_shape;
    double residual = 0.0;  // final value of the alignment objective
    int iterations = 0;
    bool converged = false;
    std::vector<double> objective_history;  // objective after each sweep

    int size() const { return aligned.size(); }
    int points() const { return aligned.points(); }
};

// Sum over frames of ||aligned_i - mean||_F^2.
inline double alignment_objective(const std::vector<Shape3D>& aligned, const Shape3D& mean) {
    double obj = 0.0;
    for (const auto& a : aligned) obj += (a - mean).squaredNorm();
    return obj;
}

// Generalized Procrustes alignment of a batch to its own mean, by
// block-coordinate descent: fix the mean of the aligned shapes, re-solve every
// rotation by Kabsch against it, recompute the mean. The objective is
// non-increasing per sweep. Stops when the relative objective decrease falls
// below `tol`; hitting `max_iter` first leaves `converged` false.
inline AlignmentState gpa_align(const ShapeBatch& batch,
                                double tol = kDefaultAlignTol,
                                int max_iter = kDefaultAlignMaxIter,
                                const std::vector<Rotation>* init_rotations = nullptr) {
    batch.validate();
    const int n_f = batch.size();
    if (n_f < 2) throw DimensionMismatch("gpa_align: need at least 2 frames");

    std::vector<Shape3D> centered(n_f);
    for (int i = 0; i < n_f; ++i) centered[i] = center(batch.frames[i]);

    AlignmentState state;
    state.rotations.assign(n_f, Rotation::Identity());
    if (init_rotations) {
        if (static_cast<int>(init_rotations->size()) != n_f)
            throw DimensionMismatch("gpa_align: warm-start rotation count mismatch");
        state.rotations = *init_rotations;
    }

    std::vector<Shape3D> aligned(n_f);
    for (int i = 0; i < n_f; ++i) aligned[i] = state.rotations[i] * centered[i];

    Shape3D mean = aligned[0];
    for (int i = 1; i < n_f; ++i) mean += aligned[i];
    mean /= static_cast<double>(n_f);

    double prev_obj = alignment_objective(aligned, mean);
    state.objective_history.push_back(prev_obj);

    for (int sweep = 0; sweep < max_iter; ++sweep) {
        for (int i = 0; i < n_f; ++i) {
            state.rotations[i] = kabsch_rotation(centered[i], mean);
            aligned[i] = state.rotations[i] * centered[i];
        }
        mean = aligned[0];
        for (int i = 1; i < n_f; ++i) mean += aligned[i];
        mean /= static_cast<double>(n_f);

        const double obj = alignment_objective(aligned, mean);
        state.objective_history.push_back(obj);
        state.iterations = sweep + 1;
        if (prev_obj - obj <= tol * prev_obj) {
            state.converged = true;
            prev_obj = obj;
            break;
        }
        prev_obj = obj;
    }

    state.aligned = ShapeBatch(std::move(aligned));
    state.mean_shape = mean;
    state.residual = prev_obj;
    return state;
}

// Columns are vec(aligned_i), column-major, so the matrix is 3 n_p x n_f.
inline Eigen::MatrixXd to_aligned_matrix(const AlignmentState& state) {
    const int n_f = state.size();
    const int n_p = state.points();
    Eigen::MatrixXd m(3 * n_p, n_f);
    for (int j = 0; j < n_f; ++j)
        m.col(j) = Eigen::Map<const Eigen::VectorXd>(state.aligned.frames[j].data(), 3 * n_p);
    return m;
}

inline ShapeBatch from_aligned_matrix(const Eigen::MatrixXd& m) {
    const int n_f = static_cast<int>(m.cols());
    const int n_p = static_cast<int>(m.rows()) / 3;
    std::vector<Shape3D> frames(n_f);
    for (int j = 0; j < n_f; ++j)
        frames[j] = Eigen::Map<const Shape3D>(m.col(j).data(), 3, n_p);
    return ShapeBatch(std::move(frames));
}

// Transversality probe: rotating any aligned shape by a random S and
// re-aligning it to the mean must recover the original shape. True iff every
// (frame, trial) pair passes at `tol` (relative Frobenius error).
inline bool check_transversality(const AlignmentState& state, int trial_rotations,
                                 double tol, std::uint64_t seed = 12345) {
    for (int i = 0; i < state.size(); ++i) {
        const Shape3D& x = state.aligned.frames[i];
        const double scale = std::max(x.norm(), 1e-300);
        for (int t = 0; t < trial_rotations; ++t) {
            const Rotation s = random_rotation(seed + 1000003ULL * static_cast<std::uint64_t>(i) + t);
            const Shape3D rotated = s * x;
            const Rotation r = kabsch_rotation(rotated, state.mean_shape);
            if ((r * rotated - x).norm() > tol * scale) return false;
        }
    }
    return true;
}

}  // namespace prn
