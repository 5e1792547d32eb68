#pragma once

// The trainable Procrustean-regression loss: reprojection data term plus a
// nuclear-norm penalty on the matrix of aligned shapes, with the exact
// gradient w.r.t. the raw shapes taken *through* the alignment.
//
// The aligned shapes X'_i = R_i X_i T depend on X both explicitly and through
// the stationarity of the alignment. Differentiating the stationarity
// conditions yields, for the vectorized quantities,
//
//     d(aligned) / d(shapes) = (A B^+ C + I) D
//
// where A, C, D act frame-wise and only B (3 n_f x 3 n_f) is ever formed
// densely. B carries a 3-dimensional null space (the free global rotation of
// the aligned set), so the solve uses a truncated eigendecomposition; the
// gauge component is annihilated by C^T and never reaches the gradient.

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <optional>
#include <vector>

#include "prn/align.hpp"
#include "prn/types.hpp"

namespace prn {

// 2D ground-truth points with per-entry confidence weights in [0,1]
// (0 = unobserved).
struct ObservationBatch {
    std::vector<Obs2D> u;
    std::vector<Obs2D> w;

    int size() const { return static_cast<int>(u.size()); }

    void validate_against(const ShapeBatch& batch) const {
        if (size() != batch.size() || w.size() != u.size())
            throw DimensionMismatch("ObservationBatch: frame count mismatch");
        for (int i = 0; i < size(); ++i) {
            if (u[i].cols() != batch.points() || w[i].cols() != batch.points())
                throw DimensionMismatch("ObservationBatch: point count mismatch");
            if ((w[i].array() < 0.0).any() || (w[i].array() > 1.0).any())
                throw DimensionMismatch("ObservationBatch: weights outside [0,1]");
        }
    }
};

struct LossConfig {
    double lambda = 0.05;        // weight of the nuclear-norm term
    double svd_rank_tol = 1e-8;  // sigma <= tol * sigma_max counts as zero in sign(Sigma)
    enum class SolveMode { pseudo_inverse } solve_mode = SolveMode::pseudo_inverse;
    // Alignment re-solve inside the loss. Tighter than the gpa_align defaults:
    // the gradient is exact only at a stationary point, and finite-difference
    // verification at h = 1e-5 needs stationarity noise well below that.
    double align_tol = 1e-13;
    int align_max_iter = 300;
    double gauge_tol = 1e-8;  // B eigenvalues below tol * |lambda|_max are treated as gauge
};

struct LossGradient {
    double value = 0.0;     // J
    double data_value = 0.0;
    double reg_value = 0.0;
    std::vector<Shape3D> grad;  // dJ/dX_i per frame
    AlignmentState alignment;   // state the gradient was evaluated at
};

// --- data term -------------------------------------------------------------

// f = sum_i 1/2 || (U_i - P_o X_i) .* W_i ||_F^2 with P_o the orthographic
// projector (top two rows of the identity).
inline double data_term(const ShapeBatch& batch, const ObservationBatch& obs) {
    obs.validate_against(batch);
    double f = 0.0;
    for (int i = 0; i < batch.size(); ++i) {
        const Eigen::Matrix2Xd proj = batch.frames[i].topRows(2);
        f += 0.5 * ((obs.u[i] - proj).cwiseProduct(obs.w[i])).squaredNorm();
    }
    return f;
}

// df/dX_i = P_o^T ((P_o X_i - U_i) .* W_i .* W_i); the z-row is zero.
inline std::vector<Shape3D> data_term_grad(const ShapeBatch& batch, const ObservationBatch& obs) {
    obs.validate_against(batch);
    std::vector<Shape3D> grads(batch.size());
    for (int i = 0; i < batch.size(); ++i) {
        const Eigen::Matrix2Xd proj = batch.frames[i].topRows(2);
        const Eigen::Matrix2Xd g2 =
            (proj - obs.u[i]).cwiseProduct(obs.w[i]).cwiseProduct(obs.w[i]);
        grads[i] = Shape3D::Zero(3, batch.points());
        grads[i].topRows(2) = g2;
    }
    return grads;
}

// --- nuclear norm ------------------------------------------------------------

inline double nuclear_norm(const Eigen::MatrixXd& m) {
    return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues().sum();
}

// U sign(Sigma) V^T; singular values at or below rank_tol * sigma_max count as
// zero so the subgradient stays bounded at rank-deficient points.
inline Eigen::MatrixXd nuclear_norm_subgrad(const Eigen::MatrixXd& m, double rank_tol) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd sigma = svd.singularValues();
    const double cutoff = rank_tol * (sigma.size() > 0 ? sigma(0) : 0.0);
    Eigen::VectorXd sign = (sigma.array() > cutoff).cast<double>();
    return svd.matrixU() * sign.asDiagonal() * svd.matrixV().transpose();
}

// --- Jacobian blocks ---------------------------------------------------------

// Infinitesimal-rotation generator. Sign convention matches L below:
// vec(skew_gen(q)) = L q.
inline Eigen::Matrix3d skew_gen(const Eigen::Vector3d& q) {
    Eigen::Matrix3d s;
    s <<     0,  q(2), -q(1),
         -q(2),     0,  q(0),
          q(1), -q(0),     0;
    return s;
}

// The constant 9x3 matrix mapping a 3-vector to the vectorized generator.
inline Eigen::Matrix<double, 9, 3> build_L() {
    Eigen::Matrix<double, 9, 3> l = Eigen::Matrix<double, 9, 3>::Zero();
    l(1, 2) = -1; l(2, 1) = 1;
    l(3, 2) = 1;  l(5, 0) = -1;
    l(6, 1) = -1; l(7, 0) = 1;
    return l;
}

// L^T vec(H) for a 3x3 H: extracts twice the generator coordinates of the
// antisymmetric part.
inline Eigen::Vector3d lt_vec(const Eigen::Matrix3d& h) {
    return {h(1, 2) - h(2, 1), h(2, 0) - h(0, 2), h(0, 1) - h(1, 0)};
}

// 9x9 permutation with E vec(H) = vec(H^T) for 3x3 H.
inline Eigen::Matrix<double, 9, 9> build_E9() {
    Eigen::Matrix<double, 9, 9> e = Eigen::Matrix<double, 9, 9>::Zero();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) e(i + 3 * j, j + 3 * i) = 1.0;
    return e;
}

// The pieces of d(aligned)/d(shapes) = (A B^+ C + I) D, evaluated at a
// converged alignment. A, C and D are kept as frame-wise operators over
// `xprime` and `rotations`; only B is dense.
struct JacobianBlocks {
    Eigen::Matrix<double, 9, 3> L;
    Eigen::Matrix<double, 9, 9> E;
    Eigen::MatrixXd B;                 // 3 n_f x 3 n_f
    std::vector<Shape3D> xprime;       // aligned shapes X'_i at evaluation
    std::vector<Rotation> rotations;   // converged rotations
    Shape3D sum_xprime;                // sum_k X'_k

    int frames() const { return static_cast<int>(xprime.size()); }
    int points() const { return xprime.empty() ? 0 : static_cast<int>(xprime[0].cols()); }

    // y_i = A_i^T vec(G_i) = L^T vec(G_i X'_i^T), stacked into R^{3 n_f}.
    Eigen::VectorXd apply_A_transpose(const std::vector<Shape3D>& g) const {
        Eigen::VectorXd y(3 * frames());
        for (int i = 0; i < frames(); ++i)
            y.segment<3>(3 * i) = lt_vec(g[i] * xprime[i].transpose());
        return y;
    }

    // (A q)_i = skew_gen(q_i) X'_i.
    std::vector<Shape3D> apply_A(const Eigen::VectorXd& q) const {
        std::vector<Shape3D> out(frames());
        for (int i = 0; i < frames(); ++i)
            out[i] = skew_gen(q.segment<3>(3 * i)) * xprime[i];
        return out;
    }

    // Row i of C vec(dX'): -L^T vec(dX'_i sum_{k!=i} X'_k^T) - L^T vec(X'_i sum_{k!=i} dX'_k^T).
    Eigen::VectorXd apply_C(const std::vector<Shape3D>& dxp) const {
        Shape3D dsum = Shape3D::Zero(3, points());
        for (const auto& d : dxp) dsum += d;
        Eigen::VectorXd out(3 * frames());
        for (int i = 0; i < frames(); ++i) {
            const Eigen::Matrix3d h1 = dxp[i] * (sum_xprime - xprime[i]).transpose();
            const Eigen::Matrix3d h2 = xprime[i] * (dsum - dxp[i]).transpose();
            out.segment<3>(3 * i) = -lt_vec(h1) - lt_vec(h2);
        }
        return out;
    }

    // (C^T z)_j = sum_i skew_gen(z_i) X'_i - skew_gen(z_j) sum_k X'_k.
    // A constant z (the gauge direction) maps to zero.
    std::vector<Shape3D> apply_C_transpose(const Eigen::VectorXd& z) const {
        Shape3D p = Shape3D::Zero(3, points());
        for (int i = 0; i < frames(); ++i)
            p += skew_gen(z.segment<3>(3 * i)) * xprime[i];
        std::vector<Shape3D> out(frames());
        for (int j = 0; j < frames(); ++j)
            out[j] = p - skew_gen(z.segment<3>(3 * j)) * sum_xprime;
        return out;
    }

    // (D^T v)_i = R_i^T V_i T  (T symmetric, applied as column centering).
    std::vector<Shape3D> apply_D_transpose(const std::vector<Shape3D>& v) const {
        std::vector<Shape3D> out(frames());
        for (int i = 0; i < frames(); ++i)
            out[i] = center(rotations[i].transpose() * v[i]);
        return out;
    }

    // (D dx)_i = R_i dX_i T.
    std::vector<Shape3D> apply_D(const std::vector<Shape3D>& dx) const {
        std::vector<Shape3D> out(frames());
        for (int i = 0; i < frames(); ++i)
            out[i] = rotations[i] * center(dx[i]);
        return out;
    }
};

namespace detail {

inline Eigen::Matrix<double, 9, 9> kron_m_i3(const Eigen::Matrix3d& m) {
    Eigen::Matrix<double, 9, 9> k = Eigen::Matrix<double, 9, 9>::Zero();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            k.block<3, 3>(3 * i, 3 * j) = m(i, j) * Eigen::Matrix3d::Identity();
    return k;
}

inline Eigen::Matrix<double, 9, 9> kron_i3_m(const Eigen::Matrix3d& m) {
    Eigen::Matrix<double, 9, 9> k = Eigen::Matrix<double, 9, 9>::Zero();
    for (int i = 0; i < 3; ++i) k.block<3, 3>(3 * i, 3 * i) = m;
    return k;
}

}  // namespace detail

// Builds B (and the operator data for A, C, D) from a converged alignment.
// Diagonal blocks b_ii = L^T (sum_{k!=i} X'_k X'_i^T (x) I_3) L, off-diagonal
// b_ij = L^T (I_3 (x) X'_i X'_j^T) E L.
inline JacobianBlocks assemble_jacobian_blocks(const AlignmentState& state,
                                               const ShapeBatch& batch) {
    if (!state.converged)
        throw NotConverged("assemble_jacobian_blocks: alignment did not converge");
    if (state.size() != batch.size() || state.points() != batch.points())
        throw DimensionMismatch("assemble_jacobian_blocks: state/batch mismatch");

    JacobianBlocks blocks;
    blocks.L = build_L();
    blocks.E = build_E9();
    blocks.xprime = state.aligned.frames;
    blocks.rotations = state.rotations;

    const int n_f = state.size();
    const int n_p = state.points();
    blocks.sum_xprime = Shape3D::Zero(3, n_p);
    for (const auto& x : blocks.xprime) blocks.sum_xprime += x;

    blocks.B.setZero(3 * n_f, 3 * n_f);
    for (int i = 0; i < n_f; ++i) {
        const Eigen::Matrix3d m_i =
            (blocks.sum_xprime - blocks.xprime[i]) * blocks.xprime[i].transpose();
        blocks.B.block<3, 3>(3 * i, 3 * i) =
            blocks.L.transpose() * detail::kron_m_i3(m_i) * blocks.L;
        for (int j = 0; j < n_f; ++j) {
            if (j == i) continue;
            const Eigen::Matrix3d m_ij = blocks.xprime[i] * blocks.xprime[j].transpose();
            blocks.B.block<3, 3>(3 * i, 3 * j) =
                blocks.L.transpose() * detail::kron_i3_m(m_ij) * blocks.E * blocks.L;
        }
    }
    return blocks;
}

// Pulls a gradient w.r.t. the aligned shapes back through the alignment:
// grad^T (A B^+ C + I) D, reshaped per frame. B is solved by a truncated
// eigendecomposition; a null space larger than the 3-dimensional gauge means
// the batch itself is degenerate.
inline std::vector<Shape3D> alignment_backward(const JacobianBlocks& blocks,
                                               const std::vector<Shape3D>& grad_aligned,
                                               double gauge_tol = 1e-8) {
    const int n_f = blocks.frames();
    if (static_cast<int>(grad_aligned.size()) != n_f)
        throw DimensionMismatch("alignment_backward: gradient frame count mismatch");

    const Eigen::VectorXd y = blocks.apply_A_transpose(grad_aligned);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(blocks.B);
    const Eigen::VectorXd lam = eig.eigenvalues();
    const double lam_max = lam.cwiseAbs().maxCoeff();
    int null_dim = 0;
    Eigen::VectorXd inv_lam(lam.size());
    for (int i = 0; i < lam.size(); ++i) {
        if (std::abs(lam(i)) <= gauge_tol * lam_max) {
            inv_lam(i) = 0.0;
            ++null_dim;
        } else {
            inv_lam(i) = 1.0 / lam(i);
        }
    }
    if (null_dim > 3)
        throw SingularSystem("alignment_backward: B rank deficiency exceeds the gauge");

    const Eigen::VectorXd z =
        eig.eigenvectors() * inv_lam.asDiagonal() * (eig.eigenvectors().transpose() * y);

    std::vector<Shape3D> v = blocks.apply_C_transpose(z);
    for (int i = 0; i < n_f; ++i) v[i] += grad_aligned[i];
    return blocks.apply_D_transpose(v);
}

// --- full loss ---------------------------------------------------------------

// J = data term + lambda * ||aligned matrix||_*. The alignment is re-solved on
// this call (optionally warm-started); value only, no gradient machinery.
inline double pr_loss_value(const ShapeBatch& batch, const ObservationBatch& obs,
                            const LossConfig& cfg,
                            const std::vector<Rotation>* warm_start = nullptr) {
    const double f = data_term(batch, obs);
    if (cfg.lambda == 0.0) return f;
    const AlignmentState state =
        gpa_align(batch, cfg.align_tol, cfg.align_max_iter, warm_start);
    return f + cfg.lambda * nuclear_norm(to_aligned_matrix(state));
}

// J and dJ/dX_i. The regularizer gradient is the nuclear-norm subgradient
// pulled back through the alignment; rotations are a function of the shapes,
// re-solved here rather than carried as state.
inline LossGradient pr_loss_and_grad(const ShapeBatch& batch, const ObservationBatch& obs,
                                     const LossConfig& cfg,
                                     const std::vector<Rotation>* warm_start = nullptr) {
    if (batch.size() < 2) throw DimensionMismatch("pr_loss_and_grad: need at least 2 frames");
    LossGradient out;
    out.data_value = data_term(batch, obs);
    out.grad = data_term_grad(batch, obs);

    if (cfg.lambda == 0.0) {
        out.value = out.data_value;
        return out;
    }

    out.alignment = gpa_align(batch, cfg.align_tol, cfg.align_max_iter, warm_start);
    const Eigen::MatrixXd aligned = to_aligned_matrix(out.alignment);
    out.reg_value = nuclear_norm(aligned);
    out.value = out.data_value + cfg.lambda * out.reg_value;

    const Eigen::MatrixXd subgrad = nuclear_norm_subgrad(aligned, cfg.svd_rank_tol);
    std::vector<Shape3D> grad_aligned(batch.size());
    for (int j = 0; j < batch.size(); ++j)
        grad_aligned[j] = Eigen::Map<const Shape3D>(subgrad.col(j).data(), 3, batch.points());

    const JacobianBlocks blocks = assemble_jacobian_blocks(out.alignment, batch);
    const std::vector<Shape3D> reg_grad =
        alignment_backward(blocks, grad_aligned, cfg.gauge_tol);
    for (int i = 0; i < batch.size(); ++i) out.grad[i] += cfg.lambda * reg_grad[i];
    return out;
}

}  // namespace prn
