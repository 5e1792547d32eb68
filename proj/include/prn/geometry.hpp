#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <random>

#include "prn/types.hpp"

namespace prn {

// Centering: shape * T with T = I - (1/n_p) 1 1^T, applied as "subtract the
// mean point" so the n_p x n_p matrix is never formed.
inline Shape3D center(const Shape3D& shape) {
    if (shape.cols() == 0) return shape;
    return shape.colwise() - shape.rowwise().mean();
}

inline bool is_centered(const Shape3D& shape, double tol = 1e-9) {
    if (shape.cols() == 0) return true;
    return shape.rowwise().mean().cwiseAbs().maxCoeff() < tol;
}

// Second singular value below this fraction of the largest marks the
// cross-covariance as rank <= 1, i.e. the aligning rotation is not unique.
inline constexpr double kDegenerateSigmaRatio = 1e-8;

// Rotation R minimizing ||R * shape - reference||_F over proper rotations,
// via SVD of the 3x3 cross-covariance with determinant sign correction.
// Both shapes are expected centered with matching n_p.
inline Rotation kabsch_rotation(const Shape3D& shape, const Shape3D& reference) {
    if (shape.cols() != reference.cols())
        throw DimensionMismatch("kabsch_rotation: point counts differ");

    const Eigen::Matrix3d cov = reference * shape.transpose();
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::Vector3d sigma = svd.singularValues();
    if (sigma(1) <= kDegenerateSigmaRatio * sigma(0))
        throw DegenerateShape("kabsch_rotation: cross-covariance has rank <= 1");

    Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
    return svd.matrixU() * d * svd.matrixV().transpose();
}

// Haar-uniform proper rotation, deterministic for a fixed seed
// (unit quaternion from four normal draws).
inline Rotation random_rotation(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::Vector4d q;
    do {
        for (int i = 0; i < 4; ++i) q(i) = normal(rng);
    } while (q.norm() < 1e-12);
    q.normalize();
    const double w = q(0), x = q(1), y = q(2), z = q(3);
    Rotation r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
         2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y);
    return r;
}

// Angle of a rotation, in radians.
inline double rotation_angle(const Rotation& r) {
    const double c = std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
    return std::acos(c);
}

}  // namespace prn
