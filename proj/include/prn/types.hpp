#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <vector>

namespace prn {

// A shape is a 3 x n_p matrix of point coordinates (arbitrary length units).
using Shape3D = Eigen::Matrix3Xd;
// A proper rotation: r^T r = I, det(r) = +1.
using Rotation = Eigen::Matrix3d;
// 2D observations / confidence weights: 2 x n_p.
using Obs2D = Eigen::Matrix2Xd;

struct PrnError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DegenerateShape : PrnError { using PrnError::PrnError; };
struct DimensionMismatch : PrnError { using PrnError::PrnError; };
struct NotConverged : PrnError { using PrnError::PrnError; };
struct SingularSystem : PrnError { using PrnError::PrnError; };
struct BatchTooSmall : PrnError { using PrnError::PrnError; };
struct TraceMismatch : PrnError { using PrnError::PrnError; };
struct IoError : PrnError { using PrnError::PrnError; };
struct SchemaError : PrnError { using PrnError::PrnError; };
struct InvalidSpec : PrnError { using PrnError::PrnError; };
struct InsufficientData : PrnError { using PrnError::PrnError; };
struct MissingGroundTruth : PrnError { using PrnError::PrnError; };
struct ZeroGroundTruth : PrnError { using PrnError::PrnError; };
struct NonFiniteLoss : PrnError { using PrnError::PrnError; };

// The n_f reconstructed shapes of one alignment group. All frames share one n_p.
struct ShapeBatch {
    std::vector<Shape3D> frames;

    ShapeBatch() = default;
    explicit ShapeBatch(std::vector<Shape3D> f) : frames(std::move(f)) {}

    int size() const { return static_cast<int>(frames.size()); }
    int points() const { return frames.empty() ? 0 : static_cast<int>(frames[0].cols()); }

    // Uniform n_p, finite entries. Alignment ops additionally require n_f >= 2.
    void validate() const {
        const int n_p = points();
        for (const auto& f : frames) {
            if (f.cols() != n_p)
                throw DimensionMismatch("ShapeBatch: inconsistent point count across frames");
            if (!f.allFinite())
                throw DimensionMismatch("ShapeBatch: non-finite entries");
        }
    }
};

inline bool is_rotation(const Rotation& r, double tol = 1e-9) {
    return ((r.transpose() * r) - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < tol &&
           std::abs(r.determinant() - 1.0) < tol;
}

}  // namespace prn
