#pragma once

#include <Eigen/Dense>

#include <utility>
#include <vector>

#include "prn/dataset.hpp"
#include "prn/geometry.hpp"
#include "prn/network.hpp"
#include "prn/types.hpp"

namespace prn {

// Mean per-joint position error: mean over points of Euclidean distance.
inline double mpjpe(const Shape3D& pred, const Shape3D& gt) {
    if (pred.cols() != gt.cols()) throw DimensionMismatch("mpjpe: point counts differ");
    return (pred - gt).colwise().norm().mean();
}

// Normalized error: ||pred - gt||_F / ||gt||_F.
inline double normalized_error(const Shape3D& pred, const Shape3D& gt) {
    if (pred.cols() != gt.cols()) throw DimensionMismatch("normalized_error: point counts differ");
    const double denom = gt.norm();
    if (denom == 0.0) throw ZeroGroundTruth("normalized_error: ground truth is zero");
    return (pred - gt).norm() / denom;
}

inline Shape3D reflect_z(const Shape3D& s) {
    Shape3D r = s;
    r.row(2) = -r.row(2);
    return r;
}

// Orthographic projection cannot distinguish a shape from its depth-negated
// mirror; evaluate both and keep the better. Second element reports whether
// the reflected candidate won (strictly).
template <class Metric>
std::pair<double, bool> eval_with_reflection(const Shape3D& pred, const Shape3D& gt,
                                             Metric&& metric) {
    const double plain = metric(pred, gt);
    const double mirrored = metric(reflect_z(pred), gt);
    if (mirrored < plain) return {mirrored, true};
    return {plain, false};
}

struct EvalReport {
    double mpjpe = 0.0;
    double ne = 0.0;
    std::vector<double> per_frame_mpjpe;
    std::vector<double> per_frame_ne;
    std::vector<bool> reflection_used;  // choice made by the normalized error
};

// Per-frame eval-mode forward, reflection-disambiguated metrics, aggregated
// means. Translation is unobservable under orthographic projection, so both
// prediction and ground truth are centered before comparison.
inline EvalReport evaluate(const NetworkParams& params, const NetworkConfig& cfg,
                           const SequenceDataset& dataset) {
    if (dataset.n_p != cfg.n_p) throw DimensionMismatch("evaluate: point count mismatch");
    EvalReport report;
    for (const Frame& fr : dataset.frames) {
        if (!fr.x3d_gt) throw MissingGroundTruth("evaluate: frame without 3D ground truth");
        const auto [shapes, trace] =
            forward(params, cfg, obs_to_input(fr.u), Mode::eval);
        const Shape3D pred = center(shapes[0]);
        const Shape3D gt = center(*fr.x3d_gt);
        const auto [ne, reflected] = eval_with_reflection(pred, gt, normalized_error);
        const auto [pj, pj_reflected] = eval_with_reflection(pred, gt, mpjpe);
        report.per_frame_ne.push_back(ne);
        report.per_frame_mpjpe.push_back(pj);
        report.reflection_used.push_back(reflected);
        (void)pj_reflected;
    }
    const double n = static_cast<double>(dataset.size());
    for (double v : report.per_frame_ne) report.ne += v / n;
    for (double v : report.per_frame_mpjpe) report.mpjpe += v / n;
    return report;
}

}  // namespace prn
