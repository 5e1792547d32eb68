#pragma once

// Synthetic non-rigid sequences, sequence file I/O (prn-seq-v1 JSON), and the
// mini-batch sampling strategies used for training.
//
// World shapes are weighted sums of K random centered basis shapes with
// temporally smoothed coefficients. Every camera observes the same world
// sequence from its own slowly rotating viewpoint; observations are
// orthographic projections of the camera-frame shapes.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prn/geometry.hpp"
#include "prn/loss.hpp"
#include "prn/types.hpp"

namespace prn {

inline constexpr const char* kDatasetFormat = "prn-seq-v1";

struct SyntheticSpec {
    int n_p = 15;
    int n_frames = 100;       // world time steps; each camera sees all of them
    int rank = 3;             // number of basis shapes K
    double coeff_smoothness = 8.0;  // moving-average window (frames)
    double rotation_speed = 0.02;   // radians per frame around each camera's axis
    int num_cameras = 1;
    double noise_std = 0.0;   // 2D observation noise
    double missing_rate = 0.0;
    double fps = 10.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_p < 3 || n_frames < 1 || rank < 1 || rank > 3 * n_p || num_cameras < 1 ||
            missing_rate < 0.0 || missing_rate > 1.0 || noise_std < 0.0 || fps <= 0.0)
            throw InvalidSpec("SyntheticSpec: invalid field");
    }
};

struct Frame {
    Obs2D u;                       // 2 x n_p observations (masked points zeroed)
    Obs2D w;                       // 2 x n_p weights in [0,1]
    std::optional<Shape3D> x3d_gt; // camera-frame ground truth
    int camera_id = 0;
    double time = 0.0;
};

struct SequenceDataset {
    std::vector<Frame> frames;
    int n_p = 0;
    std::string name;
    double fps = 0.0;
    std::string units = "m";

    int size() const { return static_cast<int>(frames.size()); }
};

// --- generation ---------------------------------------------------------------

inline SequenceDataset generate(const SyntheticSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> normal(0.0, 1.0);

    // Centered basis shapes.
    std::vector<Shape3D> basis(spec.rank);
    for (auto& b : basis) {
        b.resize(3, spec.n_p);
        for (int c = 0; c < spec.n_p; ++c)
            for (int r = 0; r < 3; ++r) b(r, c) = normal(rng);
        b = center(b);
    }

    // Smoothed coefficients: moving average over i.i.d. normals, rescaled so
    // the smoothing window does not shrink the shapes.
    const int window = std::max(1, static_cast<int>(std::lround(spec.coeff_smoothness)));
    Eigen::MatrixXd raw(spec.rank, spec.n_frames + window - 1);
    for (Eigen::Index j = 0; j < raw.cols(); ++j)
        for (int k = 0; k < spec.rank; ++k) raw(k, j) = normal(rng);
    Eigen::MatrixXd coeff(spec.rank, spec.n_frames);
    for (int t = 0; t < spec.n_frames; ++t)
        coeff.col(t) = raw.middleCols(t, window).rowwise().mean() * std::sqrt(double(window));

    std::vector<Shape3D> world(spec.n_frames);
    for (int t = 0; t < spec.n_frames; ++t) {
        world[t] = Shape3D::Zero(3, spec.n_p);
        for (int k = 0; k < spec.rank; ++k) world[t] += coeff(k, t) * basis[k];
    }

    // Per-camera base orientation and rotation axis.
    std::vector<Rotation> cam_base(spec.num_cameras);
    std::vector<Eigen::Vector3d> cam_axis(spec.num_cameras);
    for (int c = 0; c < spec.num_cameras; ++c) {
        cam_base[c] = random_rotation(rng());
        Eigen::Vector3d a;
        do {
            a << normal(rng), normal(rng), normal(rng);
        } while (a.norm() < 1e-9);
        cam_axis[c] = a.normalized();
    }

    SequenceDataset ds;
    ds.n_p = spec.n_p;
    ds.fps = spec.fps;
    ds.name = "synthetic";
    ds.frames.reserve(static_cast<size_t>(spec.n_frames) * spec.num_cameras);

    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int t = 0; t < spec.n_frames; ++t) {
        for (int c = 0; c < spec.num_cameras; ++c) {
            Frame fr;
            fr.camera_id = c;
            fr.time = static_cast<double>(t) / spec.fps;
            const double angle = spec.rotation_speed * static_cast<double>(t);
            const Rotation spin(Eigen::AngleAxisd(angle, cam_axis[c]));
            const Shape3D x_cam = spin * cam_base[c] * world[t];
            fr.x3d_gt = x_cam;
            fr.u = x_cam.topRows(2);
            fr.w = Obs2D::Ones(2, spec.n_p);
            if (spec.noise_std > 0.0)
                for (int p = 0; p < spec.n_p; ++p)
                    for (int r = 0; r < 2; ++r) fr.u(r, p) += spec.noise_std * normal(rng);
            if (spec.missing_rate > 0.0)
                for (int p = 0; p < spec.n_p; ++p)
                    if (unif(rng) < spec.missing_rate) {
                        fr.u.col(p).setZero();
                        fr.w.col(p).setZero();
                    }
            ds.frames.push_back(std::move(fr));
        }
    }
    return ds;
}

// --- file I/O ------------------------------------------------------------------

namespace detail {

inline nlohmann::json rows_to_json(const Eigen::MatrixXd& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Eigen::MatrixXd rows_from_json(const nlohmann::json& j, int rows, int cols,
                                      const char* what) {
    if (!j.is_array() || static_cast<int>(j.size()) != rows)
        throw SchemaError(std::string("dataset: bad row count in ") + what);
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r) {
        const auto& row = j[r];
        if (!row.is_array() || static_cast<int>(row.size()) != cols)
            throw SchemaError(std::string("dataset: bad column count in ") + what);
        for (int c = 0; c < cols; ++c) {
            if (!row[c].is_number())
                throw SchemaError(std::string("dataset: non-numeric entry in ") + what);
            m(r, c) = row[c].get<double>();
        }
    }
    return m;
}

}  // namespace detail

inline void save_dataset(const SequenceDataset& ds, const std::string& path) {
    nlohmann::json j;
    j["format"] = kDatasetFormat;
    j["n_p"] = ds.n_p;
    j["fps"] = ds.fps;
    j["units"] = ds.units;
    if (!ds.name.empty()) j["name"] = ds.name;
    nlohmann::json frames = nlohmann::json::array();
    for (const auto& fr : ds.frames) {
        nlohmann::json jf;
        jf["camera_id"] = fr.camera_id;
        jf["time"] = fr.time;
        jf["u"] = detail::rows_to_json(fr.u);
        jf["w"] = detail::rows_to_json(fr.w);
        jf["x3d_gt"] = fr.x3d_gt ? detail::rows_to_json(*fr.x3d_gt) : nlohmann::json();
        frames.push_back(std::move(jf));
    }
    j["frames"] = std::move(frames);
    std::ofstream out(path);
    if (!out) throw IoError("cannot open dataset for writing: " + path);
    out << j.dump();
    if (!out) throw IoError("failed writing dataset: " + path);
}

inline SequenceDataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("dataset parse error: ") + e.what());
    }
    try {
        if (j.at("format").get<std::string>() != kDatasetFormat)
            throw SchemaError("dataset: unknown format tag");
        SequenceDataset ds;
        ds.n_p = j.at("n_p").get<int>();
        ds.fps = j.at("fps").get<double>();
        ds.units = j.at("units").get<std::string>();
        ds.name = j.value("name", std::string());
        if (ds.n_p < 1) throw SchemaError("dataset: n_p must be positive");
        for (const auto& jf : j.at("frames")) {
            Frame fr;
            fr.camera_id = jf.at("camera_id").get<int>();
            fr.time = jf.at("time").get<double>();
            fr.u = detail::rows_from_json(jf.at("u"), 2, ds.n_p, "u");
            fr.w = detail::rows_from_json(jf.at("w"), 2, ds.n_p, "w");
            if ((fr.w.array() < 0.0).any() || (fr.w.array() > 1.0).any())
                throw SchemaError("dataset: weight outside [0,1]");
            const auto& jgt = jf.at("x3d_gt");
            if (!jgt.is_null()) fr.x3d_gt = detail::rows_from_json(jgt, 3, ds.n_p, "x3d_gt");
            ds.frames.push_back(std::move(fr));
        }
        return ds;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("dataset schema error: ") + e.what());
    }
}

// --- sampling -------------------------------------------------------------------

struct SamplerConfig {
    enum class Strategy { sequential_stride, camera_alternating, random_cross_sequence };
    Strategy strategy = Strategy::camera_alternating;
    int batch_frames = 32;  // n_f per mini-batch, split into num_groups groups
    int num_groups = 4;
    double camera_interval_s = 0.5;
    std::uint64_t seed = 0;

    void validate() const {
        if (batch_frames < 1 || num_groups < 1 || batch_frames % num_groups != 0 ||
            batch_frames / num_groups < 2 || camera_interval_s <= 0.0)
            throw InvalidSpec("SamplerConfig: need batch_frames divisible into groups of >= 2");
    }
};

// One alignment group: network inputs (flattened observations, one frame per
// column), the matching observations, and the source frame indices
// (dataset_index, frame_index).
struct SampledGroup {
    Eigen::MatrixXd inputs;
    ObservationBatch obs;
    std::vector<std::pair<int, int>> frame_refs;
};

inline Eigen::VectorXd obs_to_input(const Obs2D& u) {
    return Eigen::Map<const Eigen::VectorXd>(u.data(), u.size());
}

namespace detail {

struct FrameRef {
    int dataset;
    int frame;
};

inline std::vector<SampledGroup> pack_groups(const std::vector<const SequenceDataset*>& sets,
                                             const std::vector<FrameRef>& refs,
                                             const SamplerConfig& cfg) {
    const int group_size = cfg.batch_frames / cfg.num_groups;
    const int n_p = sets[0]->n_p;
    std::vector<SampledGroup> groups(cfg.num_groups);
    for (int g = 0; g < cfg.num_groups; ++g) {
        SampledGroup& grp = groups[g];
        grp.inputs.resize(2 * n_p, group_size);
        for (int k = 0; k < group_size; ++k) {
            const FrameRef ref = refs[g * group_size + k];
            const Frame& fr = sets[ref.dataset]->frames[ref.frame];
            grp.inputs.col(k) = obs_to_input(fr.u);
            grp.obs.u.push_back(fr.u);
            grp.obs.w.push_back(fr.w);
            grp.frame_refs.emplace_back(ref.dataset, ref.frame);
        }
    }
    return groups;
}

}  // namespace detail

// Draws the `step`-th mini-batch and splits it into contiguous groups, each of
// which later receives its own alignment and loss.
//
//  - sequential_stride: walks the concatenated frames in order, wrapping.
//  - camera_alternating: consecutive samples advance the timeline by
//    `camera_interval_s` and cycle the camera id, so neighbouring samples in a
//    group come from different viewpoints.
//  - random_cross_sequence: uniform draws across all datasets and frames,
//    deterministic per (seed, step).
inline std::vector<SampledGroup> sample_batch(const std::vector<const SequenceDataset*>& sets,
                                              const SamplerConfig& cfg, long step) {
    cfg.validate();
    if (sets.empty()) throw InsufficientData("sample_batch: no datasets");
    const int n_p = sets[0]->n_p;
    long total = 0;
    for (const auto* ds : sets) {
        if (ds->n_p != n_p) throw DimensionMismatch("sample_batch: point counts differ");
        total += ds->size();
    }
    if (total < cfg.batch_frames)
        throw InsufficientData("sample_batch: dataset shorter than one batch");

    std::vector<detail::FrameRef> refs;
    refs.reserve(cfg.batch_frames);

    switch (cfg.strategy) {
        case SamplerConfig::Strategy::sequential_stride: {
            const long start = (step * cfg.batch_frames) % total;
            for (int k = 0; k < cfg.batch_frames; ++k) {
                long idx = (start + k) % total;
                int d = 0;
                while (idx >= sets[d]->size()) idx -= sets[d++]->size();
                refs.push_back({d, static_cast<int>(idx)});
            }
            break;
        }
        case SamplerConfig::Strategy::camera_alternating: {
            // Per-camera frame lists over the concatenated datasets, ordered by time.
            int num_cameras = 0;
            for (const auto* ds : sets)
                for (const auto& fr : ds->frames) num_cameras = std::max(num_cameras, fr.camera_id + 1);
            std::vector<std::vector<detail::FrameRef>> per_camera(num_cameras);
            for (int d = 0; d < static_cast<int>(sets.size()); ++d)
                for (int f = 0; f < sets[d]->size(); ++f)
                    per_camera[sets[d]->frames[f].camera_id].push_back({d, f});
            for (auto& list : per_camera)
                if (list.empty()) throw InsufficientData("sample_batch: camera without frames");

            for (int k = 0; k < cfg.batch_frames; ++k) {
                const long s = step * cfg.batch_frames + k;  // global sample counter
                const int cam = static_cast<int>(s % num_cameras);
                const auto& list = per_camera[cam];
                const double duration =
                    sets[list.back().dataset]->frames[list.back().frame].time -
                    sets[list.front().dataset]->frames[list.front().frame].time;
                const double t0 = sets[list.front().dataset]->frames[list.front().frame].time;
                double tau = static_cast<double>(s) * cfg.camera_interval_s;
                if (duration > 0.0) tau = std::fmod(tau, duration);
                // Closest frame of this camera to the wrapped timeline position.
                const double target = t0 + tau;
                auto it = std::lower_bound(list.begin(), list.end(), target,
                                           [&](const detail::FrameRef& r, double t) {
                                               return sets[r.dataset]->frames[r.frame].time < t;
                                           });
                if (it == list.end()) --it;
                if (it != list.begin()) {
                    auto prev = std::prev(it);
                    const double dt_prev =
                        std::abs(sets[prev->dataset]->frames[prev->frame].time - target);
                    const double dt_cur =
                        std::abs(sets[it->dataset]->frames[it->frame].time - target);
                    if (dt_prev <= dt_cur) it = prev;
                }
                refs.push_back(*it);
            }
            break;
        }
        case SamplerConfig::Strategy::random_cross_sequence: {
            std::mt19937_64 rng(cfg.seed ^ (0x9e3779b97f4a7c15ULL * (step + 1)));
            std::uniform_int_distribution<long> pick(0, total - 1);
            for (int k = 0; k < cfg.batch_frames; ++k) {
                long idx = pick(rng);
                int d = 0;
                while (idx >= sets[d]->size()) idx -= sets[d++]->size();
                refs.push_back({d, static_cast<int>(idx)});
            }
            break;
        }
    }
    return detail::pack_groups(sets, refs, cfg);
}

inline std::vector<SampledGroup> sample_batch(const SequenceDataset& ds,
                                              const SamplerConfig& cfg, long step) {
    std::vector<const SequenceDataset*> sets{&ds};
    return sample_batch(sets, cfg, step);
}

}  // namespace prn
