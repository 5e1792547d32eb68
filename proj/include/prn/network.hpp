#pragma once

// Residual fully-connected regressor from flattened 2D observations to 3D
// shapes, with hand-rolled forward and backward passes. Layout: input dense
// (+BN, ReLU), `num_res_blocks` residual blocks (dense-BN-ReLU-dense-BN, skip,
// ReLU), then two heads: one emits the 2 n_p x/y values, one the n_p depths.
//
// forward() is pure: batch-norm running-statistic updates are staged in the
// trace and only written back by commit_bn_updates().

#include <Eigen/Dense>

#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "prn/types.hpp"

namespace prn {

inline constexpr double kBnEps = 1e-5;
inline constexpr const char* kCheckpointFormat = "prn-ckpt-v1";

struct NetworkConfig {
    int n_p = 0;
    int hidden = 1024;
    int num_res_blocks = 2;
    bool use_batch_norm = true;
    double bn_momentum = 0.1;

    void validate() const {
        if (n_p < 1 || hidden < 1 || num_res_blocks < 1 ||
            bn_momentum <= 0.0 || bn_momentum >= 1.0)
            throw InvalidSpec("NetworkConfig: invalid field");
    }
};

struct DenseLayer {
    Eigen::MatrixXd w;
    Eigen::VectorXd b;
};

struct BatchNormLayer {
    Eigen::VectorXd gamma, beta, running_mean, running_var;
};

struct ResBlockParams {
    DenseLayer d1, d2;
    BatchNormLayer bn1, bn2;
};

struct NetworkParams {
    DenseLayer input;
    BatchNormLayer bn_in;
    std::vector<ResBlockParams> blocks;
    DenseLayer head_xy, head_z;
    bool bn_frozen = false;
};

enum class Mode { train, eval };

// --- caches ------------------------------------------------------------------

struct DenseCache {
    Eigen::MatrixXd x;  // layer input
};

struct BnCache {
    Eigen::MatrixXd x, xhat;
    Eigen::VectorXd mean, invstd;  // statistics actually used
    bool batch_stats = false;
    Eigen::VectorXd new_running_mean, new_running_var;  // staged updates
};

struct ReluCache {
    Eigen::MatrixXd pre;
};

struct BlockTrace {
    DenseCache d1, d2;
    BnCache bn1, bn2;
    ReluCache relu_mid, relu_out;
};

struct ForwardTrace {
    Mode mode = Mode::eval;
    int batch = 0;
    int n_p = 0;
    DenseCache d_in;
    BnCache bn_in;
    ReluCache relu_in;
    std::vector<BlockTrace> blocks;
    DenseCache head_xy, head_z;
};

// --- initialization ------------------------------------------------------------

namespace detail {

inline DenseLayer make_dense(int out, int in, std::mt19937_64& rng) {
    // Kaiming-uniform fan-in, zero biases.
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    DenseLayer d;
    d.w.setZero(out, in);
    for (int i = 0; i < out; ++i)
        for (int j = 0; j < in; ++j) d.w(i, j) = u(rng);
    d.b.setZero(out);
    return d;
}

inline BatchNormLayer make_bn(int width) {
    BatchNormLayer bn;
    bn.gamma.setOnes(width);
    bn.beta.setZero(width);
    bn.running_mean.setZero(width);
    bn.running_var.setOnes(width);
    return bn;
}

}  // namespace detail

inline NetworkParams init_params(const NetworkConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    NetworkParams p;
    p.input = detail::make_dense(cfg.hidden, 2 * cfg.n_p, rng);
    if (cfg.use_batch_norm) p.bn_in = detail::make_bn(cfg.hidden);
    p.blocks.resize(cfg.num_res_blocks);
    for (auto& blk : p.blocks) {
        blk.d1 = detail::make_dense(cfg.hidden, cfg.hidden, rng);
        blk.d2 = detail::make_dense(cfg.hidden, cfg.hidden, rng);
        if (cfg.use_batch_norm) {
            blk.bn1 = detail::make_bn(cfg.hidden);
            blk.bn2 = detail::make_bn(cfg.hidden);
        }
    }
    p.head_xy = detail::make_dense(2 * cfg.n_p, cfg.hidden, rng);
    p.head_z = detail::make_dense(cfg.n_p, cfg.hidden, rng);
    return p;
}

// Visits every trainable tensor in a fixed order (weights, biases, BN scale /
// shift). Running statistics are not trainable and are skipped.
template <class Params, class F>
void for_each_trainable(Params& p, const NetworkConfig& cfg, F&& f) {
    f(p.input.w);
    f(p.input.b);
    if (cfg.use_batch_norm) {
        f(p.bn_in.gamma);
        f(p.bn_in.beta);
    }
    for (auto& blk : p.blocks) {
        f(blk.d1.w);
        f(blk.d1.b);
        if (cfg.use_batch_norm) {
            f(blk.bn1.gamma);
            f(blk.bn1.beta);
        }
        f(blk.d2.w);
        f(blk.d2.b);
        if (cfg.use_batch_norm) {
            f(blk.bn2.gamma);
            f(blk.bn2.beta);
        }
    }
    f(p.head_xy.w);
    f(p.head_xy.b);
    f(p.head_z.w);
    f(p.head_z.b);
}

inline NetworkParams make_zero_grads(const NetworkConfig& cfg) {
    NetworkParams g = init_params(cfg, 0);
    for_each_trainable(g, cfg, [](auto& t) { t.setZero(); });
    return g;
}

inline long trainable_count(const NetworkConfig& cfg) {
    NetworkParams p = init_params(cfg, 0);
    long n = 0;
    for_each_trainable(p, cfg, [&n](auto& t) { n += t.size(); });
    return n;
}

inline Eigen::VectorXd flatten_trainable(const NetworkParams& p, const NetworkConfig& cfg) {
    Eigen::VectorXd v(trainable_count(cfg));
    long off = 0;
    for_each_trainable(const_cast<NetworkParams&>(p), cfg, [&](auto& t) {
        v.segment(off, t.size()) = Eigen::Map<const Eigen::VectorXd>(t.data(), t.size());
        off += t.size();
    });
    return v;
}

inline void unflatten_trainable(NetworkParams& p, const NetworkConfig& cfg,
                                const Eigen::VectorXd& v) {
    long off = 0;
    for_each_trainable(p, cfg, [&](auto& t) {
        Eigen::Map<Eigen::VectorXd>(t.data(), t.size()) = v.segment(off, t.size());
        off += t.size();
    });
}

// --- layer forward/backward -----------------------------------------------------

namespace detail {

inline Eigen::MatrixXd dense_forward(const DenseLayer& p, const Eigen::MatrixXd& x,
                                     DenseCache& cache) {
    cache.x = x;
    return (p.w * x).colwise() + p.b;
}

inline Eigen::MatrixXd dense_backward(const DenseLayer& p, const DenseCache& cache,
                                      const Eigen::MatrixXd& dy, DenseLayer& grad) {
    grad.w += dy * cache.x.transpose();
    grad.b += dy.rowwise().sum();
    return p.w.transpose() * dy;
}

inline Eigen::MatrixXd bn_forward(const BatchNormLayer& p, const Eigen::MatrixXd& x,
                                  bool batch_stats, double momentum, BnCache& cache) {
    cache.x = x;
    cache.batch_stats = batch_stats;
    if (batch_stats) {
        const double m = static_cast<double>(x.cols());
        cache.mean = x.rowwise().mean();
        const Eigen::MatrixXd centered = x.colwise() - cache.mean;
        const Eigen::VectorXd var = centered.array().square().rowwise().sum().matrix() / m;
        cache.invstd = (var.array() + kBnEps).rsqrt().matrix();
        cache.new_running_mean = (1.0 - momentum) * p.running_mean + momentum * cache.mean;
        cache.new_running_var = (1.0 - momentum) * p.running_var + momentum * var;
    } else {
        cache.mean = p.running_mean;
        cache.invstd = (p.running_var.array() + kBnEps).rsqrt().matrix();
    }
    cache.xhat = ((x.colwise() - cache.mean).array().colwise() * cache.invstd.array()).matrix();
    return ((cache.xhat.array().colwise() * p.gamma.array()).colwise() + p.beta.array()).matrix();
}

inline Eigen::MatrixXd bn_backward(const BatchNormLayer& p, const BnCache& cache,
                                   const Eigen::MatrixXd& dy, BatchNormLayer& grad) {
    grad.gamma += (dy.array() * cache.xhat.array()).rowwise().sum();
    grad.beta += dy.rowwise().sum();
    const Eigen::MatrixXd dxhat = dy.array().colwise() * p.gamma.array();
    if (!cache.batch_stats)
        return dxhat.array().colwise() * cache.invstd.array();

    const double m = static_cast<double>(cache.x.cols());
    const Eigen::MatrixXd centered = cache.x.colwise() - cache.mean;
    const Eigen::VectorXd dvar =
        ((dxhat.array() * centered.array()).rowwise().sum() *
         (-0.5 * cache.invstd.array().cube()));
    const Eigen::VectorXd dmean = -(dxhat.array().colwise() * cache.invstd.array()).rowwise().sum();
    Eigen::MatrixXd dx = dxhat.array().colwise() * cache.invstd.array();
    dx += (centered.array().colwise() * (2.0 * dvar.array() / m)).matrix();
    dx.colwise() += (dmean / m);
    return dx;
}

inline Eigen::MatrixXd relu_forward(const Eigen::MatrixXd& x, ReluCache& cache) {
    cache.pre = x;
    return x.cwiseMax(0.0);
}

inline Eigen::MatrixXd relu_backward(const ReluCache& cache, const Eigen::MatrixXd& dy) {
    return (cache.pre.array() > 0.0).select(dy, 0.0);
}

}  // namespace detail

// --- network forward/backward -----------------------------------------------------

// `inputs` holds one flattened 2 x n_p observation per column (column-major,
// i.e. x1,y1,x2,y2,...). Returns one 3 x n_p shape per column and the trace
// needed for backward().
inline std::pair<std::vector<Shape3D>, ForwardTrace> forward(const NetworkParams& params,
                                                             const NetworkConfig& cfg,
                                                             const Eigen::MatrixXd& inputs,
                                                             Mode mode) {
    cfg.validate();
    if (inputs.rows() != 2 * cfg.n_p)
        throw DimensionMismatch("forward: input width must be 2 n_p");
    const bool batch_stats = mode == Mode::train && cfg.use_batch_norm && !params.bn_frozen;
    if (batch_stats && inputs.cols() < 2)
        throw BatchTooSmall("forward: batch norm needs batch size >= 2 in train mode");

    ForwardTrace trace;
    trace.mode = mode;
    trace.batch = static_cast<int>(inputs.cols());
    trace.n_p = cfg.n_p;
    trace.blocks.resize(cfg.num_res_blocks);

    Eigen::MatrixXd h = detail::dense_forward(params.input, inputs, trace.d_in);
    if (cfg.use_batch_norm)
        h = detail::bn_forward(params.bn_in, h, batch_stats, cfg.bn_momentum, trace.bn_in);
    h = detail::relu_forward(h, trace.relu_in);

    for (int bi = 0; bi < cfg.num_res_blocks; ++bi) {
        BlockTrace& bt = trace.blocks[bi];
        const ResBlockParams& bp = params.blocks[bi];
        Eigen::MatrixXd t = detail::dense_forward(bp.d1, h, bt.d1);
        if (cfg.use_batch_norm)
            t = detail::bn_forward(bp.bn1, t, batch_stats, cfg.bn_momentum, bt.bn1);
        t = detail::relu_forward(t, bt.relu_mid);
        t = detail::dense_forward(bp.d2, t, bt.d2);
        if (cfg.use_batch_norm)
            t = detail::bn_forward(bp.bn2, t, batch_stats, cfg.bn_momentum, bt.bn2);
        h = detail::relu_forward(t + h, bt.relu_out);
    }

    const Eigen::MatrixXd xy = detail::dense_forward(params.head_xy, h, trace.head_xy);
    const Eigen::MatrixXd z = detail::dense_forward(params.head_z, h, trace.head_z);

    std::vector<Shape3D> shapes(trace.batch);
    for (int j = 0; j < trace.batch; ++j) {
        shapes[j].resize(3, cfg.n_p);
        shapes[j].row(0) = xy.col(j).head(cfg.n_p).transpose();
        shapes[j].row(1) = xy.col(j).segment(cfg.n_p, cfg.n_p).transpose();
        shapes[j].row(2) = z.col(j).transpose();
    }
    return {std::move(shapes), std::move(trace)};
}

// Exact reverse-mode gradients of every trainable parameter, given the
// gradient of the loss w.r.t. each output shape.
inline NetworkParams backward(const NetworkParams& params, const NetworkConfig& cfg,
                              const ForwardTrace& trace,
                              const std::vector<Shape3D>& grad_output) {
    if (static_cast<int>(grad_output.size()) != trace.batch || trace.n_p != cfg.n_p ||
        static_cast<int>(trace.blocks.size()) != cfg.num_res_blocks)
        throw TraceMismatch("backward: trace does not match call");

    NetworkParams grads = make_zero_grads(cfg);

    Eigen::MatrixXd dxy(2 * cfg.n_p, trace.batch), dz(cfg.n_p, trace.batch);
    for (int j = 0; j < trace.batch; ++j) {
        if (grad_output[j].cols() != cfg.n_p)
            throw TraceMismatch("backward: gradient shape mismatch");
        dxy.col(j).head(cfg.n_p) = grad_output[j].row(0).transpose();
        dxy.col(j).segment(cfg.n_p, cfg.n_p) = grad_output[j].row(1).transpose();
        dz.col(j) = grad_output[j].row(2).transpose();
    }

    Eigen::MatrixXd dh = detail::dense_backward(params.head_xy, trace.head_xy, dxy, grads.head_xy);
    dh += detail::dense_backward(params.head_z, trace.head_z, dz, grads.head_z);

    for (int bi = cfg.num_res_blocks - 1; bi >= 0; --bi) {
        const BlockTrace& bt = trace.blocks[bi];
        const ResBlockParams& bp = params.blocks[bi];
        ResBlockParams& bg = grads.blocks[bi];
        const Eigen::MatrixXd ds = detail::relu_backward(bt.relu_out, dh);
        Eigen::MatrixXd dt = ds;  // branch gradient; skip path adds ds below
        if (cfg.use_batch_norm) dt = detail::bn_backward(bp.bn2, bt.bn2, dt, bg.bn2);
        dt = detail::dense_backward(bp.d2, bt.d2, dt, bg.d2);
        dt = detail::relu_backward(bt.relu_mid, dt);
        if (cfg.use_batch_norm) dt = detail::bn_backward(bp.bn1, bt.bn1, dt, bg.bn1);
        dh = detail::dense_backward(bp.d1, bt.d1, dt, bg.d1) + ds;
    }

    dh = detail::relu_backward(trace.relu_in, dh);
    if (cfg.use_batch_norm) dh = detail::bn_backward(params.bn_in, trace.bn_in, dh, grads.bn_in);
    detail::dense_backward(params.input, trace.d_in, dh, grads.input);
    return grads;
}

// Writes the running-statistic updates staged by a train-mode forward.
inline void commit_bn_updates(NetworkParams& params, const NetworkConfig& cfg,
                              const ForwardTrace& trace) {
    if (!cfg.use_batch_norm) return;
    auto commit = [](BatchNormLayer& bn, const BnCache& cache) {
        if (!cache.batch_stats) return;
        bn.running_mean = cache.new_running_mean;
        bn.running_var = cache.new_running_var;
    };
    commit(params.bn_in, trace.bn_in);
    for (int bi = 0; bi < cfg.num_res_blocks; ++bi) {
        commit(params.blocks[bi].bn1, trace.blocks[bi].bn1);
        commit(params.blocks[bi].bn2, trace.blocks[bi].bn2);
    }
}

// Subsequent train-mode forwards use running statistics and stop updating
// them. Idempotent.
inline void freeze_batch_norm(NetworkParams& params) { params.bn_frozen = true; }

// --- checkpoints -----------------------------------------------------------------

namespace detail {

inline nlohmann::json tensor_to_json(const Eigen::MatrixXd& t) {
    nlohmann::json j;
    j["rows"] = t.rows();
    j["cols"] = t.cols();
    std::vector<double> data;
    data.reserve(t.size());
    for (Eigen::Index r = 0; r < t.rows(); ++r)
        for (Eigen::Index c = 0; c < t.cols(); ++c) data.push_back(t(r, c));
    j["data"] = data;
    return j;
}

inline void tensor_from_json(const nlohmann::json& j, Eigen::MatrixXd& t) {
    const Eigen::Index rows = j.at("rows").get<Eigen::Index>();
    const Eigen::Index cols = j.at("cols").get<Eigen::Index>();
    const auto data = j.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != rows * cols)
        throw SchemaError("checkpoint: tensor size mismatch");
    if (t.rows() != rows || t.cols() != cols)
        throw SchemaError("checkpoint: tensor shape does not match config");
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) t(r, c) = data[r * cols + c];
}

inline void tensor_from_json(const nlohmann::json& j, Eigen::VectorXd& v) {
    Eigen::MatrixXd m = v;
    tensor_from_json(j, m);
    v = m.col(0);
}

template <class Params, class F>
void for_each_named_tensor(Params& p, const NetworkConfig& cfg, F&& f) {
    f("input.w", p.input.w);
    f("input.b", p.input.b);
    if (cfg.use_batch_norm) {
        f("bn_in.gamma", p.bn_in.gamma);
        f("bn_in.beta", p.bn_in.beta);
        f("bn_in.running_mean", p.bn_in.running_mean);
        f("bn_in.running_var", p.bn_in.running_var);
    }
    for (size_t i = 0; i < p.blocks.size(); ++i) {
        const std::string base = "block" + std::to_string(i) + ".";
        auto& blk = p.blocks[i];
        f(base + "d1.w", blk.d1.w);
        f(base + "d1.b", blk.d1.b);
        f(base + "d2.w", blk.d2.w);
        f(base + "d2.b", blk.d2.b);
        if (cfg.use_batch_norm) {
            f(base + "bn1.gamma", blk.bn1.gamma);
            f(base + "bn1.beta", blk.bn1.beta);
            f(base + "bn1.running_mean", blk.bn1.running_mean);
            f(base + "bn1.running_var", blk.bn1.running_var);
            f(base + "bn2.gamma", blk.bn2.gamma);
            f(base + "bn2.beta", blk.bn2.beta);
            f(base + "bn2.running_mean", blk.bn2.running_mean);
            f(base + "bn2.running_var", blk.bn2.running_var);
        }
    }
    f("head_xy.w", p.head_xy.w);
    f("head_xy.b", p.head_xy.b);
    f("head_z.w", p.head_z.w);
    f("head_z.b", p.head_z.b);
}

}  // namespace detail

inline void save_checkpoint(const NetworkParams& params, const NetworkConfig& cfg,
                            const std::string& path) {
    nlohmann::json j;
    j["format"] = kCheckpointFormat;
    j["config"] = {{"n_p", cfg.n_p},
                   {"hidden", cfg.hidden},
                   {"num_res_blocks", cfg.num_res_blocks},
                   {"use_batch_norm", cfg.use_batch_norm},
                   {"bn_momentum", cfg.bn_momentum}};
    j["bn_frozen"] = params.bn_frozen;
    nlohmann::json tensors;
    detail::for_each_named_tensor(const_cast<NetworkParams&>(params), cfg,
                                  [&](const std::string& name, const auto& t) {
                                      tensors[name] = detail::tensor_to_json(t);
                                  });
    j["tensors"] = std::move(tensors);
    std::ofstream out(path);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out << j.dump();
    if (!out) throw IoError("failed writing checkpoint: " + path);
}

inline std::pair<NetworkParams, NetworkConfig> load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("checkpoint parse error: ") + e.what());
    }
    try {
        if (j.at("format").get<std::string>() != kCheckpointFormat)
            throw SchemaError("checkpoint: unknown format tag");
        NetworkConfig cfg;
        const auto& jc = j.at("config");
        cfg.n_p = jc.at("n_p").get<int>();
        cfg.hidden = jc.at("hidden").get<int>();
        cfg.num_res_blocks = jc.at("num_res_blocks").get<int>();
        cfg.use_batch_norm = jc.at("use_batch_norm").get<bool>();
        cfg.bn_momentum = jc.at("bn_momentum").get<double>();
        cfg.validate();

        NetworkParams params = init_params(cfg, 0);
        params.bn_frozen = j.at("bn_frozen").get<bool>();
        const auto& tensors = j.at("tensors");
        detail::for_each_named_tensor(params, cfg, [&](const std::string& name, auto& t) {
            if (!tensors.contains(name))
                throw SchemaError("checkpoint: missing tensor " + name);
            detail::tensor_from_json(tensors.at(name), t);
        });
        return {std::move(params), cfg};
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("checkpoint schema error: ") + e.what());
    }
}

}  // namespace prn
