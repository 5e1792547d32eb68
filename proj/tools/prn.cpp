// prn — train and evaluate Procrustean regression networks on 2D point
// sequences. All file formats are JSON; logs are line-delimited JSON on
// stdout. Exit codes: 0 success, 1 verification failure, 2 input error.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "prn/prn.hpp"

namespace {

nlohmann::json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw prn::IoError("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw prn::SchemaError(path + ": " + e.what());
    }
    return j;
}

prn::SyntheticSpec parse_synthetic_spec(const nlohmann::json& j) {
    prn::SyntheticSpec spec;
    spec.n_p = j.value("n_p", spec.n_p);
    spec.n_frames = j.value("n_frames", spec.n_frames);
    spec.rank = j.value("rank", spec.rank);
    spec.coeff_smoothness = j.value("coeff_smoothness", spec.coeff_smoothness);
    spec.rotation_speed = j.value("rotation_speed", spec.rotation_speed);
    spec.num_cameras = j.value("num_cameras", spec.num_cameras);
    spec.noise_std = j.value("noise_std", spec.noise_std);
    spec.missing_rate = j.value("missing_rate", spec.missing_rate);
    spec.fps = j.value("fps", spec.fps);
    spec.seed = j.value("seed", spec.seed);
    return spec;
}

prn::SamplerConfig parse_sampler(const nlohmann::json& j) {
    prn::SamplerConfig cfg;
    const std::string strategy = j.value("strategy", std::string("camera_alternating"));
    if (strategy == "sequential_stride")
        cfg.strategy = prn::SamplerConfig::Strategy::sequential_stride;
    else if (strategy == "camera_alternating")
        cfg.strategy = prn::SamplerConfig::Strategy::camera_alternating;
    else if (strategy == "random_cross_sequence")
        cfg.strategy = prn::SamplerConfig::Strategy::random_cross_sequence;
    else
        throw prn::InvalidSpec("unknown sampler strategy: " + strategy);
    cfg.batch_frames = j.value("batch_frames", cfg.batch_frames);
    cfg.num_groups = j.value("num_groups", cfg.num_groups);
    cfg.camera_interval_s = j.value("camera_interval_s", cfg.camera_interval_s);
    cfg.seed = j.value("seed", cfg.seed);
    return cfg;
}

prn::NetworkConfig parse_network(const nlohmann::json& j) {
    prn::NetworkConfig cfg;
    cfg.n_p = j.value("n_p", cfg.n_p);
    cfg.hidden = j.value("hidden", cfg.hidden);
    cfg.num_res_blocks = j.value("num_res_blocks", cfg.num_res_blocks);
    cfg.use_batch_norm = j.value("use_batch_norm", cfg.use_batch_norm);
    cfg.bn_momentum = j.value("bn_momentum", cfg.bn_momentum);
    return cfg;
}

prn::TrainConfig parse_train_config(const nlohmann::json& j) {
    prn::TrainConfig cfg;
    cfg.total_iters = j.value("total_iters", cfg.total_iters);
    cfg.lr0 = j.value("lr0", cfg.lr0);
    cfg.lr_decay = j.value("lr_decay", cfg.lr_decay);
    cfg.decay_every = j.value("decay_every", cfg.decay_every);
    cfg.lambda = j.value("lambda", cfg.lambda);
    cfg.bn_freeze_fraction = j.value("bn_freeze_fraction", cfg.bn_freeze_fraction);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.checkpoint_every = j.value("checkpoint_every", cfg.checkpoint_every);
    cfg.sum_groups = j.value("sum_groups", cfg.sum_groups);
    cfg.warm_start = j.value("warm_start", cfg.warm_start);
    cfg.svd_rank_tol = j.value("svd_rank_tol", cfg.svd_rank_tol);
    if (j.contains("sampler")) cfg.sampler = parse_sampler(j.at("sampler"));
    if (j.contains("network")) cfg.network = parse_network(j.at("network"));
    return cfg;
}

nlohmann::json shape_to_json(const prn::Shape3D& s) {
    nlohmann::json rows = nlohmann::json::array();
    for (int r = 0; r < 3; ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < s.cols(); ++c) row.push_back(s(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

int cmd_generate(const std::string& spec_path, const std::string& out_path) {
    const prn::SyntheticSpec spec = parse_synthetic_spec(load_json(spec_path));
    const prn::SequenceDataset ds = prn::generate(spec);
    prn::save_dataset(ds, out_path);
    nlohmann::json info{{"event", "generated"},
                        {"frames", ds.size()},
                        {"n_p", ds.n_p},
                        {"out", out_path}};
    std::cout << info.dump() << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& data_paths,
              const std::string& out_dir) {
    const prn::TrainConfig cfg = parse_train_config(load_json(config_path));
    std::vector<prn::SequenceDataset> datasets;
    datasets.reserve(data_paths.size());
    for (const auto& p : data_paths) datasets.push_back(prn::load_dataset(p));
    std::vector<const prn::SequenceDataset*> refs;
    for (const auto& ds : datasets) refs.push_back(&ds);

    prn::train(cfg, refs, &std::cout, out_dir);
    nlohmann::json info{{"event", "trained"}, {"checkpoint", out_dir + "/final.ckpt"}};
    std::cout << info.dump() << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             const std::string& report_path) {
    const auto [params, net] = prn::load_checkpoint(ckpt_path);
    const prn::SequenceDataset ds = prn::load_dataset(data_path);
    const prn::EvalReport report = prn::evaluate(params, net, ds);

    nlohmann::json j{{"mpjpe", report.mpjpe}, {"ne", report.ne}};
    nlohmann::json frames = nlohmann::json::array();
    for (size_t i = 0; i < report.per_frame_ne.size(); ++i)
        frames.push_back({{"mpjpe", report.per_frame_mpjpe[i]},
                          {"ne", report.per_frame_ne[i]},
                          {"reflected", static_cast<bool>(report.reflection_used[i])}});
    j["frames"] = std::move(frames);
    if (!report_path.empty()) {
        std::ofstream out(report_path);
        if (!out) throw prn::IoError("cannot open report for writing: " + report_path);
        out << j.dump(2);
    }
    std::cout << nlohmann::json{{"mpjpe", report.mpjpe}, {"ne", report.ne}}.dump() << "\n";
    return 0;
}

int cmd_reconstruct(const std::string& ckpt_path, const std::string& data_path,
                    const std::string& out_path) {
    const auto [params, net] = prn::load_checkpoint(ckpt_path);
    const prn::SequenceDataset ds = prn::load_dataset(data_path);
    if (ds.n_p != net.n_p) throw prn::DimensionMismatch("reconstruct: point count mismatch");

    nlohmann::json j{{"format", "prn-rec-v1"}, {"n_p", ds.n_p}};
    nlohmann::json frames = nlohmann::json::array();
    for (const auto& fr : ds.frames) {
        const auto [shapes, trace] =
            prn::forward(params, net, prn::obs_to_input(fr.u), prn::Mode::eval);
        frames.push_back({{"camera_id", fr.camera_id},
                          {"time", fr.time},
                          {"x3d", shape_to_json(shapes[0])}});
    }
    j["frames"] = std::move(frames);
    std::ofstream out(out_path);
    if (!out) throw prn::IoError("cannot open output for writing: " + out_path);
    out << j.dump();
    std::cout << nlohmann::json{{"event", "reconstructed"}, {"frames", ds.size()}}.dump() << "\n";
    return 0;
}

int cmd_gradcheck(const prn::GradCheckConfig& gc) {
    const prn::GradCheckResult res = prn::run_gradcheck(gc, &std::cout);
    nlohmann::json summary{{"event", "gradcheck"},
                           {"batches", res.rel_errors.size()},
                           {"skipped", res.skipped},
                           {"worst_rel_error", res.worst},
                           {"tol", gc.tol},
                           {"passed", res.passed}};
    std::cout << summary.dump() << "\n";
    return res.passed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Procrustean regression networks on 2D point sequences"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("generate", "Generate a synthetic sequence dataset");
    std::string gen_spec, gen_out;
    gen->add_option("--spec", gen_spec, "SyntheticSpec JSON file")->required();
    gen->add_option("--out", gen_out, "Output dataset path")->required();

    auto* tr = app.add_subcommand("train", "Train a network");
    std::string tr_config, tr_out;
    std::vector<std::string> tr_data;
    tr->add_option("--config", tr_config, "TrainConfig JSON file")->required();
    tr->add_option("--data", tr_data, "Dataset file(s)")->required()->expected(-1);
    tr->add_option("--out", tr_out, "Checkpoint directory")->required();

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
    std::string ev_ckpt, ev_data, ev_report;
    ev->add_option("--ckpt", ev_ckpt, "Checkpoint file")->required();
    ev->add_option("--data", ev_data, "Dataset file")->required();
    ev->add_option("--report", ev_report, "Report JSON output path");

    auto* rec = app.add_subcommand("reconstruct", "Reconstruct 3D shapes for a dataset");
    std::string rec_ckpt, rec_data, rec_out;
    rec->add_option("--ckpt", rec_ckpt, "Checkpoint file")->required();
    rec->add_option("--data", rec_data, "Dataset file")->required();
    rec->add_option("--out", rec_out, "Output shapes path")->required();

    auto* gc_cmd = app.add_subcommand("gradcheck", "Verify the analytic gradient against FD");
    prn::GradCheckConfig gc;
    gc_cmd->add_option("--nf", gc.n_f, "Frames per batch");
    gc_cmd->add_option("--np", gc.n_p, "Points per frame");
    gc_cmd->add_option("--batches", gc.batches, "Number of batches");
    gc_cmd->add_option("--lambda", gc.lambda, "Regularizer weight");
    gc_cmd->add_option("--seed", gc.seed, "RNG seed");
    gc_cmd->add_option("--tol", gc.tol, "Max relative error");
    gc_cmd->add_option("--step", gc.fd_step, "FD step size");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_generate(gen_spec, gen_out);
        if (tr->parsed()) return cmd_train(tr_config, tr_data, tr_out);
        if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_report);
        if (rec->parsed()) return cmd_reconstruct(rec_ckpt, rec_data, rec_out);
        if (gc_cmd->parsed()) return cmd_gradcheck(gc);
    } catch (const prn::PrnError& e) {
        std::cerr << nlohmann::json{{"error", e.what()}}.dump() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << nlohmann::json{{"error", e.what()}}.dump() << "\n";
        return 2;
    }
    return 2;
}
