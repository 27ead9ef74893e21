// Command-line entry point: train-teacher / distill / sample / eval / ablate
// subcommands with file outputs and a run manifest written before any work
// starts. Exit codes: 0 success, 1 runtime failure, 2 usage error.
#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "advdmd/ablate.hpp"
#include "advdmd/config.hpp"
#include "advdmd/metrics.hpp"
#include "advdmd/svg.hpp"
#include "advdmd/trainer.hpp"

namespace advdmd {

inline constexpr const char* kVersionString = "advdmd-v0.1.0";

namespace cli_detail {

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct RunManifest {
    std::string command;
    TrainConfig config;
    std::vector<std::string> outputs;
    std::string started;
    std::string finished;
    std::filesystem::path path;

    void write() const {
        nlohmann::json j;
        j["command"] = command;
        j["version"] = kVersionString;
        j["seed"] = config.seed;
        j["config"] = config_to_json(config);
        j["outputs"] = outputs;
        j["started_utc"] = started;
        if (!finished.empty()) j["finished_utc"] = finished;
        std::ofstream out(path);
        if (!out) throw std::runtime_error("manifest: cannot write '" + path.string() + "'");
        out << j.dump(2) << "\n";
    }
};

inline RunManifest start_manifest(const std::string& command, const TrainConfig& cfg,
                                  const std::filesystem::path& out_dir, std::vector<std::string> outputs) {
    std::filesystem::create_directories(out_dir);
    RunManifest m;
    m.command = command;
    m.config = cfg;
    m.outputs = std::move(outputs);
    m.started = utc_timestamp();
    m.path = out_dir / "manifest.json";
    m.write();  // on disk before any training step
    // The resolved config alone, reloadable via --config to reproduce the run.
    save_config(cfg, (out_dir / "config.json").string());
    return m;
}

inline void finish_manifest(RunManifest& m) {
    m.finished = utc_timestamp();
    m.write();
}

inline TrainConfig resolve_config(const std::string& config_path, uint64_t* seed_override,
                                  const std::string* variant_override, const std::string* sim_override) {
    TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
    if (seed_override) cfg.seed = *seed_override;
    if (variant_override) cfg.variant = *variant_override;
    if (sim_override) cfg.sim = *sim_override;
    cfg.validate();
    return cfg;
}

inline int run_train_teacher(const std::string& config_path, const std::string& out_dir,
                             uint64_t* seed_override) {
    TrainConfig cfg = resolve_config(config_path, seed_override, nullptr, nullptr);
    auto manifest = start_manifest("train-teacher", cfg, out_dir, {"teacher.ckpt", "metrics.csv"});
    TeacherResult res = train_teacher(cfg);
    write_metrics_csv((std::filesystem::path(out_dir) / "metrics.csv").string(), res.history);
    save_checkpoint(make_teacher_checkpoint(cfg, res), (std::filesystem::path(out_dir) / "teacher.ckpt").string());
    finish_manifest(manifest);
    return 0;
}

inline int run_distill(const std::string& config_path, const std::string& teacher_path, const std::string& out_dir,
                       uint64_t* seed_override, const std::string* variant_override,
                       const std::string* sim_override) {
    TrainConfig cfg = resolve_config(config_path, seed_override, variant_override, sim_override);
    auto teacher_ckpt = open_checkpoint(teacher_path);
    VelocityModel teacher = teacher_from_checkpoint(teacher_ckpt);
    auto manifest = start_manifest("distill", cfg, out_dir, {"student.ckpt", "metrics.csv"});
    TrainState st = run_distillation(cfg, teacher);
    write_metrics_csv((std::filesystem::path(out_dir) / "metrics.csv").string(), st.history);
    save_checkpoint(make_student_checkpoint(st), (std::filesystem::path(out_dir) / "student.ckpt").string());
    finish_manifest(manifest);
    return 0;
}

inline LabeledBatch sample_from_checkpoint(const LoadedCheckpoint& lc, int n, int steps, uint64_t seed) {
    if (lc.kind == "teacher") {
        VelocityModel model = teacher_from_checkpoint(lc);
        return sample_ode_reference(model, lc.cfg.n_modes, n, steps > 0 ? steps : lc.cfg.teacher_steps,
                                    lc.cfg.w_cfg, seed);
    }
    TrainState st = state_from_checkpoint(lc);
    return sample_student(st.generator, lc.cfg.n_modes, n, steps > 0 ? steps : lc.cfg.n_student_steps, seed);
}

inline int run_sample(const std::string& ckpt_path, int n, int steps, const std::string& out_dir, uint64_t seed) {
    auto lc = open_checkpoint(ckpt_path);
    TrainConfig cfg = lc.cfg;
    cfg.seed = seed;
    auto manifest = start_manifest("sample", cfg, out_dir, {"samples.csv", "samples.svg"});
    LabeledBatch batch = sample_from_checkpoint(lc, n, steps, seed);
    write_samples_csv((std::filesystem::path(out_dir) / "samples.csv").string(), batch);
    emit_scatter_svg(batch, lc.cfg.target(), (std::filesystem::path(out_dir) / "samples.svg").string());
    finish_manifest(manifest);
    return 0;
}

inline int run_eval(const std::string& ckpt_path, const std::string& out_dir, uint64_t seed) {
    auto lc = open_checkpoint(ckpt_path);
    TrainConfig cfg = lc.cfg;
    cfg.seed = seed;
    auto manifest = start_manifest("eval", cfg, out_dir, {"report.csv", "samples.csv", "samples.svg"});
    const MixtureTarget target = lc.cfg.target();
    Rng band_rng(seed, "eval-band");
    const auto bandwidths = median_heuristic_bandwidths(sample_target(target, lc.cfg.eval_samples, band_rng).x);

    AblationRow row;
    row.seed_label = std::to_string(seed);
    LabeledBatch batch;
    if (lc.kind == "teacher") {
        batch = sample_from_checkpoint(lc, lc.cfg.eval_samples, 0, seed);
        MetricReport rep = evaluate_samples(batch.x, target, bandwidths, seed);
        row.variant = "teacher";
        row.steps = lc.cfg.teacher_steps;
        row.mmd2 = rep.mmd2;
        row.w2 = rep.w2;
        row.coverage = rep.mode_coverage;
    } else {
        TrainState st = state_from_checkpoint(lc);
        batch = sample_student(st.generator, lc.cfg.n_modes, lc.cfg.eval_samples, lc.cfg.n_student_steps, seed);
        MetricReport rep = evaluate_state(st, bandwidths, seed);
        row.variant = rep.variant;
        row.steps = lc.cfg.n_student_steps;
        row.mmd2 = rep.mmd2;
        row.w2 = rep.w2;
        row.coverage = rep.mode_coverage;
        row.mean_reward = rep.mean_reward;
    }
    std::ofstream out(std::filesystem::path(out_dir) / "report.csv");
    if (!out) throw std::runtime_error("eval: cannot write report.csv");
    out << kAblationHeader << "\n" << ablation_csv_row(row) << "\n";
    out.close();
    write_samples_csv((std::filesystem::path(out_dir) / "samples.csv").string(), batch);
    emit_scatter_svg(batch, target, (std::filesystem::path(out_dir) / "samples.svg").string());
    finish_manifest(manifest);
    return 0;
}

inline int run_ablate(const std::string& config_path, const std::string& teacher_path, const std::string& matrix,
                      int n_seeds, const std::string& out_dir, uint64_t* seed_override) {
    if (matrix != "default") throw CLI::ValidationError("--matrix", "only the 'default' matrix is defined");
    TrainConfig cfg = resolve_config(config_path, seed_override, nullptr, nullptr);
    auto teacher_ckpt = open_checkpoint(teacher_path);
    VelocityModel teacher = teacher_from_checkpoint(teacher_ckpt);
    auto manifest = start_manifest("ablate", cfg, out_dir, {"ablation.csv"});
    std::vector<uint64_t> seeds;
    for (int i = 0; i < n_seeds; ++i) seeds.push_back(cfg.seed + static_cast<uint64_t>(i));
    AblationResult res = run_ablation(cfg, teacher, seeds);
    write_ablation_csv((std::filesystem::path(out_dir) / "ablation.csv").string(), res);
    finish_manifest(manifest);
    return 0;
}

}  // namespace cli_detail

inline int cli_main(int argc, const char* const* argv) {
    CLI::App app{"Few-step flow distillation with an adversarial per-step reward"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersionString);

    std::string config_path, teacher_path, ckpt_path, out_dir;
    std::string variant, sim, matrix = "default";
    uint64_t seed = 0;
    bool seed_given = false, variant_given = false, sim_given = false;
    int n_samples = 2048, n_steps = 0, n_seeds = 5;

    auto add_seed = [&](CLI::App* cmd) {
        cmd->add_option("--seed", seed, "root RNG seed")->each([&](const std::string&) { seed_given = true; });
    };

    auto* tt = app.add_subcommand("train-teacher", "pretrain the multi-step teacher on the mixture target");
    tt->add_option("--config", config_path, "JSON config path");
    tt->add_option("--out", out_dir, "output directory")->required();
    add_seed(tt);

    auto* di = app.add_subcommand("distill", "run the configured distillation variant from a teacher checkpoint");
    di->add_option("--config", config_path, "JSON config path");
    di->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
    di->add_option("--out", out_dir, "output directory")->required();
    di->add_option("--variant", variant, "advdmd | dmd2 | grpo-fixed")
        ->each([&](const std::string&) { variant_given = true; });
    di->add_option("--sim", sim, "sde | ode")->each([&](const std::string&) { sim_given = true; });
    add_seed(di);

    auto* sa = app.add_subcommand("sample", "draw samples from a checkpoint");
    sa->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    sa->add_option("--n", n_samples, "number of samples");
    sa->add_option("--steps", n_steps, "sampling steps (default: checkpoint's own)");
    sa->add_option("--out", out_dir, "output directory")->required();
    add_seed(sa);

    auto* ev = app.add_subcommand("eval", "metric report for a checkpoint");
    ev->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    ev->add_option("--out", out_dir, "output directory")->required();
    add_seed(ev);

    auto* ab = app.add_subcommand("ablate", "run the variant x simulation grid across seeds");
    ab->add_option("--config", config_path, "JSON config path");
    ab->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
    ab->add_option("--matrix", matrix, "grid name (default)");
    ab->add_option("--seeds", n_seeds, "number of seeds");
    ab->add_option("--out", out_dir, "output directory")->required();
    add_seed(ab);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::CallForVersion&) {
        std::cout << kVersionString << "\n";
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << app.help() << "\nerror: " << e.what() << "\n";
        return 2;
    }

    try {
        uint64_t* seed_ptr = seed_given ? &seed : nullptr;
        if (tt->parsed()) return cli_detail::run_train_teacher(config_path, out_dir, seed_ptr);
        if (di->parsed()) {
            std::string v = variant;
            if (variant_given && v == "grpo-fixed") v = "grpo_fixed";
            return cli_detail::run_distill(config_path, teacher_path, out_dir, seed_ptr,
                                           variant_given ? &v : nullptr, sim_given ? &sim : nullptr);
        }
        if (sa->parsed()) return cli_detail::run_sample(ckpt_path, n_samples, n_steps, out_dir, seed);
        if (ev->parsed()) return cli_detail::run_eval(ckpt_path, out_dir, seed);
        if (ab->parsed()) return cli_detail::run_ablate(config_path, teacher_path, matrix, n_seeds, out_dir, seed_ptr);
    } catch (const CLI::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

}  // namespace advdmd
