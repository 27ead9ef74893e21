// Ablation harness: runs the {ode, sde} x {dmd2, advdmd} grid across seeds
// from one teacher checkpoint and tabulates metric reports per cell, plus a
// median summary row per variant. A failed cell is recorded and the rest of
// the grid continues.
#pragma once

#include <algorithm>
#include <chrono>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "advdmd/metrics.hpp"
#include "advdmd/trainer.hpp"

namespace advdmd {

// Mean reward of a trained state: stepwise discriminator scores over a few
// freshly sampled policy groups (the fixed proxy for the grpo_fixed variant).
inline double eval_mean_reward(const TrainState& st, uint64_t seed, int n_groups = 4) {
    const auto sched = make_schedule(st.cfg.n_student_steps, st.cfg.eta, st.cfg.sigma_cap);
    double acc = 0.0;
    int count = 0;
    for (int g = 0; g < n_groups; ++g) {
        const int condition = g % st.cfg.n_modes;
        std::vector<Trajectory> group;
        for (int i = 0; i < st.cfg.group_size; ++i) {
            Rng traj_rng(seed, "eval-reward", {static_cast<uint64_t>(g), static_cast<uint64_t>(i)});
            group.push_back(
                sample_trajectory(st.generator, traj_rng.normal_vec(st.cfg.data_dim), condition, sched, traj_rng));
        }
        const RewardTable table = st.cfg.variant == "grpo_fixed"
                                      ? proxy_reward_table(proxy_from_config(st.cfg), group)
                                      : stepwise_rewards(st.disc, st.fake, group, st.cfg.logit_reward);
        for (double v : table.data) {
            acc += v;
            ++count;
        }
    }
    return acc / count;
}

inline MetricReport evaluate_state(const TrainState& st, const std::vector<double>& bandwidths, uint64_t seed) {
    auto samples = sample_student(st.generator, st.cfg.n_modes, st.cfg.eval_samples, st.cfg.n_student_steps, seed);
    MetricReport rep = evaluate_samples(samples.x, st.target, bandwidths, seed);
    rep.variant = st.cfg.variant + "-" + st.cfg.sim;
    rep.mean_reward = eval_mean_reward(st, seed);
    return rep;
}

struct AblationRow {
    std::string variant;     // e.g. "advdmd-sde"
    std::string seed_label;  // seed value, or "median" for summary rows
    int steps = 0;
    std::optional<double> mmd2, w2, coverage, mean_reward;
    double runtime_s = 0.0;
};

inline std::string ablation_csv_row(const AblationRow& r) {
    auto field = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
    std::string row = r.variant + "," + r.seed_label + "," + std::to_string(r.steps);
    for (const auto* v : {&r.mmd2, &r.w2, &r.coverage, &r.mean_reward}) row += "," + field(*v);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", r.runtime_s);
    row += "," + std::string(buf);
    return row;
}

inline constexpr const char* kAblationHeader = "variant,seed,steps,mmd2,w2,coverage,mean_reward,runtime_s";

struct AblationResult {
    std::vector<AblationRow> rows;  // cells first, then one median row per variant
};

inline AblationResult run_ablation(const TrainConfig& base, const VelocityModel& teacher,
                                   const std::vector<uint64_t>& seeds) {
    static const std::vector<std::pair<std::string, std::string>> matrix = {
        {"dmd2", "ode"}, {"dmd2", "sde"}, {"advdmd", "ode"}, {"advdmd", "sde"}};
    AblationResult out;
    // One bandwidth set for the whole table keeps the cells comparable.
    const auto cal = calibrate_mmd_band(base.target(), base.eval_samples, 8, base.seed);
    for (const auto& [variant, sim] : matrix) {
        for (uint64_t seed : seeds) {
            AblationRow row;
            row.variant = variant + "-" + sim;
            row.seed_label = std::to_string(seed);
            row.steps = base.n_student_steps;
            const auto t0 = std::chrono::steady_clock::now();
            try {
                TrainConfig cfg = base;
                cfg.variant = variant;
                cfg.sim = sim;
                cfg.seed = seed;
                cfg.validate();
                TrainState st = run_distillation(cfg, teacher);
                MetricReport rep = evaluate_state(st, cal.bandwidths, seed);
                row.mmd2 = rep.mmd2;
                row.w2 = rep.w2;
                row.coverage = rep.mode_coverage;
                row.mean_reward = rep.mean_reward;
            } catch (const std::exception&) {
                // Cell failure: metric fields stay empty, the grid continues.
            }
            row.runtime_s =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            out.rows.push_back(row);
        }
    }
    // Median-over-seeds summary per variant, over the cells that succeeded.
    for (const auto& [variant, sim] : matrix) {
        const std::string tag = variant + "-" + sim;
        AblationRow med;
        med.variant = tag;
        med.seed_label = "median";
        med.steps = base.n_student_steps;
        std::vector<double> ms, ws, cs, rs, ts;
        for (const auto& row : out.rows) {
            if (row.variant != tag || row.seed_label == "median" || !row.mmd2) continue;
            ms.push_back(*row.mmd2);
            ws.push_back(*row.w2);
            cs.push_back(*row.coverage);
            rs.push_back(*row.mean_reward);
            ts.push_back(row.runtime_s);
        }
        if (!ms.empty()) {
            med.mmd2 = median_of(ms);
            med.w2 = median_of(ws);
            med.coverage = median_of(cs);
            med.mean_reward = median_of(rs);
            med.runtime_s = median_of(ts);
        }
        out.rows.push_back(med);
    }
    return out;
}

inline void write_ablation_csv(const std::string& path, const AblationResult& res) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("ablation: cannot write '" + path + "'");
    out << kAblationHeader << "\n";
    for (const auto& row : res.rows) out << ablation_csv_row(row) << "\n";
}

// Sample dump: one "x,y,c" row per sample.
inline void write_samples_csv(const std::string& path, const LabeledBatch& batch) {
    if (batch.x.cols != 2) throw std::invalid_argument("write_samples_csv: expects 2-D samples");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("samples: cannot write '" + path + "'");
    out << "x,y,c\n";
    for (int i = 0; i < batch.x.rows; ++i) {
        out << format_double(batch.x.at(i, 0)) << "," << format_double(batch.x.at(i, 1)) << ","
            << batch.labels[i] << "\n";
    }
}

}  // namespace advdmd
