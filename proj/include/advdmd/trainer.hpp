// Training orchestration: the decoupled update schedule (several fake +
// discriminator updates per generator update, policy term deferred past a
// warmup), the composite generator update that reuses the policy
// trajectories' states for distillation, baseline variants, the binary
// checkpoint format, and the metrics CSV log.
#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "advdmd/config.hpp"
#include "advdmd/dmd.hpp"
#include "advdmd/flow.hpp"
#include "advdmd/grpo.hpp"
#include "advdmd/proxy.hpp"
#include "advdmd/reward.hpp"
#include "advdmd/sde.hpp"

namespace advdmd {

// ---------------------------------------------------------------------------
// Update schedule
// ---------------------------------------------------------------------------

enum class UnitRole { fake_and_disc, generator };

struct ScheduleSlot {
    UnitRole role = UnitRole::fake_and_disc;
    bool grpo_on = false;
    int64_t gen_ordinal = 0;  // 0-based index of the generator update, if role == generator
};

// Pure function of (step, config). Roles cycle F,...,F,G with
// fake_updates_per_gen leading F slots; the policy term joins once
// grpo_warmup_steps generator updates have completed. The fixed-reward
// baseline is policy-only, so every unit is a generator update there.
inline ScheduleSlot update_schedule(int64_t step, const TrainConfig& cfg) {
    ScheduleSlot slot;
    if (cfg.variant == "grpo_fixed") {
        slot.role = UnitRole::generator;
        slot.gen_ordinal = step;
        slot.grpo_on = true;
        return slot;
    }
    const int64_t cycle = cfg.fake_updates_per_gen + 1;
    if (step % cycle == cfg.fake_updates_per_gen) {
        slot.role = UnitRole::generator;
        slot.gen_ordinal = step / cycle;
        slot.grpo_on = cfg.variant == "advdmd" && slot.gen_ordinal >= cfg.grpo_warmup_steps;
    }
    return slot;
}

// ---------------------------------------------------------------------------
// Metrics log
// ---------------------------------------------------------------------------

struct StepLog {
    int64_t step = 0;
    std::string role;
    std::optional<double> l_dmd, l_gan, l_grpo, l_diff, l_dis, mean_reward, grad_norm;
};

inline constexpr const char* kMetricsHeader = "step,role,L_dmd,L_gan,L_grpo,L_diff,L_dis,mean_reward,grad_norm";

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string metrics_csv_row(const StepLog& r) {
    auto field = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
    std::string row = std::to_string(r.step) + "," + r.role;
    for (const auto* v : {&r.l_dmd, &r.l_gan, &r.l_grpo, &r.l_diff, &r.l_dis, &r.mean_reward, &r.grad_norm}) {
        row += "," + field(*v);
    }
    return row;
}

inline void write_metrics_csv(const std::string& path, const std::vector<StepLog>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("metrics: cannot write '" + path + "'");
    out << kMetricsHeader << "\n";
    for (const auto& r : rows) out << metrics_csv_row(r) << "\n";
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------
// Layout (little-endian): magic "ADMD", version byte, length-prefixed UTF-8
// config echo, then a counted section of tensor records, a counted section of
// optimizer records in the same format, the step counter, and the RNG state.
// Record: u32 name length, name bytes, u32 rank, u32 dims, f64 payload.

enum class CkptError { bad_magic, unsupported_version, truncated, io };

class CheckpointError : public std::runtime_error {
public:
    CheckpointError(CkptError code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
    CkptError code() const { return code_; }

private:
    CkptError code_;
};

struct Checkpoint {
    std::string config_echo;  // JSON: {"kind": "teacher"|"student", "config": {...}}
    std::vector<Tensor> tensors;
    std::vector<Tensor> opt_tensors;
    uint64_t step = 0;
    RngState rng;

    const Tensor* find(const std::string& name) const {
        for (const auto& t : tensors) {
            if (t.name == name) return &t;
        }
        return nullptr;
    }
};

inline constexpr char kCkptMagic[4] = {'A', 'D', 'M', 'D'};
inline constexpr uint8_t kCkptVersion = 1;

namespace detail {

template <class T>
void put(std::string& buf, T v) {
    char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    buf.append(raw, sizeof(T));
}

inline void put_tensor(std::string& buf, const Tensor& t) {
    put<uint32_t>(buf, static_cast<uint32_t>(t.name.size()));
    buf.append(t.name);
    put<uint32_t>(buf, static_cast<uint32_t>(t.shape.size()));
    for (int d : t.shape) put<uint32_t>(buf, static_cast<uint32_t>(d));
    for (double v : t.data) put<double>(buf, v);
}

class ByteReader {
public:
    explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}

    template <class T>
    T get() {
        if (pos_ + sizeof(T) > bytes_.size()) {
            throw CheckpointError(CkptError::truncated, "checkpoint: truncated file");
        }
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string get_bytes(size_t n) {
        if (pos_ + n > bytes_.size()) {
            throw CheckpointError(CkptError::truncated, "checkpoint: truncated file");
        }
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    Tensor get_tensor() {
        Tensor t;
        const uint32_t name_len = get<uint32_t>();
        t.name = get_bytes(name_len);
        const uint32_t rank = get<uint32_t>();
        size_t numel = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            const uint32_t d = get<uint32_t>();
            t.shape.push_back(static_cast<int>(d));
            numel *= d;
        }
        t.data.resize(numel);
        for (size_t i = 0; i < numel; ++i) t.data[i] = get<double>();
        return t;
    }

private:
    std::string bytes_;
    size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::string buf;
    buf.append(kCkptMagic, 4);
    detail::put<uint8_t>(buf, kCkptVersion);
    detail::put<uint32_t>(buf, static_cast<uint32_t>(ckpt.config_echo.size()));
    buf.append(ckpt.config_echo);
    detail::put<uint32_t>(buf, static_cast<uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) detail::put_tensor(buf, t);
    detail::put<uint32_t>(buf, static_cast<uint32_t>(ckpt.opt_tensors.size()));
    for (const auto& t : ckpt.opt_tensors) detail::put_tensor(buf, t);
    detail::put<uint64_t>(buf, ckpt.step);
    detail::put<uint64_t>(buf, ckpt.rng.state);
    detail::put<uint8_t>(buf, ckpt.rng.has_spare ? 1 : 0);
    detail::put<double>(buf, ckpt.rng.spare);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError(CkptError::io, "checkpoint: cannot write '" + path + "'");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError(CkptError::io, "checkpoint: short write to '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(CkptError::io, "checkpoint: cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    detail::ByteReader r(std::move(bytes));
    const std::string magic = r.get_bytes(4);
    if (std::memcmp(magic.data(), kCkptMagic, 4) != 0) {
        throw CheckpointError(CkptError::bad_magic, "checkpoint: bad magic in '" + path + "'");
    }
    const uint8_t version = r.get<uint8_t>();
    if (version != kCkptVersion) {
        throw CheckpointError(CkptError::unsupported_version,
                              "checkpoint: unsupported version " + std::to_string(version));
    }
    Checkpoint ckpt;
    ckpt.config_echo = r.get_bytes(r.get<uint32_t>());
    const uint32_t n_tensors = r.get<uint32_t>();
    for (uint32_t i = 0; i < n_tensors; ++i) ckpt.tensors.push_back(r.get_tensor());
    const uint32_t n_opt = r.get<uint32_t>();
    for (uint32_t i = 0; i < n_opt; ++i) ckpt.opt_tensors.push_back(r.get_tensor());
    ckpt.step = r.get<uint64_t>();
    ckpt.rng.state = r.get<uint64_t>();
    ckpt.rng.has_spare = r.get<uint8_t>() != 0;
    ckpt.rng.spare = r.get<double>();
    return ckpt;
}

namespace detail {

inline void pack_params(std::vector<Tensor>& out, const std::string& prefix, const ParamSet& p) {
    for (const auto& t : p.entries) out.push_back({prefix + "." + t.name, t.shape, t.data});
}

inline void unpack_params(const Checkpoint& ckpt, const std::string& prefix, ParamSet& p) {
    for (auto& t : p.entries) {
        const Tensor* src = ckpt.find(prefix + "." + t.name);
        if (!src) throw std::runtime_error("checkpoint: missing tensor '" + prefix + "." + t.name + "'");
        if (src->shape != t.shape) throw std::runtime_error("checkpoint: shape mismatch for '" + src->name + "'");
        t.data = src->data;
    }
}

inline void pack_opt(std::vector<Tensor>& out, const std::string& prefix, const ParamSet& p, const OptState& s) {
    for (size_t i = 0; i < p.entries.size(); ++i) {
        out.push_back({prefix + ".m." + p.entries[i].name, p.entries[i].shape, s.m[i]});
        out.push_back({prefix + ".v." + p.entries[i].name, p.entries[i].shape, s.v[i]});
    }
    out.push_back({prefix + ".step", {1}, {static_cast<double>(s.step)}});
}

inline void unpack_opt(const std::vector<Tensor>& opt_tensors, const std::string& prefix, const ParamSet& p,
                       OptState& s) {
    auto find = [&](const std::string& name) -> const Tensor& {
        for (const auto& t : opt_tensors) {
            if (t.name == name) return t;
        }
        throw std::runtime_error("checkpoint: missing optimizer tensor '" + name + "'");
    };
    s = OptState::create(p);
    for (size_t i = 0; i < p.entries.size(); ++i) {
        s.m[i] = find(prefix + ".m." + p.entries[i].name).data;
        s.v[i] = find(prefix + ".v." + p.entries[i].name).data;
    }
    s.step = static_cast<int64_t>(find(prefix + ".step").data[0]);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Model construction and teacher pretraining
// ---------------------------------------------------------------------------

inline VelocityModel build_velocity_net(const TrainConfig& cfg, const std::vector<int>& hidden, Rng& rng) {
    return make_velocity_model(cfg.data_dim, cfg.n_modes, hidden, rng, Activation::silu);
}

struct TeacherResult {
    VelocityModel model;
    OptState opt;
    std::vector<StepLog> history;
};

inline TeacherResult train_teacher(const TrainConfig& cfg) {
    Rng init_rng(cfg.seed, "teacher-init");
    TeacherResult res{build_velocity_net(cfg, cfg.gen_hidden, init_rng), {}, {}};
    res.opt = OptState::create(res.model.params);
    const MixtureTarget target = cfg.target();
    Rng data_rng(cfg.seed, "teacher-data");
    for (int step = 0; step < cfg.teacher_train_steps; ++step) {
        auto batch = sample_target(target, cfg.teacher_batch, data_rng);
        const double loss = cfm_train_step(res.model, batch, data_rng, res.opt, cfg.teacher_lr, cfg.cond_dropout);
        if (step % 50 == 0 || step + 1 == cfg.teacher_train_steps) {
            StepLog log;
            log.step = step;
            log.role = "teacher";
            log.l_diff = loss;
            res.history.push_back(log);
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Training state
// ---------------------------------------------------------------------------

struct TrainState {
    TrainConfig cfg;
    MixtureTarget target;
    VelocityModel teacher;  // frozen throughout
    VelocityModel generator;
    VelocityModel fake;
    Discriminator disc;
    OptState opt_gen, opt_fake;
    std::vector<OptState> opt_heads;
    ParamSet theta_ref;
    bool has_ref = false;
    int64_t step = 0;
    int64_t gen_updates = 0;
    int64_t incidents = 0;  // rolled-back units
    Rng rng;                // master stream (checkpointed; unit streams derive from cfg.seed)
    std::vector<StepLog> history;
};

// The student starts from the teacher (both the generator and the fake model
// are teacher copies), which also gives the fixed-reward baseline a sensible
// starting policy.
inline TrainState init_train_state(const TrainConfig& cfg, const VelocityModel& teacher) {
    cfg.validate();
    TrainState st;
    st.cfg = cfg;
    st.target = cfg.target();
    st.teacher = teacher;
    st.generator = teacher;
    st.fake = teacher;
    Rng head_rng(cfg.seed, "head-init");
    st.disc = make_discriminator(st.fake, cfg.tap_layers, cfg.head_hidden, head_rng);
    st.opt_gen = OptState::create(st.generator.params);
    st.opt_fake = OptState::create(st.fake.params);
    for (const auto& p : st.disc.head_params) st.opt_heads.push_back(OptState::create(p));
    st.rng = Rng(cfg.seed, "master");
    return st;
}

inline ProxyReward proxy_from_config(const TrainConfig& cfg) {
    if (cfg.proxy_kind == "norm_penalty") return ProxyReward::norm_penalty(cfg.proxy_tau);
    return ProxyReward::mode_pull(cfg.target().means[cfg.proxy_mode], cfg.proxy_tau);
}

// ---------------------------------------------------------------------------
// One scheduled unit
// ---------------------------------------------------------------------------

struct UnitDebug {
    GroupBatch group;
    Mat dmd_y;             // distillation source states
    Vec dmd_t;             // and their times
    std::vector<int> sel;  // chosen step index per sample
};

namespace detail {

struct DmdSource {
    Mat y;
    Vec t;
    std::vector<int> sel;
};

// "Select a subset of noisy samples at timestep t": one uniformly chosen
// intermediate state per sample (the first state is the pure-noise input,
// not an intermediate; one-step schedules have only that state and use it).
// In sde mode the states come straight out of the recorded policy
// trajectories; in ode mode a separate deterministic pass produces them (the
// redundant-sampling regime the sde mode eliminates).
inline DmdSource select_dmd_source(const TrainState& st, const GroupBatch* group, int condition,
                                   const SdeSchedule& sched, int64_t step) {
    const TrainConfig& cfg = st.cfg;
    Rng sel_rng(cfg.seed, "dmd-select", {static_cast<uint64_t>(step)});
    DmdSource src;
    src.y = Mat(cfg.group_size, cfg.data_dim);
    src.t.resize(cfg.group_size);
    src.sel.resize(cfg.group_size);
    for (int i = 0; i < cfg.group_size; ++i) {
        const int k = sched.n_steps() > 1 ? 1 + sel_rng.uniform_int(sched.n_steps() - 1) : 0;
        src.sel[i] = k;
        if (cfg.sim == "sde") {
            if (!group) throw std::logic_error("select_dmd_source: sde mode needs the policy group");
            src.y.set_row(i, group->trajectories[i].steps[k].x_from);
            src.t[i] = group->trajectories[i].steps[k].t_from;
        } else {
            Rng z_rng(cfg.seed, "dmd-ode-z", {static_cast<uint64_t>(step), static_cast<uint64_t>(i)});
            const Vec z = z_rng.normal_vec(cfg.data_dim);
            auto path = ode_sample_grid(st.generator, z, condition, sched.t_grid);
            src.y.set_row(i, path.states[k]);
            src.t[i] = sched.t_grid[k];
        }
    }
    return src;
}

inline GroupBatch sample_policy_group(const TrainState& st, int condition, const SdeSchedule& sched, int64_t step) {
    GroupBatch group;
    group.condition = condition;
    for (int i = 0; i < st.cfg.group_size; ++i) {
        Rng traj_rng(st.cfg.seed, "traj", {static_cast<uint64_t>(step), static_cast<uint64_t>(i)});
        const Vec z = traj_rng.normal_vec(st.cfg.data_dim);
        group.trajectories.push_back(sample_trajectory(st.generator, z, condition, sched, traj_rng));
    }
    return group;
}

inline bool grads_finite(const ParamSet& g) {
    for (const auto& t : g.entries) {
        if (!all_finite(t.data)) return false;
    }
    return true;
}

inline bool log_values_finite(const StepLog& log) {
    for (const auto* v : {&log.l_dmd, &log.l_gan, &log.l_grpo, &log.l_diff, &log.l_dis}) {
        if (v->has_value() && !std::isfinite(**v)) return false;
    }
    return true;
}

inline double generator_lr(const TrainState& st) {
    const TrainConfig& cfg = st.cfg;
    if (!cfg.lr_gen_cosine) return cfg.lr_gen;
    const double frac = static_cast<double>(st.step) / cfg.total_steps;
    return cfg.lr_gen * 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::min(frac, 1.0)));
}

inline StepLog generator_unit(TrainState& st, const ScheduleSlot& slot, UnitDebug* dbg) {
    const TrainConfig& cfg = st.cfg;
    const int64_t step = st.step;
    Rng unit_rng(cfg.seed, "unit", {static_cast<uint64_t>(step)});
    const int condition = unit_rng.uniform_int(cfg.n_modes);
    const auto sched = make_schedule(cfg.n_student_steps, cfg.eta, cfg.sigma_cap);

    StepLog log;
    log.step = step;
    log.role = "generator";

    const bool needs_policy_group = cfg.variant != "dmd2" || cfg.sim == "sde";
    // With eta = 0 only the dmd2 variant can run, and its "trajectories" are
    // deterministic; sampling still works and doubles as the sde-mode source.
    GroupBatch group;
    if (needs_policy_group) group = sample_policy_group(st, condition, sched, step);

    const ParamSet theta_old = st.generator.params;
    ParamSet grads = st.generator.params.zeros_like();

    // Distillation + adversarial path (absent in the fixed-reward baseline).
    if (cfg.variant != "grpo_fixed") {
        auto src = select_dmd_source(st, needs_policy_group ? &group : nullptr, condition, sched, step);
        std::vector<int> conds(cfg.group_size, condition);
        auto fr = forward(st.generator.spec, st.generator.params,
                          st.generator.encode_batch(src.y, src.t, conds));
        Mat x_gen(cfg.group_size, cfg.data_dim);
        for (int i = 0; i < cfg.group_size; ++i) {
            for (int j = 0; j < cfg.data_dim; ++j) {
                x_gen.at(i, j) = src.y.at(i, j) - src.t[i] * fr.outputs.at(i, j);
            }
        }
        Rng renoise_rng(cfg.seed, "renoise", {static_cast<uint64_t>(step)});
        auto batch = renoise(x_gen, conds, renoise_rng, cfg.renoise_t_lo, cfg.renoise_t_hi);
        const Mat cot_dmd =
            dmd_generator_cotangent(batch, st.teacher, st.fake, cfg.w_cfg, cfg.dmd_normalize);
        double dmd_mag = 0.0;
        for (int i = 0; i < cfg.group_size; ++i) dmd_mag += 0.5 * squared_norm(cot_dmd.row(i));
        log.l_dmd = dmd_mag / cfg.group_size;

        auto gan = gan_generator_loss(st.disc, st.fake, batch.x_t, batch.t_new, conds);
        log.l_gan = gan.loss;

        Mat cot_v(cfg.group_size, cfg.data_dim);
        for (int i = 0; i < cfg.group_size; ++i) {
            const double chain = 1.0 - batch.t_new[i];
            for (int j = 0; j < cfg.data_dim; ++j) {
                const double cot_xgen = cfg.alpha * cot_dmd.at(i, j) + cfg.gamma * gan.x_cotangent.at(i, j) * chain;
                cot_v.at(i, j) = -src.t[i] * cot_xgen;
            }
        }
        grads.accumulate(backward(st.generator.spec, st.generator.params, fr.trace, cot_v).grads);
        if (dbg) {
            dbg->dmd_y = src.y;
            dbg->dmd_t = src.t;
            dbg->sel = src.sel;
        }
    }

    if (slot.grpo_on) {
        Vec terminal;
        if (cfg.variant == "grpo_fixed") {
            const ProxyReward proxy = proxy_from_config(cfg);
            group.rewards = proxy_reward_table(proxy, group.trajectories);
            terminal = proxy_terminal_rewards(proxy, group.trajectories);
        } else {
            group.rewards = stepwise_rewards(st.disc, st.fake, group.trajectories, cfg.logit_reward);
            terminal = terminal_rewards(st.disc, st.fake, group.trajectories, cfg.logit_reward);
        }
        // Credit each transition with the reward of the state it produced:
        // column k of the advantage table is the normalized score of
        // transition k's outcome (the next entering state, or the terminal
        // state for the last transition). Pairing a transition with its
        // source-state score instead would make the expected policy gradient
        // vanish, since the score function is zero-mean given the source.
        RewardTable transition_rewards(group.size(), group.n_steps());
        for (int i = 0; i < group.size(); ++i) {
            for (int k = 0; k + 1 < group.n_steps(); ++k) {
                transition_rewards.at(i, k) = group.rewards.at(i, k + 1);
            }
            transition_rewards.at(i, group.n_steps() - 1) = terminal[i];
        }
        group.adv = advantages(transition_rewards);
        log.mean_reward = table_mean(group.rewards);
        if (!st.has_ref) {
            st.theta_ref = theta_old;
            st.has_ref = true;
        }
        auto res = grpo_loss(group, st.generator, {theta_old, st.theta_ref}, cfg.eps_clip, cfg.beta);
        log.l_grpo = res.loss;
        grads.accumulate(res.grads);
    }

    log.grad_norm = grads.l2_norm();
    if (!grads_finite(grads) || !log_values_finite(log)) {
        st.incidents += 1;
        log.role = "generator-rollback";
        return log;
    }
    optimizer_step(st.generator.params, grads, st.opt_gen, generator_lr(st));
    st.gen_updates += 1;
    if (dbg) dbg->group = std::move(group);
    return log;
}

inline StepLog fake_disc_unit(TrainState& st, UnitDebug* dbg) {
    const TrainConfig& cfg = st.cfg;
    const int64_t step = st.step;
    Rng unit_rng(cfg.seed, "unit", {static_cast<uint64_t>(step)});
    const int condition = unit_rng.uniform_int(cfg.n_modes);
    const auto sched = make_schedule(cfg.n_student_steps, cfg.eta, cfg.sigma_cap);

    StepLog log;
    log.step = step;
    log.role = "fake_and_disc";

    GroupBatch group;
    if (cfg.sim == "sde") group = sample_policy_group(st, condition, sched, step);
    auto src = select_dmd_source(st, cfg.sim == "sde" ? &group : nullptr, condition, sched, step);

    // One-shot denoise, no gradient: these are data for the fake model and
    // the discriminator.
    std::vector<int> conds(cfg.group_size, condition);
    Mat x_gen(cfg.group_size, cfg.data_dim);
    for (int i = 0; i < cfg.group_size; ++i) {
        const Vec v = st.generator.velocity(src.y.row_vec(i), src.t[i], condition);
        for (int j = 0; j < cfg.data_dim; ++j) x_gen.at(i, j) = src.y.at(i, j) - src.t[i] * v[j];
    }
    Rng renoise_rng(cfg.seed, "renoise", {static_cast<uint64_t>(step)});
    auto batch = renoise(x_gen, conds, renoise_rng, cfg.renoise_t_lo, cfg.renoise_t_hi);

    // Transactional update: gradients are validated before any mutation.
    auto fg = fake_model_grads(st.fake, batch);
    log.l_diff = fg.loss;

    Rng real_rng(cfg.seed, "disc-real", {static_cast<uint64_t>(step)});
    auto real = sample_target(st.target, cfg.group_size, real_rng);
    Rng disc_rng(cfg.seed, "disc-noise", {static_cast<uint64_t>(step)});
    auto dg = disc_loss_grads(st.disc, st.fake, real.x, real.labels, x_gen, conds, disc_rng);
    log.l_dis = dg.loss;

    double gn = fg.grads.l2_norm() * fg.grads.l2_norm();
    bool finite = grads_finite(fg.grads);
    for (const auto& hg : dg.head_grads) {
        gn += hg.l2_norm() * hg.l2_norm();
        finite = finite && grads_finite(hg);
    }
    log.grad_norm = std::sqrt(gn);
    if (!finite || !log_values_finite(log)) {
        st.incidents += 1;
        log.role = "fake_and_disc-rollback";
        return log;
    }
    optimizer_step(st.fake.params, fg.grads, st.opt_fake, cfg.lr_fake);
    for (int k = 0; k < st.disc.n_heads(); ++k) {
        optimizer_step(st.disc.head_params[k], dg.head_grads[k], st.opt_heads[k], cfg.lr_heads);
    }
    if (dbg) dbg->group = std::move(group);
    return log;
}

inline StepLog run_unit(TrainState& st, UnitDebug* dbg) {
    const ScheduleSlot slot = update_schedule(st.step, st.cfg);
    StepLog log = slot.role == UnitRole::generator ? generator_unit(st, slot, dbg) : fake_disc_unit(st, dbg);
    st.step += 1;
    st.history.push_back(log);
    return log;
}

}  // namespace detail

inline StepLog advdmd_step(TrainState& st, UnitDebug* dbg = nullptr) {
    if (st.cfg.variant != "advdmd") throw std::invalid_argument("advdmd_step: config variant is not advdmd");
    return detail::run_unit(st, dbg);
}

inline StepLog baseline_step(TrainState& st, const std::string& variant, UnitDebug* dbg = nullptr) {
    if (variant != "dmd2" && variant != "grpo_fixed") {
        throw std::invalid_argument("baseline_step: variant must be dmd2 or grpo_fixed");
    }
    if (st.cfg.variant != variant) throw std::invalid_argument("baseline_step: state configured for another variant");
    return detail::run_unit(st, dbg);
}

// Runs the configured number of scheduled units for whichever variant the
// config names.
inline TrainState run_distillation(const TrainConfig& cfg, const VelocityModel& teacher) {
    TrainState st = init_train_state(cfg, teacher);
    for (int64_t s = 0; s < cfg.total_steps; ++s) detail::run_unit(st, nullptr);
    return st;
}

// ---------------------------------------------------------------------------
// Checkpoint packing for teacher and student states
// ---------------------------------------------------------------------------

inline Checkpoint make_teacher_checkpoint(const TrainConfig& cfg, const TeacherResult& teacher) {
    Checkpoint ckpt;
    nlohmann::json echo;
    echo["kind"] = "teacher";
    echo["config"] = config_to_json(cfg);
    ckpt.config_echo = echo.dump();
    detail::pack_params(ckpt.tensors, "model", teacher.model.params);
    detail::pack_opt(ckpt.opt_tensors, "opt.model", teacher.model.params, teacher.opt);
    ckpt.step = static_cast<uint64_t>(cfg.teacher_train_steps);
    return ckpt;
}

inline Checkpoint make_student_checkpoint(const TrainState& st) {
    Checkpoint ckpt;
    nlohmann::json echo;
    echo["kind"] = "student";
    echo["config"] = config_to_json(st.cfg);
    echo["gen_updates"] = st.gen_updates;
    echo["incidents"] = st.incidents;
    echo["has_ref"] = st.has_ref;
    ckpt.config_echo = echo.dump();
    detail::pack_params(ckpt.tensors, "gen", st.generator.params);
    detail::pack_params(ckpt.tensors, "fake", st.fake.params);
    detail::pack_params(ckpt.tensors, "teacher", st.teacher.params);
    for (int k = 0; k < st.disc.n_heads(); ++k) {
        detail::pack_params(ckpt.tensors, "head" + std::to_string(k), st.disc.head_params[k]);
    }
    if (st.has_ref) detail::pack_params(ckpt.tensors, "ref", st.theta_ref);
    detail::pack_opt(ckpt.opt_tensors, "opt.gen", st.generator.params, st.opt_gen);
    detail::pack_opt(ckpt.opt_tensors, "opt.fake", st.fake.params, st.opt_fake);
    for (int k = 0; k < st.disc.n_heads(); ++k) {
        detail::pack_opt(ckpt.opt_tensors, "opt.head" + std::to_string(k), st.disc.head_params[k],
                         st.opt_heads[k]);
    }
    ckpt.step = static_cast<uint64_t>(st.step);
    ckpt.rng = st.rng.snapshot();
    return ckpt;
}

struct LoadedCheckpoint {
    std::string kind;
    TrainConfig cfg;
    Checkpoint raw;
};

inline LoadedCheckpoint open_checkpoint(const std::string& path) {
    LoadedCheckpoint lc;
    lc.raw = load_checkpoint(path);
    nlohmann::json echo = nlohmann::json::parse(lc.raw.config_echo);
    lc.kind = echo.at("kind").get<std::string>();
    lc.cfg = config_from_json(echo.at("config"));
    return lc;
}

inline VelocityModel teacher_from_checkpoint(const LoadedCheckpoint& lc) {
    Rng dummy(0);
    VelocityModel m = build_velocity_net(lc.cfg, lc.cfg.gen_hidden, dummy);
    detail::unpack_params(lc.raw, lc.kind == "teacher" ? "model" : "teacher", m.params);
    return m;
}

inline TrainState state_from_checkpoint(const LoadedCheckpoint& lc) {
    if (lc.kind != "student") throw std::runtime_error("checkpoint: expected a student checkpoint");
    nlohmann::json echo = nlohmann::json::parse(lc.raw.config_echo);
    TrainState st = init_train_state(lc.cfg, teacher_from_checkpoint(lc));
    detail::unpack_params(lc.raw, "gen", st.generator.params);
    detail::unpack_params(lc.raw, "fake", st.fake.params);
    for (int k = 0; k < st.disc.n_heads(); ++k) {
        detail::unpack_params(lc.raw, "head" + std::to_string(k), st.disc.head_params[k]);
    }
    st.has_ref = echo.value("has_ref", false);
    if (st.has_ref) {
        st.theta_ref = st.generator.params.zeros_like();
        detail::unpack_params(lc.raw, "ref", st.theta_ref);
    }
    detail::unpack_opt(lc.raw.opt_tensors, "opt.gen", st.generator.params, st.opt_gen);
    detail::unpack_opt(lc.raw.opt_tensors, "opt.fake", st.fake.params, st.opt_fake);
    for (int k = 0; k < st.disc.n_heads(); ++k) {
        detail::unpack_opt(lc.raw.opt_tensors, "opt.head" + std::to_string(k), st.disc.head_params[k],
                           st.opt_heads[k]);
    }
    st.step = static_cast<int64_t>(lc.raw.step);
    st.gen_updates = echo.value("gen_updates", int64_t{0});
    st.incidents = echo.value("incidents", int64_t{0});
    st.rng.restore(lc.raw.rng);
    return st;
}

// ---------------------------------------------------------------------------
// Sampling helpers shared by evaluation and the CLI
// ---------------------------------------------------------------------------

// Deterministic n-step generation on the student's training grid (an eta = 0
// pass plus the terminal one-shot denoise), conditions cycled uniformly.
inline LabeledBatch sample_student(const VelocityModel& model, int n_modes, int n, int n_steps, uint64_t seed) {
    const auto sched = make_schedule(n_steps, 0.0);
    LabeledBatch out;
    out.x = Mat(n, model.data_dim);
    out.labels.resize(n);
    for (int i = 0; i < n; ++i) {
        Rng z_rng(seed, "sample-z", {static_cast<uint64_t>(i)});
        const int c = i % n_modes;
        auto traj = sample_trajectory(model, z_rng.normal_vec(model.data_dim), c, sched, z_rng);
        out.x.set_row(i, traj.terminal_x0);
        out.labels[i] = c;
    }
    return out;
}

// Full-interval deterministic sampling (the multi-step reference path).
inline LabeledBatch sample_ode_reference(const VelocityModel& model, int n_modes, int n, int n_steps, double w_cfg,
                                         uint64_t seed) {
    LabeledBatch out;
    out.x = Mat(n, model.data_dim);
    out.labels.resize(n);
    for (int i = 0; i < n; ++i) {
        Rng z_rng(seed, "sample-z", {static_cast<uint64_t>(i)});
        const int c = i % n_modes;
        auto path = ode_sample(model, z_rng.normal_vec(model.data_dim), c, n_steps, w_cfg);
        out.x.set_row(i, path.states.back());
        out.labels[i] = c;
    }
    return out;
}

}  // namespace advdmd
