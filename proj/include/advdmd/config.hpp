// Run configuration: every knob of the trainer in one strict-schema JSON
// document. Unknown keys are rejected by name (a typo in a hyperparameter
// name must fail loudly, not silently train with a default), missing keys
// take the documented defaults, and the resolved form round-trips.
#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "advdmd/flow.hpp"

namespace advdmd {

struct TrainConfig {
    uint64_t seed = 0;
    std::string variant = "advdmd";  // advdmd | dmd2 | grpo_fixed
    std::string sim = "sde";         // sde: distillation reuses the policy trajectories; ode: separate pass

    // Synthetic target: isotropic Gaussian modes on a ring, modes = classes.
    int data_dim = 2;
    int n_modes = 8;
    double ring_radius = 2.0;
    double component_std = 0.15;

    // Architectures. The fake model needs one hidden layer per tap.
    std::vector<int> gen_hidden{48, 48, 48};
    std::vector<int> fake_hidden{48, 48, 48};
    std::vector<int> head_hidden{24};
    std::vector<int> tap_layers{0, 1, 2};

    // Composite generator objective weights: the distillation term at 0.1 and
    // the adversarial term at 0.01, the policy term unweighted.
    double alpha = 0.1;
    double gamma = 0.01;
    // Trust region: clip width 0.2; KL weight against the warmup-end
    // reference is a small stabilizer.
    double beta = 0.004;
    double eps_clip = 0.2;

    // Stochastic exploration strength and the guard on sigma's t->1 blowup.
    double eta = 0.7;
    double sigma_cap = 3.0;

    // Guidance applied to the real score inside the distillation direction.
    // Full-scale recipes run this at 3.5; the desk-scale mixture needs none.
    double w_cfg = 1.0;
    bool dmd_normalize = true;   // per-sample mean-|d| normalizer on the score difference
    bool logit_reward = false;   // reward = raw D by default, logits behind this flag
    double renoise_t_lo = 0.02;  // keeps both scores well-conditioned
    double renoise_t_hi = 0.98;

    // Group sampling and update scheduling. Full-scale recipes use groups of
    // 32; desk scale runs 8. Five fake/discriminator updates per generator
    // update, and the policy term joins after the warmup count of generator
    // updates.
    int group_size = 8;
    int fake_updates_per_gen = 5;
    int grpo_warmup_steps = 200;
    int total_steps = 3000;
    int n_student_steps = 4;
    int teacher_steps = 50;

    // Learning rates. Full-scale recipes pair 5e-6 / 1e-6 / 1e-4 for
    // generator / fake / heads; desk-scale nets keep the same ordering
    // (fake slower than generator, heads fastest) at larger magnitudes.
    double lr_gen = 3e-5;
    double lr_fake = 6e-6;
    double lr_heads = 1e-3;
    // Cosine decay of the generator rate to zero over total_steps; the other
    // rates stay fixed.
    bool lr_gen_cosine = true;

    // Teacher pretraining.
    int teacher_train_steps = 800;
    int teacher_batch = 128;
    double teacher_lr = 1e-3;
    double cond_dropout = 0.1;

    // Fixed proxy reward for the reward-hacking baseline.
    std::string proxy_kind = "mode_pull";  // mode_pull | norm_penalty
    int proxy_mode = 0;
    double proxy_tau = 1.0;

    int eval_samples = 2048;

    MixtureTarget target() const { return ring_target(n_modes, ring_radius, component_std); }

    void validate() const {
        auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
        if (variant != "advdmd" && variant != "dmd2" && variant != "grpo_fixed") {
            fail("variant must be advdmd, dmd2 or grpo_fixed (got '" + variant + "')");
        }
        if (sim != "sde" && sim != "ode") fail("sim must be sde or ode (got '" + sim + "')");
        if (data_dim < 1) fail("data_dim must be >= 1");
        if (n_modes < 1) fail("n_modes must be >= 1");
        if (ring_radius <= 0.0) fail("ring_radius must be > 0");
        if (component_std <= 0.0) fail("component_std must be > 0");
        if (gen_hidden.empty() || fake_hidden.empty() || head_hidden.empty()) {
            fail("hidden layer lists must be non-empty");
        }
        if (tap_layers.empty()) fail("tap_layers must name at least one head");
        for (int tap : tap_layers) {
            if (tap < 0 || tap >= static_cast<int>(fake_hidden.size())) {
                fail("tap layer " + std::to_string(tap) + " outside the fake model's hidden stack");
            }
        }
        if (alpha < 0.0 || gamma < 0.0 || beta < 0.0) fail("loss weights must be >= 0");
        if (!(eps_clip > 0.0 && eps_clip < 1.0)) fail("eps_clip must be in (0, 1)");
        if (eta < 0.0) fail("eta must be >= 0");
        if (sigma_cap <= 0.0) fail("sigma_cap must be > 0");
        if (w_cfg < 0.0) fail("w_cfg must be >= 0");
        if (renoise_t_lo < kTimeMin || renoise_t_hi > kTimeMax || renoise_t_lo > renoise_t_hi) {
            fail("renoise range must lie within [t_min, t_max]");
        }
        if (group_size < 2) fail("group_size must be >= 2");
        if (fake_updates_per_gen < 1) fail("fake_updates_per_gen must be >= 1");
        if (grpo_warmup_steps < 0) fail("grpo_warmup_steps must be >= 0");
        if (total_steps < 1) fail("total_steps must be >= 1");
        if (n_student_steps != 1 && n_student_steps != 2 && n_student_steps != 4) {
            fail("n_student_steps must be 1, 2 or 4");
        }
        if (teacher_steps < 1) fail("teacher_steps must be >= 1");
        if (lr_gen <= 0.0 || lr_fake <= 0.0 || lr_heads <= 0.0 || teacher_lr <= 0.0) {
            fail("learning rates must be > 0");
        }
        if (teacher_train_steps < 1 || teacher_batch < 1) fail("teacher training sizes must be >= 1");
        if (!(cond_dropout >= 0.0 && cond_dropout < 1.0)) fail("cond_dropout must be in [0, 1)");
        if (proxy_kind != "mode_pull" && proxy_kind != "norm_penalty") {
            fail("proxy_kind must be mode_pull or norm_penalty");
        }
        if (proxy_mode < 0 || proxy_mode >= n_modes) fail("proxy_mode outside mode range");
        if (proxy_tau <= 0.0) fail("proxy_tau must be > 0");
        if (eval_samples < 2) fail("eval_samples must be >= 2");
        if ((variant == "advdmd" || variant == "grpo_fixed") && eta == 0.0) {
            fail("policy-gradient variants need eta > 0 (deterministic transitions have no density)");
        }
    }
};

namespace detail {

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

#define ADVDMD_CONFIG_KEYS(X)                                                                               \
    X(seed)                                                                                                 \
    X(variant)                                                                                              \
    X(sim)                                                                                                  \
    X(data_dim)                                                                                             \
    X(n_modes)                                                                                              \
    X(ring_radius)                                                                                          \
    X(component_std)                                                                                        \
    X(gen_hidden)                                                                                           \
    X(fake_hidden)                                                                                          \
    X(head_hidden)                                                                                          \
    X(tap_layers)                                                                                           \
    X(alpha)                                                                                                \
    X(gamma)                                                                                                \
    X(beta)                                                                                                 \
    X(eps_clip)                                                                                             \
    X(eta)                                                                                                  \
    X(sigma_cap)                                                                                            \
    X(w_cfg)                                                                                                \
    X(dmd_normalize)                                                                                        \
    X(logit_reward)                                                                                         \
    X(renoise_t_lo)                                                                                         \
    X(renoise_t_hi)                                                                                         \
    X(group_size)                                                                                           \
    X(fake_updates_per_gen)                                                                                 \
    X(grpo_warmup_steps)                                                                                    \
    X(total_steps)                                                                                          \
    X(n_student_steps)                                                                                      \
    X(teacher_steps)                                                                                        \
    X(lr_gen)                                                                                               \
    X(lr_fake)                                                                                              \
    X(lr_heads)                                                                                             \
    X(lr_gen_cosine)                                                                                        \
    X(teacher_train_steps)                                                                                  \
    X(teacher_batch)                                                                                        \
    X(teacher_lr)                                                                                           \
    X(cond_dropout)                                                                                         \
    X(proxy_kind)                                                                                           \
    X(proxy_mode)                                                                                           \
    X(proxy_tau)                                                                                            \
    X(eval_samples)

inline TrainConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("config: top-level JSON must be an object");
    static const std::set<std::string> known = {
#define ADVDMD_KEY_NAME(k) #k,
        ADVDMD_CONFIG_KEYS(ADVDMD_KEY_NAME)
#undef ADVDMD_KEY_NAME
    };
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.contains(it.key())) {
            throw std::invalid_argument("config: unknown key '" + it.key() + "'");
        }
    }
    TrainConfig c;
#define ADVDMD_KEY_READ(k) detail::read_key(j, #k, c.k);
    ADVDMD_CONFIG_KEYS(ADVDMD_KEY_READ)
#undef ADVDMD_KEY_READ
    c.validate();
    return c;
}

inline nlohmann::json config_to_json(const TrainConfig& c) {
    nlohmann::json j;
#define ADVDMD_KEY_WRITE(k) j[#k] = c.k;
    ADVDMD_CONFIG_KEYS(ADVDMD_KEY_WRITE)
#undef ADVDMD_KEY_WRITE
    return j;
}

inline TrainConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);  // parse errors carry line/column
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(std::string("config: ") + e.what());
    }
    return config_from_json(j);
}

inline void save_config(const TrainConfig& c, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("config: cannot write '" + path + "'");
    out << config_to_json(c).dump(2) << "\n";
}

}  // namespace advdmd
