// Group-relative policy optimization over recorded SDE trajectories:
// per-timestep group-normalized advantages, importance ratios against the
// sampling policy, the clipped surrogate, and a closed-form Gaussian KL
// penalty against a frozen reference. The implemented loss is the negation of
// the maximized surrogate plus the KL penalty, so gradient descent on it
// performs the intended update.
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "advdmd/flow.hpp"
#include "advdmd/mat.hpp"
#include "advdmd/net.hpp"
#include "advdmd/reward.hpp"
#include "advdmd/sde.hpp"

namespace advdmd {

inline constexpr double kAdvantageStdFloor = 1e-8;

using AdvantageTable = Mat;

// Frozen generator parameters: the sampling policy and the KL reference.
struct PolicySnapshot {
    ParamSet theta_old;
    ParamSet theta_ref;
};

// Trajectories sharing one condition, with their reward and advantage tables.
struct GroupBatch {
    int condition = 0;
    std::vector<Trajectory> trajectories;
    RewardTable rewards;
    AdvantageTable adv;

    int size() const { return static_cast<int>(trajectories.size()); }
    int n_steps() const { return trajectories.empty() ? 0 : static_cast<int>(trajectories.front().steps.size()); }
};

// Column-wise (per-timestep) normalization with the population standard
// deviation. Columns whose spread is at or below the floor are mapped to
// all-zero advantages instead of blowing up.
inline AdvantageTable advantages(const RewardTable& rewards) {
    const int G = rewards.rows;
    const int T = rewards.cols;
    if (G < 2) throw std::invalid_argument("advantages: need a group of at least 2");
    AdvantageTable adv(G, T);
    for (int t = 0; t < T; ++t) {
        double mean = 0.0;
        for (int i = 0; i < G; ++i) mean += rewards.at(i, t);
        mean /= G;
        double var = 0.0;
        for (int i = 0; i < G; ++i) {
            const double d = rewards.at(i, t) - mean;
            var += d * d;
        }
        const double std_dev = std::sqrt(var / G);
        if (std_dev <= kAdvantageStdFloor) {
            for (int i = 0; i < G; ++i) adv.at(i, t) = 0.0;
        } else {
            for (int i = 0; i < G; ++i) adv.at(i, t) = (rewards.at(i, t) - mean) / std_dev;
        }
    }
    return adv;
}

// Importance ratio of one recorded transition under new parameters.
template <VelocityField FNew, VelocityField FOld>
double ratio(const TrajStep& step, const FNew& field_new, const FOld& field_old, int c) {
    const double lp_new = transition_logprob(step, field_new, c);
    const double lp_old = transition_logprob(step, field_old, c);
    if (!std::isfinite(lp_new) || !std::isfinite(lp_old)) {
        throw std::runtime_error("ratio: non-finite log-probability");
    }
    return std::exp(lp_new - lp_old);
}

inline double clipped_term(double r, double adv, double eps_clip) {
    if (!(eps_clip > 0.0 && eps_clip < 1.0)) throw std::invalid_argument("clipped_term: eps_clip must be in (0,1)");
    const double clipped = std::clamp(r, 1.0 - eps_clip, 1.0 + eps_clip);
    return std::min(r * adv, clipped * adv);
}

// KL between two Gaussian step transitions with shared isotropic covariance.
inline double kl_step(const Vec& mean_new, const Vec& mean_ref, double noise_std) {
    return squared_distance(mean_new, mean_ref) / (2.0 * noise_std * noise_std);
}

struct GrpoResult {
    double loss = 0.0;
    double surrogate = 0.0;  // the maximized part, before negation
    double kl = 0.0;         // mean per-step KL against the reference
    ParamSet grads;
};

// Full objective over one group:
//   loss = -(1/G) sum_i (1/T) sum_t min(r A, clip(r) A) + beta * mean KL.
// Ratios use the recorded sampling log-probabilities (identical to a
// recomputation under theta_old), and gradients reach the generator through
// the recomputed transition means. Processes one schedule step at a time with
// the whole group batched.
inline GrpoResult grpo_loss(const GroupBatch& group, const VelocityModel& generator, const PolicySnapshot& snapshot,
                            double eps_clip, double beta) {
    const int G = group.size();
    const int T = group.n_steps();
    if (G < 2) throw std::invalid_argument("grpo_loss: need a group of at least 2");
    if (group.adv.rows != G || group.adv.cols != T) throw std::invalid_argument("grpo_loss: advantage table shape");
    const int d = generator.data_dim;
    const double inv_gt = 1.0 / (static_cast<double>(G) * T);

    GrpoResult out;
    out.grads = generator.params.zeros_like();
    VelocityModel ref = generator;
    ref.params = snapshot.theta_ref;

    for (int k = 0; k < T; ++k) {
        const TrajStep& probe = group.trajectories.front().steps[k];
        if (probe.deterministic || probe.noise_std <= 0.0) {
            throw std::invalid_argument("grpo_loss: deterministic trajectories (eta = 0) have no density ratio");
        }
        Mat x(G, d);
        Vec ts(G, probe.t_from);
        std::vector<int> conds(G, group.condition);
        for (int i = 0; i < G; ++i) x.set_row(i, group.trajectories[i].steps[k].x_from);

        auto fr = forward(generator.spec, generator.params, generator.encode_batch(x, ts, conds));
        auto ref_v = forward(ref.spec, ref.params, ref.encode_batch(x, ts, conds)).outputs;

        Mat v_cot(G, d);
        for (int i = 0; i < G; ++i) {
            const TrajStep& step = group.trajectories[i].steps[k];
            const Vec v = fr.outputs.row_vec(i);
            const Vec mean_new = sde_drift_mean(step.x_from, v, step.t_from, step.dt(), step.sigma);
            const double lp_new = gaussian_logp(step.x_to, mean_new, step.noise_std);
            if (!std::isfinite(lp_new)) throw std::runtime_error("grpo_loss: non-finite log-probability");
            const double r = std::exp(lp_new - step.logp);
            const double a = group.adv.at(i, k);
            const double clipped = std::clamp(r, 1.0 - eps_clip, 1.0 + eps_clip);
            const double term = std::min(r * a, clipped * a);
            out.surrogate += inv_gt * term;
            // d term / d logp: r*a on the unclipped branch, 0 when the clip binds.
            const double dterm_dlp = (r * a <= clipped * a) ? r * a : 0.0;

            const Vec mean_ref = sde_drift_mean(step.x_from, ref_v.row_vec(i), step.t_from, step.dt(), step.sigma);
            out.kl += inv_gt * kl_step(mean_new, mean_ref, step.noise_std);

            const double dmean_dv = sde_drift_dv(step.t_from, step.dt(), step.sigma);
            const double s2 = step.noise_std * step.noise_std;
            for (int j = 0; j < d; ++j) {
                // loss <- -surrogate + beta*KL, both through mean_new.
                const double dlp_dmean = (step.x_to[j] - mean_new[j]) / s2;
                const double dkl_dmean = (mean_new[j] - mean_ref[j]) / s2;
                v_cot.at(i, j) = inv_gt * (-dterm_dlp * dlp_dmean + beta * dkl_dmean) * dmean_dv;
            }
        }
        auto br = backward(generator.spec, generator.params, fr.trace, v_cot);
        out.grads.accumulate(br.grads);
    }
    out.loss = -out.surrogate + beta * out.kl;
    return out;
}

}  // namespace advdmd
