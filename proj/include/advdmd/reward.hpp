// The distillation discriminator doubled as a reward model: K small heads read
// hidden-layer activations of the (frozen) fake model plus the time and
// condition, and their sigmoid average is both the adversarial score and the
// per-timestep reward. Head training touches only head parameters; generator
// training receives a cotangent through the backbone without mutating it.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "advdmd/flow.hpp"
#include "advdmd/mat.hpp"
#include "advdmd/net.hpp"
#include "advdmd/rng.hpp"
#include "advdmd/sde.hpp"

namespace advdmd {

// Guard for log(D) / log(1-D); finite logits keep D strictly inside (0,1),
// the clamp only catches sigmoid underflow.
inline constexpr double kDScoreFloor = 1e-12;

inline double sigmoid(double z) {
    if (z >= 0.0) {
        const double e = std::exp(-z);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

struct Discriminator {
    std::vector<int> tap_layers;  // hidden-layer indices into the fake model
    std::vector<NetSpec> head_specs;
    std::vector<ParamSet> head_params;
    int n_conditions = 0;

    int n_heads() const { return static_cast<int>(head_specs.size()); }

    void validate(const VelocityModel& fake) const {
        if (tap_layers.empty()) throw std::invalid_argument("Discriminator: need at least one head");
        if (tap_layers.size() != head_specs.size() || head_specs.size() != head_params.size()) {
            throw std::invalid_argument("Discriminator: head bookkeeping out of sync");
        }
        for (size_t k = 0; k < tap_layers.size(); ++k) {
            const int tap = tap_layers[k];
            if (tap < 0 || tap >= fake.spec.n_hidden()) {
                throw std::invalid_argument("Discriminator: tap index " + std::to_string(tap) + " out of range");
            }
            const int want = fake.spec.layer_dims[tap + 1] + 1 + n_conditions + 1;
            if (head_specs[k].input_dim() != want) {
                throw std::invalid_argument("Discriminator: head " + std::to_string(k) + " input width mismatch");
            }
            if (head_specs[k].output_dim() != 1) {
                throw std::invalid_argument("Discriminator: heads must output a scalar logit");
            }
        }
    }
};

// Heads are zero-initialized in their final layer so the initial score is
// exactly 0.5 everywhere.
inline Discriminator make_discriminator(const VelocityModel& fake, const std::vector<int>& tap_layers,
                                        const std::vector<int>& head_hidden, Rng& rng) {
    Discriminator d;
    d.n_conditions = fake.n_conditions;
    d.tap_layers = tap_layers;
    for (int tap : tap_layers) {
        if (tap < 0 || tap >= fake.spec.n_hidden()) {
            throw std::invalid_argument("make_discriminator: tap index " + std::to_string(tap) + " out of range");
        }
        NetSpec spec;
        spec.activation = Activation::tanh_act;
        spec.layer_dims.push_back(fake.spec.layer_dims[tap + 1] + 1 + d.n_conditions + 1);
        for (int h : head_hidden) spec.layer_dims.push_back(h);
        spec.layer_dims.push_back(1);
        d.head_specs.push_back(spec);
        d.head_params.push_back(init_params(spec, rng, /*zero_last_layer=*/true));
    }
    return d;
}

inline Vec encode_head_row(std::span<const double> tap_act, double t, int c, int n_conditions) {
    Vec row(tap_act.size() + 1 + static_cast<size_t>(n_conditions) + 1, 0.0);
    std::copy(tap_act.begin(), tap_act.end(), row.begin());
    row[tap_act.size()] = t;
    row[tap_act.size() + 1 + (c == kNullCondition ? n_conditions : c)] = 1.0;
    return row;
}

// Batched discriminator evaluation with all traces kept for the two gradient
// paths (head updates, and the cotangent through the backbone).
struct DiscForward {
    ForwardResult backbone;
    std::vector<ForwardResult> heads;  // per-head, batched
    Mat logits;                        // n x K
    Vec d;                             // clamped sigmoid average per row
};

inline DiscForward disc_forward(const Discriminator& disc, const VelocityModel& fake, const Mat& x,
                                std::span<const double> ts, std::span<const int> conds) {
    disc.validate(fake);
    const int n = x.rows;
    DiscForward out;
    out.backbone = forward(fake.spec, fake.params, fake.encode_batch(x, ts, conds));
    const int K = disc.n_heads();
    out.logits = Mat(n, K);
    out.d.assign(n, 0.0);
    for (int k = 0; k < K; ++k) {
        const Mat& tap_act = out.backbone.trace.act[disc.tap_layers[k]];
        Mat head_in(n, disc.head_specs[k].input_dim());
        for (int r = 0; r < n; ++r) {
            head_in.set_row(r, encode_head_row(tap_act.row(r), ts[r], conds[r], disc.n_conditions));
        }
        out.heads.push_back(forward(disc.head_specs[k], disc.head_params[k], head_in));
        for (int r = 0; r < n; ++r) out.logits.at(r, k) = out.heads.back().outputs.at(r, 0);
    }
    for (int r = 0; r < n; ++r) {
        double s = 0.0;
        for (int k = 0; k < K; ++k) s += sigmoid(out.logits.at(r, k));
        out.d[r] = std::clamp(s / K, kDScoreFloor, 1.0 - kDScoreFloor);
    }
    return out;
}

inline double d_score(const Discriminator& disc, const VelocityModel& fake, const Vec& x, double t, int c) {
    Mat xm(1, static_cast<int>(x.size()));
    xm.set_row(0, x);
    const double ts[1] = {t};
    const int cs[1] = {c};
    return disc_forward(disc, fake, xm, ts, cs).d[0];
}

// ---------------------------------------------------------------------------
// Adversarial losses
// ---------------------------------------------------------------------------

struct DiscLossGrads {
    double loss = 0.0;
    std::vector<ParamSet> head_grads;
};

namespace detail {

// Given dL/dD per row, runs every head backward and accumulates head-parameter
// gradients; optionally collects the cotangent on the backbone input rows.
inline void backprop_heads(const Discriminator& disc, const VelocityModel& fake, const DiscForward& fw,
                           const Vec& dl_dd, std::vector<ParamSet>* head_grads, Mat* input_cot) {
    const int n = fw.logits.rows;
    const int K = disc.n_heads();
    std::map<int, Mat> taps;
    for (int k = 0; k < K; ++k) {
        Mat cot(n, 1);
        for (int r = 0; r < n; ++r) {
            const double s = sigmoid(fw.logits.at(r, k));
            cot.at(r, 0) = dl_dd[r] * s * (1.0 - s) / K;
        }
        auto br = backward(disc.head_specs[k], disc.head_params[k], fw.heads[k].trace, cot);
        if (head_grads) (*head_grads)[k].accumulate(br.grads);
        if (input_cot) {
            const int tap = disc.tap_layers[k];
            const int tap_w = fake.spec.layer_dims[tap + 1];
            Mat& acc = taps.try_emplace(tap, Mat(n, tap_w)).first->second;
            for (int r = 0; r < n; ++r) {
                for (int i = 0; i < tap_w; ++i) acc.at(r, i) += br.input_cotangent.at(r, i);
            }
        }
    }
    if (input_cot) {
        auto br = backward_with_taps(fake.spec, fake.params, fw.backbone.trace, Mat(), taps);
        *input_cot = std::move(br.input_cotangent);
    }
}

}  // namespace detail

// Standard adversarial objective: -log D on noised real data plus
// -log(1 - D) on noised generator outputs, each side with its own fresh
// per-sample time draw. Only head parameters receive gradients.
inline DiscLossGrads disc_loss_grads(const Discriminator& disc, const VelocityModel& fake, const Mat& real_x,
                                     const std::vector<int>& real_c, const Mat& fake_x,
                                     const std::vector<int>& fake_c, Rng& rng) {
    DiscLossGrads out;
    for (const auto& p : disc.head_params) out.head_grads.push_back(p.zeros_like());

    auto noised = [&](const Mat& x, Vec& ts) {
        Mat xt(x.rows, x.cols);
        ts.resize(x.rows);
        for (int r = 0; r < x.rows; ++r) {
            const double t = rng.uniform(kTimeMin, kTimeMax);
            ts[r] = t;
            for (int c = 0; c < x.cols; ++c) xt.at(r, c) = (1.0 - t) * x.at(r, c) + t * rng.normal();
        }
        return xt;
    };

    Vec ts_real, ts_fake;
    const Mat real_t = noised(real_x, ts_real);
    const Mat fake_t = noised(fake_x, ts_fake);

    auto fw_real = disc_forward(disc, fake, real_t, ts_real, real_c);
    auto fw_fake = disc_forward(disc, fake, fake_t, ts_fake, fake_c);

    const int nr = real_x.rows;
    const int nf = fake_x.rows;
    Vec dl_real(nr), dl_fake(nf);
    for (int r = 0; r < nr; ++r) {
        out.loss += -std::log(fw_real.d[r]) / nr;
        dl_real[r] = -1.0 / (nr * fw_real.d[r]);
    }
    for (int r = 0; r < nf; ++r) {
        out.loss += -std::log(1.0 - fw_fake.d[r]) / nf;
        dl_fake[r] = 1.0 / (nf * (1.0 - fw_fake.d[r]));
    }
    detail::backprop_heads(disc, fake, fw_real, dl_real, &out.head_grads, nullptr);
    detail::backprop_heads(disc, fake, fw_fake, dl_fake, &out.head_grads, nullptr);
    return out;
}

// Loss-only evaluation on already-noised inputs (used by tests and fixtures).
inline double disc_loss_value(const Discriminator& disc, const VelocityModel& fake, const Mat& real_t,
                              std::span<const double> ts_real, const std::vector<int>& real_c, const Mat& fake_t,
                              std::span<const double> ts_fake, const std::vector<int>& fake_c) {
    auto fw_real = disc_forward(disc, fake, real_t, ts_real, real_c);
    auto fw_fake = disc_forward(disc, fake, fake_t, ts_fake, fake_c);
    double loss = 0.0;
    for (int r = 0; r < real_t.rows; ++r) loss += -std::log(fw_real.d[r]) / real_t.rows;
    for (int r = 0; r < fake_t.rows; ++r) loss += -std::log(1.0 - fw_fake.d[r]) / fake_t.rows;
    return loss;
}

struct GanLossResult {
    double loss = 0.0;
    Mat x_cotangent;  // d loss / d x_t, for the generator path only
};

// Generator-side adversarial term: mean of -log D over noised generator
// outputs. The returned cotangent flows through the frozen backbone to x_t;
// neither head nor backbone parameters are touched.
inline GanLossResult gan_generator_loss(const Discriminator& disc, const VelocityModel& fake, const Mat& x_t,
                                        std::span<const double> ts, const std::vector<int>& conds) {
    auto fw = disc_forward(disc, fake, x_t, ts, conds);
    const int n = x_t.rows;
    GanLossResult out;
    Vec dl(n);
    for (int r = 0; r < n; ++r) {
        out.loss += -std::log(fw.d[r]) / n;
        dl[r] = -1.0 / (n * fw.d[r]);
    }
    Mat input_cot;
    detail::backprop_heads(disc, fake, fw, dl, nullptr, &input_cot);
    // The backbone input rows are [x, t, one-hot]; only the x slice carries
    // gradient back to the generator.
    out.x_cotangent = Mat(n, fake.data_dim);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < fake.data_dim; ++c) out.x_cotangent.at(r, c) = input_cot.at(r, c);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Per-timestep rewards
// ---------------------------------------------------------------------------

using RewardTable = Mat;  // rows = trajectories, cols = schedule steps

// R[i][k] = D at trajectory i's state entering step k, evaluated at that
// state's time. All trajectories must share condition and schedule.
inline RewardTable stepwise_rewards(const Discriminator& disc, const VelocityModel& fake,
                                    const std::vector<Trajectory>& group, bool logit_reward = false) {
    if (group.empty()) throw std::invalid_argument("stepwise_rewards: empty group");
    const size_t n_steps = group.front().steps.size();
    for (const auto& traj : group) {
        if (traj.condition != group.front().condition) {
            throw std::invalid_argument("stepwise_rewards: mixed conditions in group");
        }
        if (traj.steps.size() != n_steps) throw std::invalid_argument("stepwise_rewards: schedule mismatch");
        for (size_t k = 0; k < n_steps; ++k) {
            if (traj.steps[k].t_from != group.front().steps[k].t_from ||
                traj.steps[k].t_to != group.front().steps[k].t_to) {
                throw std::invalid_argument("stepwise_rewards: schedule mismatch");
            }
        }
    }
    const int G = static_cast<int>(group.size());
    RewardTable table(G, static_cast<int>(n_steps));
    for (size_t k = 0; k < n_steps; ++k) {
        Mat x(G, static_cast<int>(group.front().steps[k].x_from.size()));
        Vec ts(G, group.front().steps[k].t_from);
        std::vector<int> conds(G, group.front().condition);
        for (int i = 0; i < G; ++i) x.set_row(i, group[i].steps[k].x_from);
        auto fw = disc_forward(disc, fake, x, ts, conds);
        for (int i = 0; i < G; ++i) {
            double r = fw.d[i];
            if (logit_reward) r = std::log(r / (1.0 - r));
            table.at(i, static_cast<int>(k)) = r;
        }
    }
    return table;
}

// Scores for the states the trajectories end on (the realized x_to of the
// final step, at its time). Complements the entering-state table when credit
// must follow the transition that produced a state.
inline Vec terminal_rewards(const Discriminator& disc, const VelocityModel& fake,
                            const std::vector<Trajectory>& group, bool logit_reward = false) {
    if (group.empty()) throw std::invalid_argument("terminal_rewards: empty group");
    const int G = static_cast<int>(group.size());
    const auto& last = group.front().steps.back();
    Mat x(G, static_cast<int>(last.x_to.size()));
    Vec ts(G, last.t_to);
    std::vector<int> conds(G, group.front().condition);
    for (int i = 0; i < G; ++i) x.set_row(i, group[i].steps.back().x_to);
    auto fw = disc_forward(disc, fake, x, ts, conds);
    Vec out(G);
    for (int i = 0; i < G; ++i) {
        out[i] = logit_reward ? std::log(fw.d[i] / (1.0 - fw.d[i])) : fw.d[i];
    }
    return out;
}

// Convex combination of reward tables, renormalized to unit weight sum.
inline RewardTable combine_rewards(const std::vector<RewardTable>& tables, const std::vector<double>& weights) {
    if (tables.empty() || tables.size() != weights.size()) {
        throw std::invalid_argument("combine_rewards: tables/weights mismatch");
    }
    double wsum = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw std::invalid_argument("combine_rewards: negative weight");
        wsum += w;
    }
    if (wsum <= 0.0) throw std::invalid_argument("combine_rewards: weight sum must be positive");
    RewardTable out(tables.front().rows, tables.front().cols);
    for (size_t k = 0; k < tables.size(); ++k) {
        if (tables[k].rows != out.rows || tables[k].cols != out.cols) {
            throw std::invalid_argument("combine_rewards: table shape mismatch");
        }
        for (size_t j = 0; j < out.data.size(); ++j) out.data[j] += weights[k] / wsum * tables[k].data[j];
    }
    return out;
}

inline double table_mean(const RewardTable& t) {
    double s = 0.0;
    for (double v : t.data) s += v;
    return t.data.empty() ? 0.0 : s / static_cast<double>(t.data.size());
}

}  // namespace advdmd
