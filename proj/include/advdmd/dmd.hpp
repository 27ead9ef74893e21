// Distribution matching distillation: the re-noising step, the score-difference
// generator cotangent, and the denoising loss that keeps the fake model
// tracking the generator's output distribution.
#pragma once

#include <cmath>
#include <concepts>
#include <stdexcept>
#include <vector>

#include "advdmd/flow.hpp"
#include "advdmd/mat.hpp"
#include "advdmd/net.hpp"
#include "advdmd/rng.hpp"

namespace advdmd {

template <class S>
concept ScoreField = requires(const S s, const Vec& x, double t, int c) {
    { s.score(x, t, c) } -> std::convertible_to<Vec>;
};

// Score of a net-backed velocity model, optionally guided: the conditional
// and null-condition velocities are blended at scale w_cfg before the
// velocity-to-score conversion.
struct ModelScore {
    const VelocityModel& model;
    double w_cfg = 1.0;

    Vec score(const Vec& x, double t, int c) const {
        Vec v = model.velocity(x, t, c);
        if (w_cfg != 1.0 && c != kNullCondition) {
            v = cfg_velocity(v, model.velocity(x, t, kNullCondition), w_cfg);
        }
        return velocity_to_score(x, t, v);
    }
};

// Generator outputs renoised at fresh per-sample times: x_t = (1-t) x_gen + t eps.
struct DmdBatch {
    Mat x_gen;
    Vec t_new;
    Mat eps;
    Mat x_t;
    std::vector<int> conds;

    int size() const { return x_gen.rows; }
    int dim() const { return x_gen.cols; }
};

inline DmdBatch renoise(const Mat& x0, const std::vector<int>& conds, Rng& rng, double t_lo = 0.02,
                        double t_hi = 0.98) {
    if (x0.rows < 1) throw std::invalid_argument("renoise: empty batch");
    if (t_lo < kTimeMin || t_hi > kTimeMax || t_lo > t_hi) {
        throw std::invalid_argument("renoise: t_range must lie within [t_min, t_max]");
    }
    DmdBatch b;
    b.x_gen = x0;
    b.conds = conds;
    b.t_new.resize(x0.rows);
    b.eps = Mat(x0.rows, x0.cols);
    b.x_t = Mat(x0.rows, x0.cols);
    for (int r = 0; r < x0.rows; ++r) {
        const double t = (t_lo == t_hi) ? t_lo : rng.uniform(t_lo, t_hi);
        b.t_new[r] = t;
        for (int c = 0; c < x0.cols; ++c) {
            const double e = rng.normal();
            b.eps.at(r, c) = e;
            b.x_t.at(r, c) = (1.0 - t) * x0.at(r, c) + t * e;
        }
    }
    return b;
}

// Cotangent on x_gen for the distribution-matching update. Per sample,
//   d = s_fake(x_t, t) - s_real(x_t, t),
// optionally normalized by its mean absolute component, then scaled by the
// renoising chain factor d x_t / d x_gen = (1 - t_new). Descending along the
// returned cotangent moves the generator's output distribution toward the
// real one.
template <ScoreField SReal, ScoreField SFake>
Mat dmd_generator_cotangent(const DmdBatch& batch, const SReal& real, const SFake& fake, bool normalize = true) {
    Mat cot(batch.size(), batch.dim());
    for (int r = 0; r < batch.size(); ++r) {
        const Vec xt = batch.x_t.row_vec(r);
        const double t = batch.t_new[r];
        const Vec sr = real.score(xt, t, batch.conds[r]);
        const Vec sf = fake.score(xt, t, batch.conds[r]);
        if (!all_finite(sr) || !all_finite(sf)) {
            throw std::runtime_error("dmd_generator_cotangent: non-finite score at sample " + std::to_string(r));
        }
        Vec d(xt.size());
        double mean_abs = 0.0;
        for (size_t i = 0; i < d.size(); ++i) {
            d[i] = sf[i] - sr[i];
            mean_abs += std::abs(d[i]);
        }
        mean_abs /= static_cast<double>(d.size());
        const double scale = (normalize ? 1.0 / (mean_abs + 1e-8) : 1.0) * (1.0 - t);
        for (size_t i = 0; i < d.size(); ++i) cot.at(r, static_cast<int>(i)) = d[i] * scale;
    }
    return cot;
}

inline Mat dmd_generator_cotangent(const DmdBatch& batch, const VelocityModel& real, const VelocityModel& fake,
                                   double w_cfg, bool normalize = true) {
    return dmd_generator_cotangent(batch, ModelScore{real, w_cfg}, ModelScore{fake, 1.0}, normalize);
}

// Denoising loss of the fake model on renoised generator outputs:
// mean_i || x0_pred(x_t, t, v_fake) - x_gen ||^2, with x_gen treated as data.
inline double fake_model_loss(const VelocityModel& fake, const DmdBatch& batch) {
    Mat in = fake.encode_batch(batch.x_t, batch.t_new, batch.conds);
    Mat v = forward(fake.spec, fake.params, in).outputs;
    double loss = 0.0;
    for (int r = 0; r < batch.size(); ++r) {
        for (int c = 0; c < batch.dim(); ++c) {
            const double pred = batch.x_t.at(r, c) - batch.t_new[r] * v.at(r, c);
            const double diff = pred - batch.x_gen.at(r, c);
            loss += diff * diff;
        }
    }
    return loss / batch.size();
}

struct FakeLossGrads {
    double loss = 0.0;
    ParamSet grads;
};

inline FakeLossGrads fake_model_grads(const VelocityModel& fake, const DmdBatch& batch) {
    Mat in = fake.encode_batch(batch.x_t, batch.t_new, batch.conds);
    auto fr = forward(fake.spec, fake.params, in);
    const int n = batch.size();
    double loss = 0.0;
    Mat cot(n, batch.dim());
    for (int r = 0; r < n; ++r) {
        const double t = batch.t_new[r];
        for (int c = 0; c < batch.dim(); ++c) {
            const double pred = batch.x_t.at(r, c) - t * fr.outputs.at(r, c);
            const double diff = pred - batch.x_gen.at(r, c);
            loss += diff * diff;
            // d pred / d v = -t
            cot.at(r, c) = 2.0 * diff * (-t) / n;
        }
    }
    loss /= n;
    auto br = backward(fake.spec, fake.params, fr.trace, cot);
    return {loss, std::move(br.grads)};
}

}  // namespace advdmd
