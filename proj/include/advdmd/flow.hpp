// Flow-matching parameterizations on the rectified-flow convention
//   x_t = (1 - t) x0 + t eps,   target velocity v* = eps - x0,
// with conversions between velocity, data prediction and score, classifier-
// free guidance, deterministic Euler sampling, and the synthetic mixture
// target the whole system trains against.
#pragma once

#include <cmath>
#include <concepts>
#include <stdexcept>
#include <string>
#include <vector>

#include "advdmd/mat.hpp"
#include "advdmd/net.hpp"
#include "advdmd/rng.hpp"

namespace advdmd {

// Score and sigma evaluations are clamped away from the t=0 singularity and
// the t=1 divergence.
inline constexpr double kTimeMin = 1e-3;
inline constexpr double kTimeMax = 1.0 - 1e-3;

// Null condition marker for classifier-free guidance. Encoded as the extra
// one-hot slot after the real condition classes.
inline constexpr int kNullCondition = -1;

// ---------------------------------------------------------------------------
// Interpolation and reparameterizations
// ---------------------------------------------------------------------------

inline Vec interpolate(const Vec& x0, const Vec& eps, double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("interpolate: t must be in [0,1]");
    if (x0.size() != eps.size()) throw std::invalid_argument("interpolate: dimension mismatch");
    Vec xt(x0.size());
    for (size_t i = 0; i < x0.size(); ++i) xt[i] = (1.0 - t) * x0[i] + t * eps[i];
    return xt;
}

inline Vec velocity_to_x0(const Vec& xt, double t, const Vec& v) {
    Vec x0(xt.size());
    for (size_t i = 0; i < xt.size(); ++i) x0[i] = xt[i] - t * v[i];
    return x0;
}

inline Vec velocity_to_score(const Vec& xt, double t, const Vec& v) {
    if (t < kTimeMin) throw std::invalid_argument("velocity_to_score: t below " + std::to_string(kTimeMin));
    Vec s(xt.size());
    for (size_t i = 0; i < xt.size(); ++i) s[i] = -(xt[i] + (1.0 - t) * v[i]) / t;
    return s;
}

inline Vec cfg_velocity(const Vec& v_cond, const Vec& v_uncond, double w) {
    if (w < 0.0) throw std::invalid_argument("cfg_velocity: w must be >= 0");
    if (w == 1.0) return v_cond;
    Vec v(v_cond.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = v_uncond[i] + w * (v_cond[i] - v_uncond[i]);
    return v;
}

// ---------------------------------------------------------------------------
// Synthetic target distribution
// ---------------------------------------------------------------------------

// Isotropic Gaussian mixture; components double as condition classes.
struct MixtureTarget {
    std::vector<Vec> means;
    double component_std = 0.15;
    std::vector<double> weights;

    int dim() const { return means.empty() ? 0 : static_cast<int>(means.front().size()); }
    int n_components() const { return static_cast<int>(means.size()); }

    void validate() const {
        if (means.empty()) throw std::invalid_argument("MixtureTarget: no components");
        if (weights.size() != means.size()) throw std::invalid_argument("MixtureTarget: weights size mismatch");
        double sum = 0.0;
        for (double w : weights) {
            if (w < 0.0) throw std::invalid_argument("MixtureTarget: weights must be non-negative");
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("MixtureTarget: weights must sum to 1");
    }
};

inline MixtureTarget ring_target(int n_modes = 8, double radius = 2.0, double component_std = 0.15) {
    MixtureTarget t;
    t.component_std = component_std;
    for (int k = 0; k < n_modes; ++k) {
        const double a = 2.0 * 3.14159265358979323846 * k / n_modes;
        t.means.push_back({radius * std::cos(a), radius * std::sin(a)});
        t.weights.push_back(1.0 / n_modes);
    }
    return t;
}

struct LabeledBatch {
    Mat x;
    std::vector<int> labels;
};

inline LabeledBatch sample_target(const MixtureTarget& target, int n, Rng& rng) {
    target.validate();
    LabeledBatch b;
    b.x = Mat(n, target.dim());
    b.labels.resize(n);
    for (int r = 0; r < n; ++r) {
        const double u = rng.uniform();
        double acc = 0.0;
        int comp = target.n_components() - 1;
        for (int k = 0; k < target.n_components(); ++k) {
            acc += target.weights[k];
            if (u < acc) {
                comp = k;
                break;
            }
        }
        b.labels[r] = comp;
        for (int c = 0; c < target.dim(); ++c) {
            b.x.at(r, c) = target.means[comp][c] + target.component_std * rng.normal();
        }
    }
    return b;
}

// ---------------------------------------------------------------------------
// Velocity models
// ---------------------------------------------------------------------------

template <class F>
concept VelocityField = requires(const F f, const Vec& x, double t, int c) {
    { f.velocity(x, t, c) } -> std::convertible_to<Vec>;
};

// Net-backed velocity field. Input rows are [x, t, one-hot(c)] where the
// one-hot has n_conditions + 1 slots, the last one reserved for the null
// condition.
struct VelocityModel {
    NetSpec spec;
    ParamSet params;
    int data_dim = 0;
    int n_conditions = 0;

    int input_dim() const { return data_dim + 1 + n_conditions + 1; }

    void encode_into(std::span<double> row, std::span<const double> x, double t, int c) const {
        if (static_cast<int>(x.size()) != data_dim) throw std::invalid_argument("VelocityModel: bad state dim");
        if (c != kNullCondition && (c < 0 || c >= n_conditions)) {
            throw std::invalid_argument("VelocityModel: condition " + std::to_string(c) + " out of range");
        }
        for (int i = 0; i < data_dim; ++i) row[i] = x[i];
        row[data_dim] = t;
        for (int i = 0; i <= n_conditions; ++i) row[data_dim + 1 + i] = 0.0;
        row[data_dim + 1 + (c == kNullCondition ? n_conditions : c)] = 1.0;
    }

    Mat encode_batch(const Mat& x, std::span<const double> ts, std::span<const int> conds) const {
        Mat in(x.rows, input_dim());
        for (int r = 0; r < x.rows; ++r) encode_into(in.row(r), x.row(r), ts[r], conds[r]);
        return in;
    }

    Vec velocity(const Vec& x, double t, int c) const {
        Mat in(1, input_dim());
        encode_into(in.row(0), x, t, c);
        return forward(spec, params, in).outputs.row_vec(0);
    }
};

inline VelocityModel make_velocity_model(int data_dim, int n_conditions, const std::vector<int>& hidden,
                                         Rng& rng, Activation act = Activation::silu) {
    VelocityModel m;
    m.data_dim = data_dim;
    m.n_conditions = n_conditions;
    m.spec.activation = act;
    m.spec.layer_dims.push_back(data_dim + 1 + n_conditions + 1);
    for (int h : hidden) m.spec.layer_dims.push_back(h);
    m.spec.layer_dims.push_back(data_dim);
    m.params = init_params(m.spec, rng);
    return m;
}

// Guided view over a velocity field: blends conditional and null-condition
// predictions at scale w.
template <VelocityField F>
struct GuidedField {
    const F& base;
    double w = 1.0;

    Vec velocity(const Vec& x, double t, int c) const {
        if (w == 1.0 || c == kNullCondition) return base.velocity(x, t, c);
        return cfg_velocity(base.velocity(x, t, c), base.velocity(x, t, kNullCondition), w);
    }
};

// Exact velocity field of a Gaussian N(mean, cov) under the rectified-flow
// interpolation; used as an analytic oracle. The noised marginal at time t is
// N((1-t) mean, (1-t)^2 cov + t^2 I), whose score gives the velocity via
// v = -(x + t s) / (1 - t).
struct GaussianField {
    Vec mean;
    std::vector<Vec> cov;  // dense, symmetric

    static GaussianField isotropic(Vec mean, double var) {
        GaussianField g;
        const int d = static_cast<int>(mean.size());
        g.mean = std::move(mean);
        g.cov.assign(d, Vec(d, 0.0));
        for (int i = 0; i < d; ++i) g.cov[i][i] = var;
        return g;
    }

    Vec score(const Vec& x, double t, int /*c*/) const {
        const int d = static_cast<int>(mean.size());
        const double a = 1.0 - t;
        // M = a^2 cov + t^2 I; score = -M^{-1} (x - a mean), by Cholesky.
        std::vector<Vec> m(d, Vec(d, 0.0));
        for (int i = 0; i < d; ++i) {
            for (int j = 0; j < d; ++j) m[i][j] = a * a * cov[i][j];
            m[i][i] += t * t;
        }
        std::vector<Vec> chol(d, Vec(d, 0.0));
        for (int i = 0; i < d; ++i) {
            for (int j = 0; j <= i; ++j) {
                double s = m[i][j];
                for (int k = 0; k < j; ++k) s -= chol[i][k] * chol[j][k];
                if (i == j) {
                    if (s <= 0.0) throw std::runtime_error("GaussianField: covariance not positive definite");
                    chol[i][i] = std::sqrt(s);
                } else {
                    chol[i][j] = s / chol[j][j];
                }
            }
        }
        Vec r(d);
        for (int i = 0; i < d; ++i) r[i] = x[i] - a * mean[i];
        // Solve L y = r, then L^T u = y.
        Vec y(d);
        for (int i = 0; i < d; ++i) {
            double s = r[i];
            for (int k = 0; k < i; ++k) s -= chol[i][k] * y[k];
            y[i] = s / chol[i][i];
        }
        Vec u(d);
        for (int i = d - 1; i >= 0; --i) {
            double s = y[i];
            for (int k = i + 1; k < d; ++k) s -= chol[k][i] * u[k];
            u[i] = s / chol[i][i];
        }
        for (auto& v : u) v = -v;
        return u;
    }

    Vec velocity(const Vec& x, double t, int c) const {
        if (t >= 1.0) throw std::invalid_argument("GaussianField: velocity undefined at t = 1");
        const Vec s = score(x, t, c);
        Vec v(x.size());
        for (size_t i = 0; i < v.size(); ++i) v[i] = -(x[i] + t * s[i]) / (1.0 - t);
        return v;
    }
};

// ---------------------------------------------------------------------------
// Teacher training step (conditional flow matching)
// ---------------------------------------------------------------------------

// One CFM step: draws (x0, c) already provided in `batch`, noises them at
// per-sample uniform t in [kTimeMin, kTimeMax], regresses the velocity onto
// eps - x0, and applies one Adam update. Conditions drop to the null token
// with probability cond_dropout to enable guidance later. Returns the batch
// loss (mean squared velocity error per sample).
inline double cfm_train_step(VelocityModel& model, const LabeledBatch& batch, Rng& rng, OptState& opt, double lr,
                             double cond_dropout = 0.1) {
    const int n = batch.x.rows;
    if (n < 1) throw std::invalid_argument("cfm_train_step: empty batch");
    const int d = model.data_dim;
    Mat in(n, model.input_dim());
    Mat target(n, d);
    for (int r = 0; r < n; ++r) {
        const double t = rng.uniform(kTimeMin, kTimeMax);
        int c = batch.labels[r];
        if (rng.uniform() < cond_dropout) c = kNullCondition;
        Vec eps = rng.normal_vec(d);
        Vec x0 = batch.x.row_vec(r);
        Vec xt = interpolate(x0, eps, t);
        Vec row(model.input_dim());
        model.encode_into(row, xt, t, c);
        in.set_row(r, row);
        for (int i = 0; i < d; ++i) target.at(r, i) = eps[i] - x0[i];
    }
    auto fr = forward(model.spec, model.params, in);
    double loss = 0.0;
    Mat cot(n, d);
    for (int r = 0; r < n; ++r) {
        for (int i = 0; i < d; ++i) {
            const double diff = fr.outputs.at(r, i) - target.at(r, i);
            loss += diff * diff;
            cot.at(r, i) = 2.0 * diff / n;
        }
    }
    loss /= n;
    auto br = backward(model.spec, model.params, fr.trace, cot);
    optimizer_step(model.params, br.grads, opt, lr);
    return loss;
}

// Held-out CFM loss without updating the model.
inline double cfm_eval_loss(const VelocityModel& model, const LabeledBatch& batch, Rng& rng) {
    const int n = batch.x.rows;
    const int d = model.data_dim;
    Mat in(n, model.input_dim());
    Mat target(n, d);
    for (int r = 0; r < n; ++r) {
        const double t = rng.uniform(kTimeMin, kTimeMax);
        Vec eps = rng.normal_vec(d);
        Vec x0 = batch.x.row_vec(r);
        Vec xt = interpolate(x0, eps, t);
        Vec row(model.input_dim());
        model.encode_into(row, xt, t, batch.labels[r]);
        in.set_row(r, row);
        for (int i = 0; i < d; ++i) target.at(r, i) = eps[i] - x0[i];
    }
    auto out = forward(model.spec, model.params, in).outputs;
    double loss = 0.0;
    for (size_t k = 0; k < out.data.size(); ++k) {
        const double diff = out.data[k] - target.data[k];
        loss += diff * diff;
    }
    return loss / n;
}

// ---------------------------------------------------------------------------
// Deterministic sampling
// ---------------------------------------------------------------------------

struct OdePath {
    std::vector<Vec> states;  // states[k] at grid[k]; states.back() is x_final
    std::vector<double> grid;
};

// Euler integration of dx = v dt along an explicit decreasing time grid.
template <VelocityField F>
OdePath ode_sample_grid(const F& field, const Vec& z, int c, const std::vector<double>& grid) {
    if (grid.size() < 2) throw std::invalid_argument("ode_sample: grid needs at least two points");
    OdePath path;
    path.grid = grid;
    path.states.push_back(z);
    Vec x = z;
    for (size_t k = 0; k + 1 < grid.size(); ++k) {
        const double t = grid[k];
        const double dt = grid[k] - grid[k + 1];
        if (dt <= 0.0) throw std::invalid_argument("ode_sample: grid must be strictly decreasing");
        const Vec v = field.velocity(x, t, c);
        for (size_t i = 0; i < x.size(); ++i) x[i] -= dt * v[i];
        path.states.push_back(x);
    }
    return path;
}

inline std::vector<double> uniform_grid(double t_hi, double t_lo, int n_steps) {
    if (n_steps < 1) throw std::invalid_argument("uniform_grid: n_steps must be >= 1");
    std::vector<double> g(static_cast<size_t>(n_steps) + 1);
    for (int k = 0; k <= n_steps; ++k) g[k] = t_hi + (t_lo - t_hi) * k / n_steps;
    return g;
}

// Full-interval sampling from t=1 to t=0 (the ODE has no score singularity).
template <VelocityField F>
OdePath ode_sample(const F& field, const Vec& z, int c, int n_steps, double w_cfg = 1.0) {
    GuidedField<F> guided{field, w_cfg};
    return ode_sample_grid(guided, z, c, uniform_grid(1.0, 0.0, n_steps));
}

}  // namespace advdmd
