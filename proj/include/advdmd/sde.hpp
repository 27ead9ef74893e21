// Marginal-preserving stochastic backward simulation of a rectified flow:
//   dx = [v(x,t) + sigma_t^2/(2t) (x + (1-t) v(x,t))] dt + sigma_t sqrt(dt) eps,
//   sigma_t = eta sqrt(t / (1-t)),
// discretized by Euler-Maruyama on a decreasing grid. Each step records its
// Gaussian transition so trajectories carry exact log-probabilities for
// policy-gradient training. With eta = 0 the pipeline reduces to the plain
// Euler ODE step.
#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "advdmd/flow.hpp"
#include "advdmd/mat.hpp"
#include "advdmd/rng.hpp"

namespace advdmd {

struct SdeSchedule {
    std::vector<double> t_grid;  // strictly decreasing, within [kTimeMin, kTimeMax]
    double eta = 0.7;
    double sigma_cap = 3.0;

    int n_steps() const { return static_cast<int>(t_grid.size()) - 1; }

    void validate() const {
        if (t_grid.size() < 2) throw std::invalid_argument("SdeSchedule: grid needs at least two points");
        if (eta < 0.0) throw std::invalid_argument("SdeSchedule: eta must be >= 0");
        if (sigma_cap <= 0.0) throw std::invalid_argument("SdeSchedule: sigma_cap must be > 0");
        for (size_t k = 0; k < t_grid.size(); ++k) {
            if (t_grid[k] < kTimeMin - 1e-12 || t_grid[k] > kTimeMax + 1e-12) {
                throw std::invalid_argument("SdeSchedule: grid point outside [t_min, t_max]");
            }
            if (k > 0 && t_grid[k] >= t_grid[k - 1]) {
                throw std::invalid_argument("SdeSchedule: grid must be strictly decreasing");
            }
        }
    }
};

inline SdeSchedule make_schedule(int n_steps, double eta, double sigma_cap = 3.0, double t_hi = kTimeMax,
                                 double t_lo = kTimeMin) {
    SdeSchedule s;
    s.t_grid = uniform_grid(t_hi, t_lo, n_steps);
    s.eta = eta;
    s.sigma_cap = sigma_cap;
    s.validate();
    return s;
}

inline double sigma_t(double t, double eta, double sigma_cap) {
    if (t < kTimeMin - 1e-12 || t > kTimeMax + 1e-12) {
        throw std::invalid_argument("sigma_t: t outside clamped range");
    }
    const double s = eta * std::sqrt(t / (1.0 - t));
    return std::min(s, sigma_cap);
}

// One recorded Gaussian transition. drift_mean is the transition mean,
// noise_std the shared per-dimension std (sigma * sqrt(dt)). When eta = 0 the
// step is deterministic and logp is not meaningful.
struct TrajStep {
    double t_from = 0.0;
    double t_to = 0.0;
    double sigma = 0.0;      // sigma_t evaluated at t_from
    double noise_std = 0.0;  // sigma * sqrt(t_from - t_to)
    Vec x_from;
    Vec drift_mean;
    Vec x_to;
    double logp = 0.0;
    bool deterministic = false;

    double dt() const { return t_from - t_to; }
};

struct Trajectory {
    int condition = 0;
    Vec initial_z;
    std::vector<TrajStep> steps;
    Vec terminal_x0;  // one-shot denoise of the last state at t_min
};

// Transition mean shared by sampling and log-probability recomputation so a
// recompute under identical parameters reproduces the recorded value bitwise.
inline Vec sde_drift_mean(const Vec& x, const Vec& v, double t_from, double dt, double sigma) {
    const double score_coef = sigma * sigma / (2.0 * t_from);
    Vec m(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        m[i] = x[i] - dt * (v[i] + score_coef * (x[i] + (1.0 - t_from) * v[i]));
    }
    return m;
}

// d drift_mean / d v, a scalar multiple of the identity.
inline double sde_drift_dv(double t_from, double dt, double sigma) {
    return -dt * (1.0 + sigma * sigma * (1.0 - t_from) / (2.0 * t_from));
}

inline double gaussian_logp(const Vec& x, const Vec& mean, double std_dev) {
    const double d = static_cast<double>(x.size());
    double q = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        const double r = x[i] - mean[i];
        q += r * r;
    }
    return -0.5 * d * std::log(2.0 * std::numbers::pi * std_dev * std_dev) - q / (2.0 * std_dev * std_dev);
}

template <VelocityField F>
TrajStep sde_step(const F& field, const Vec& x_t, double t_from, double t_to, int c, double eta, double sigma_cap,
                  Rng& rng) {
    if (!(t_from > t_to)) throw std::invalid_argument("sde_step: t_from must exceed t_to");
    TrajStep step;
    step.t_from = t_from;
    step.t_to = t_to;
    step.x_from = x_t;
    const double dt = t_from - t_to;
    step.sigma = sigma_t(t_from, eta, sigma_cap);
    step.noise_std = step.sigma * std::sqrt(dt);
    const Vec v = field.velocity(x_t, t_from, c);
    step.drift_mean = sde_drift_mean(x_t, v, t_from, dt, step.sigma);
    if (!all_finite(step.drift_mean)) throw std::runtime_error("sde_step: non-finite drift");
    if (eta == 0.0) {
        step.deterministic = true;
        step.x_to = step.drift_mean;
        step.logp = 0.0;
        return step;
    }
    step.x_to.resize(x_t.size());
    for (size_t i = 0; i < x_t.size(); ++i) step.x_to[i] = step.drift_mean[i] + step.noise_std * rng.normal();
    step.logp = gaussian_logp(step.x_to, step.drift_mean, step.noise_std);
    return step;
}

// Chains sde_step over the full grid; the intermediate noisy states stay
// recorded so reward scoring and the distillation branch can reuse them.
template <VelocityField F>
Trajectory sample_trajectory(const F& field, const Vec& z, int c, const SdeSchedule& schedule, Rng& rng) {
    schedule.validate();
    Trajectory traj;
    traj.condition = c;
    traj.initial_z = z;
    Vec x = z;
    for (int k = 0; k < schedule.n_steps(); ++k) {
        TrajStep step =
            sde_step(field, x, schedule.t_grid[k], schedule.t_grid[k + 1], c, schedule.eta, schedule.sigma_cap, rng);
        x = step.x_to;
        traj.steps.push_back(std::move(step));
    }
    const double t_last = schedule.t_grid.back();
    traj.terminal_x0 = velocity_to_x0(x, t_last, field.velocity(x, t_last, c));
    return traj;
}

// Log-probability of the step's realized x_to under another parameter set:
// the mean is recomputed from that field, the noise scale comes from the
// recorded schedule. Identical parameters reproduce step.logp bitwise.
template <VelocityField F>
double transition_logprob(const TrajStep& step, const F& field, int c) {
    if (step.deterministic || step.noise_std <= 0.0) {
        throw std::invalid_argument("transition_logprob: deterministic step (eta = 0) has no density ratio");
    }
    const Vec v = field.velocity(step.x_from, step.t_from, c);
    const Vec mean = sde_drift_mean(step.x_from, v, step.t_from, step.dt(), step.sigma);
    return gaussian_logp(step.x_to, mean, step.noise_std);
}

}  // namespace advdmd
