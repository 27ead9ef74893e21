// Feed-forward network substrate: named parameter sets, batched forward with
// a full activation trace, exact reverse-mode gradients (including cotangent
// injection at interior layers for feature taps), Adam, and a central
// finite-difference gradient checker.
//
// Everything here is pure double-precision CPU code with a fixed summation
// order, so identical inputs give bitwise-identical outputs.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "advdmd/mat.hpp"
#include "advdmd/rng.hpp"

namespace advdmd {

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

struct Tensor {
    std::string name;
    std::vector<int> shape;
    std::vector<double> data;

    size_t size() const { return data.size(); }
};

inline size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
}

// Ordered, uniquely named flat arrays. Iteration order is insertion order so
// that reductions over parameters are reproducible.
struct ParamSet {
    std::vector<Tensor> entries;

    Tensor& add(const std::string& name, std::vector<int> shape) {
        if (has(name)) throw std::invalid_argument("ParamSet: duplicate tensor name '" + name + "'");
        entries.push_back({name, std::move(shape), {}});
        entries.back().data.assign(shape_numel(entries.back().shape), 0.0);
        return entries.back();
    }

    bool has(const std::string& name) const {
        for (const auto& t : entries) {
            if (t.name == name) return true;
        }
        return false;
    }

    Tensor& find(const std::string& name) {
        for (auto& t : entries) {
            if (t.name == name) return t;
        }
        throw std::invalid_argument("ParamSet: no tensor named '" + name + "'");
    }

    const Tensor& find(const std::string& name) const {
        for (const auto& t : entries) {
            if (t.name == name) return t;
        }
        throw std::invalid_argument("ParamSet: no tensor named '" + name + "'");
    }

    size_t total_size() const {
        size_t n = 0;
        for (const auto& t : entries) n += t.size();
        return n;
    }

    // Same names and shapes, all-zero data. Used for gradient accumulators.
    ParamSet zeros_like() const {
        ParamSet g;
        for (const auto& t : entries) g.entries.push_back({t.name, t.shape, std::vector<double>(t.size(), 0.0)});
        return g;
    }

    void accumulate(const ParamSet& other, double scale = 1.0) {
        if (other.entries.size() != entries.size()) {
            throw std::invalid_argument("ParamSet::accumulate: entry count mismatch");
        }
        for (size_t i = 0; i < entries.size(); ++i) {
            auto& dst = entries[i].data;
            const auto& src = other.entries[i].data;
            if (src.size() != dst.size()) throw std::invalid_argument("ParamSet::accumulate: size mismatch");
            for (size_t j = 0; j < dst.size(); ++j) dst[j] += scale * src[j];
        }
    }

    double l2_norm() const {
        double s = 0.0;
        for (const auto& t : entries) {
            for (double v : t.data) s += v * v;
        }
        return std::sqrt(s);
    }
};

// ---------------------------------------------------------------------------
// Network specification
// ---------------------------------------------------------------------------

enum class Activation { tanh_act, silu, identity };

inline const char* activation_name(Activation a) {
    switch (a) {
        case Activation::tanh_act: return "tanh";
        case Activation::silu: return "silu";
        case Activation::identity: return "identity";
    }
    return "?";
}

inline Activation activation_from_name(const std::string& s) {
    if (s == "tanh") return Activation::tanh_act;
    if (s == "silu") return Activation::silu;
    if (s == "identity") return Activation::identity;
    throw std::invalid_argument("unknown activation '" + s + "'");
}

// Fully-connected stack. layer_dims = {in, h1, ..., out}; the activation is
// applied to every layer except the last, which stays linear.
struct NetSpec {
    std::vector<int> layer_dims;
    Activation activation = Activation::tanh_act;

    int input_dim() const { return layer_dims.front(); }
    int output_dim() const { return layer_dims.back(); }
    int n_layers() const { return static_cast<int>(layer_dims.size()) - 1; }
    int n_hidden() const { return n_layers() - 1; }

    void validate() const {
        if (layer_dims.size() < 3) throw std::invalid_argument("NetSpec: need at least one hidden layer");
        for (int d : layer_dims) {
            if (d <= 0) throw std::invalid_argument("NetSpec: layer dims must be positive");
        }
    }
};

// Weights W<l> are (out x in) row-major, biases b<l> are (out).
inline ParamSet init_params(const NetSpec& spec, Rng& rng, bool zero_last_layer = false) {
    spec.validate();
    ParamSet p;
    for (int l = 0; l < spec.n_layers(); ++l) {
        const int fan_in = spec.layer_dims[l];
        const int fan_out = spec.layer_dims[l + 1];
        auto& w = p.add("W" + std::to_string(l), {fan_out, fan_in});
        auto& b = p.add("b" + std::to_string(l), {fan_out});
        const bool zero = zero_last_layer && l == spec.n_layers() - 1;
        if (!zero) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            for (auto& x : w.data) x = rng.uniform(-bound, bound);
            for (auto& x : b.data) x = 0.0;
        }
    }
    return p;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

inline double apply_activation(Activation a, double z) {
    switch (a) {
        case Activation::tanh_act: return std::tanh(z);
        case Activation::silu: return z / (1.0 + std::exp(-z));
        case Activation::identity: return z;
    }
    return z;
}

inline double activation_derivative(Activation a, double z) {
    switch (a) {
        case Activation::tanh_act: {
            const double t = std::tanh(z);
            return 1.0 - t * t;
        }
        case Activation::silu: {
            const double s = 1.0 / (1.0 + std::exp(-z));
            return s * (1.0 + z * (1.0 - s));
        }
        case Activation::identity: return 1.0;
    }
    return 1.0;
}

// Per-layer pre-activations and activations for one batch. act[l] is the
// activation after layer l (the network output for the last layer); these
// double as the feature taps the discriminator heads read.
struct ForwardTrace {
    std::vector<int> layer_dims;  // copied from the producing spec
    Mat input;
    std::vector<Mat> pre;  // pre[l]: rows x layer_dims[l+1]
    std::vector<Mat> act;  // act[l]: rows x layer_dims[l+1]

    int rows() const { return input.rows; }

    void check_matches(const NetSpec& spec) const {
        if (layer_dims != spec.layer_dims) {
            throw std::invalid_argument("ForwardTrace does not match NetSpec (stale or mismatched trace)");
        }
    }
};

struct ForwardResult {
    Mat outputs;
    ForwardTrace trace;
};

inline ForwardResult forward(const NetSpec& spec, const ParamSet& params, const Mat& x) {
    spec.validate();
    if (x.cols != spec.input_dim()) {
        throw std::invalid_argument("forward: input width " + std::to_string(x.cols) + " != spec input dim " +
                                    std::to_string(spec.input_dim()));
    }
    const int n = x.rows;
    ForwardTrace trace;
    trace.layer_dims = spec.layer_dims;
    trace.input = x;
    trace.pre.reserve(spec.n_layers());
    trace.act.reserve(spec.n_layers());

    const Mat* cur = &x;
    for (int l = 0; l < spec.n_layers(); ++l) {
        const auto& w = params.find("W" + std::to_string(l));
        const auto& b = params.find("b" + std::to_string(l));
        const int din = spec.layer_dims[l];
        const int dout = spec.layer_dims[l + 1];
        Mat z(n, dout);
        for (int r = 0; r < n; ++r) {
            const auto in_row = cur->row(r);
            for (int o = 0; o < dout; ++o) {
                double s = b.data[o];
                const double* wrow = w.data.data() + static_cast<size_t>(o) * din;
                for (int i = 0; i < din; ++i) s += wrow[i] * in_row[i];
                z.at(r, o) = s;
            }
        }
        Mat a = z;
        if (l < spec.n_layers() - 1) {
            for (auto& v : a.data) v = apply_activation(spec.activation, v);
        }
        trace.pre.push_back(std::move(z));
        trace.act.push_back(std::move(a));
        cur = &trace.act.back();
    }
    return {trace.act.back(), trace};
}

struct BackwardResult {
    Mat input_cotangent;
    ParamSet grads;
};

// Reverse pass for <out_cotangent, outputs> plus optional cotangents injected
// at interior activations (keyed by hidden-layer index, 0-based from the
// input side). Returns exact gradients and the cotangent on the input batch.
inline BackwardResult backward_with_taps(const NetSpec& spec, const ParamSet& params, const ForwardTrace& trace,
                                         const Mat& out_cotangent,
                                         const std::map<int, Mat>& tap_cotangents = {}) {
    spec.validate();
    trace.check_matches(spec);
    const int n = trace.rows();
    const int n_layers = spec.n_layers();
    if (out_cotangent.rows != 0 && (out_cotangent.rows != n || out_cotangent.cols != spec.output_dim())) {
        throw std::invalid_argument("backward: out_cotangent shape mismatch");
    }
    for (const auto& [h, cot] : tap_cotangents) {
        if (h < 0 || h >= spec.n_hidden()) {
            throw std::invalid_argument("backward: tap index " + std::to_string(h) + " out of range");
        }
        if (cot.rows != n || cot.cols != spec.layer_dims[h + 1]) {
            throw std::invalid_argument("backward: tap cotangent shape mismatch at layer " + std::to_string(h));
        }
    }

    ParamSet grads = params.zeros_like();
    // Cotangent on the activation of the layer currently being processed.
    Mat act_cot = out_cotangent.rows ? out_cotangent : Mat(n, spec.output_dim());

    for (int l = n_layers - 1; l >= 0; --l) {
        const int din = spec.layer_dims[l];
        const int dout = spec.layer_dims[l + 1];
        // Inject the tap cotangent for hidden layer l (activation index l).
        if (l < n_layers - 1) {
            auto it = tap_cotangents.find(l);
            if (it != tap_cotangents.end()) {
                for (size_t k = 0; k < act_cot.data.size(); ++k) act_cot.data[k] += it->second.data[k];
            }
        }
        // dZ = act_cot * act'(pre) (last layer is linear).
        Mat dz = act_cot;
        if (l < n_layers - 1) {
            const Mat& z = trace.pre[l];
            for (size_t k = 0; k < dz.data.size(); ++k) {
                dz.data[k] *= activation_derivative(spec.activation, z.data[k]);
            }
        }
        auto& gw = grads.find("W" + std::to_string(l));
        auto& gb = grads.find("b" + std::to_string(l));
        const Mat& a_prev = (l == 0) ? trace.input : trace.act[l - 1];
        for (int r = 0; r < n; ++r) {
            const auto arow = a_prev.row(r);
            const auto dzrow = dz.row(r);
            for (int o = 0; o < dout; ++o) {
                const double g = dzrow[o];
                gb.data[o] += g;
                double* gwrow = gw.data.data() + static_cast<size_t>(o) * din;
                for (int i = 0; i < din; ++i) gwrow[i] += g * arow[i];
            }
        }
        // Propagate to the previous activation: prev_cot = dZ * W.
        const auto& w = params.find("W" + std::to_string(l));
        Mat prev(n, din);
        for (int r = 0; r < n; ++r) {
            const auto dzrow = dz.row(r);
            auto prow = prev.row(r);
            for (int o = 0; o < dout; ++o) {
                const double g = dzrow[o];
                const double* wrow = w.data.data() + static_cast<size_t>(o) * din;
                for (int i = 0; i < din; ++i) prow[i] += g * wrow[i];
            }
        }
        act_cot = std::move(prev);
    }
    return {std::move(act_cot), std::move(grads)};
}

inline BackwardResult backward(const NetSpec& spec, const ParamSet& params, const ForwardTrace& trace,
                               const Mat& out_cotangent) {
    return backward_with_taps(spec, params, trace, out_cotangent);
}

// ---------------------------------------------------------------------------
// Optimizer (Adam)
// ---------------------------------------------------------------------------

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct OptState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    int64_t step = 0;

    static OptState create(const ParamSet& params) {
        OptState s;
        s.m.reserve(params.entries.size());
        s.v.reserve(params.entries.size());
        for (const auto& t : params.entries) {
            s.m.emplace_back(t.size(), 0.0);
            s.v.emplace_back(t.size(), 0.0);
        }
        return s;
    }
};

inline void optimizer_step(ParamSet& params, const ParamSet& grads, OptState& state, double lr,
                           const AdamHyper& hyper = {}) {
    if (grads.entries.size() != params.entries.size() || state.m.size() != params.entries.size()) {
        throw std::invalid_argument("optimizer_step: shape mismatch between params, grads and state");
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
    for (size_t i = 0; i < params.entries.size(); ++i) {
        auto& p = params.entries[i].data;
        const auto& g = grads.entries[i].data;
        if (g.size() != p.size()) throw std::invalid_argument("optimizer_step: gradient size mismatch");
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (size_t j = 0; j < p.size(); ++j) {
            if (!std::isfinite(g[j])) {
                throw std::runtime_error("optimizer_step: non-finite gradient in '" + params.entries[i].name +
                                         "' at index " + std::to_string(j));
            }
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= lr * mhat / (std::sqrt(vhat) + hyper.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

// Max relative error between reverse-mode gradients and central finite
// differences of s(params) = sum_batch <cot, f(x)> over every parameter.
// The probe cotangent is a fixed seeded draw so no output direction is
// systematically blind.
inline double grad_check(const NetSpec& spec, const ParamSet& params, const Mat& x, double h = 1e-4) {
    if (!(h > 0.0 && h <= 1e-2)) throw std::invalid_argument("grad_check: h must be in (0, 1e-2]");
    Rng cot_rng(0x5EEDC07ULL);
    Mat cot(x.rows, spec.output_dim());
    for (auto& v : cot.data) v = cot_rng.uniform(-1.0, 1.0);

    auto fr = forward(spec, params, x);
    auto br = backward(spec, params, fr.trace, cot);

    ParamSet probe = params;
    auto scalar = [&]() {
        auto out = forward(spec, probe, x).outputs;
        double s = 0.0;
        for (size_t k = 0; k < out.data.size(); ++k) s += cot.data[k] * out.data[k];
        return s;
    };

    double max_rel = 0.0;
    for (size_t i = 0; i < probe.entries.size(); ++i) {
        auto& data = probe.entries[i].data;
        const auto& g = br.grads.entries[i].data;
        for (size_t j = 0; j < data.size(); ++j) {
            const double orig = data[j];
            data[j] = orig + h;
            const double up = scalar();
            data[j] = orig - h;
            const double dn = scalar();
            data[j] = orig;
            const double fd = (up - dn) / (2.0 * h);
            const double denom = std::max({1.0, std::abs(fd), std::abs(g[j])});
            max_rel = std::max(max_rel, std::abs(fd - g[j]) / denom);
        }
    }
    return max_rel;
}

}  // namespace advdmd
