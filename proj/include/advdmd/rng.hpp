// Deterministic splittable RNG.
//
// All randomness in a run flows from one 64-bit seed. Substreams are derived
// by hash-chaining a text label and integer indices into the seed (splitmix64
// finalizer), so independent components (per-trajectory noise, renoising,
// eval draws) get reproducible streams regardless of scheduling order.
#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <string_view>

#include "advdmd/mat.hpp"

namespace advdmd {

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9E3779B97F4A7C15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline uint64_t hash_label(std::string_view label) {
    // FNV-1a 64-bit.
    uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : label) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

// Pure stream key: seed x label x indices -> 64-bit substream seed.
inline uint64_t stream_seed(uint64_t root_seed, std::string_view label,
                            std::initializer_list<uint64_t> path = {}) {
    uint64_t s = root_seed ^ hash_label(label);
    splitmix64(s);
    for (uint64_t p : path) {
        s ^= p + 0x9E3779B97F4A7C15ULL;
        splitmix64(s);
    }
    return s;
}

struct RngState {
    uint64_t state = 0;
    bool has_spare = false;
    double spare = 0.0;
};

class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {
        // Warm up so that small seeds diverge immediately.
        splitmix64(state_);
    }

    Rng(uint64_t root_seed, std::string_view label, std::initializer_list<uint64_t> path = {})
        : Rng(stream_seed(root_seed, label, path)) {}

    uint64_t next_u64() { return splitmix64(state_); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // in (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    Vec normal_vec(int n) {
        Vec v(static_cast<size_t>(n));
        for (auto& x : v) x = normal();
        return v;
    }

    RngState snapshot() const { return {state_, has_spare_, spare_}; }
    void restore(const RngState& s) {
        state_ = s.state;
        has_spare_ = s.has_spare;
        spare_ = s.spare;
    }

private:
    uint64_t state_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace advdmd
