// Distribution metrics for desk-scale evaluation: biased-V-statistic MMD^2
// with an RBF mixture kernel, 2-Wasserstein via exact assignment on small
// sets (sliced approximation above the cutoff), and a mode-coverage counter
// that flags collapse on the mixture target.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "advdmd/flow.hpp"
#include "advdmd/mat.hpp"
#include "advdmd/rng.hpp"

namespace advdmd {

// ---------------------------------------------------------------------------
// Maximum mean discrepancy
// ---------------------------------------------------------------------------

// {0.25, 0.5, 1, 2} x median pairwise distance of the reference points.
inline std::vector<double> median_heuristic_bandwidths(const Mat& points) {
    if (points.rows < 2) throw std::invalid_argument("median_heuristic_bandwidths: need at least two points");
    std::vector<double> dists;
    dists.reserve(static_cast<size_t>(points.rows) * (points.rows - 1) / 2);
    for (int i = 0; i < points.rows; ++i) {
        for (int j = i + 1; j < points.rows; ++j) {
            dists.push_back(std::sqrt(squared_distance(points.row(i), points.row(j))));
        }
    }
    std::nth_element(dists.begin(), dists.begin() + dists.size() / 2, dists.end());
    const double med = std::max(dists[dists.size() / 2], 1e-12);
    return {0.25 * med, 0.5 * med, 1.0 * med, 2.0 * med};
}

// Biased V-statistic so identical multisets give exactly zero; the kernel is
// the sum of RBFs over the bandwidth list.
inline double mmd2(const Mat& x, const Mat& y, const std::vector<double>& bandwidths) {
    if (x.rows < 1 || y.rows < 1) throw std::invalid_argument("mmd2: empty sample set");
    if (x.cols != y.cols) throw std::invalid_argument("mmd2: dimension mismatch");
    if (bandwidths.empty()) throw std::invalid_argument("mmd2: need at least one bandwidth");
    std::vector<double> inv2s2(bandwidths.size());
    for (size_t b = 0; b < bandwidths.size(); ++b) inv2s2[b] = 1.0 / (2.0 * bandwidths[b] * bandwidths[b]);
    auto kernel = [&](std::span<const double> a, std::span<const double> c) {
        const double d2 = squared_distance(a, c);
        double k = 0.0;
        for (double inv : inv2s2) k += std::exp(-d2 * inv);
        return k;
    };
    double kxx = 0.0, kyy = 0.0, kxy = 0.0;
    for (int i = 0; i < x.rows; ++i) {
        for (int j = 0; j < x.rows; ++j) kxx += kernel(x.row(i), x.row(j));
    }
    for (int i = 0; i < y.rows; ++i) {
        for (int j = 0; j < y.rows; ++j) kyy += kernel(y.row(i), y.row(j));
    }
    for (int i = 0; i < x.rows; ++i) {
        for (int j = 0; j < y.rows; ++j) kxy += kernel(x.row(i), y.row(j));
    }
    const double nx = x.rows, ny = y.rows;
    return kxx / (nx * nx) + kyy / (ny * ny) - 2.0 * kxy / (nx * ny);
}

// Convenience overload with the median heuristic over the pooled points.
inline double mmd2(const Mat& x, const Mat& y) {
    Mat pooled(x.rows + y.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) pooled.set_row(i, x.row(i));
    for (int i = 0; i < y.rows; ++i) pooled.set_row(x.rows + i, y.row(i));
    return mmd2(x, y, median_heuristic_bandwidths(pooled));
}

// ---------------------------------------------------------------------------
// 2-Wasserstein
// ---------------------------------------------------------------------------

inline constexpr int kExactAssignmentLimit = 512;
inline constexpr int kSlicedProjections = 128;
inline constexpr uint64_t kSlicedSeed = 0x51CEDULL;

namespace detail {

// Jonker-Volgenant style shortest augmenting path assignment, O(n^3).
// Returns the minimal total cost of a perfect matching.
inline double min_cost_assignment(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    double total = 0.0;
    for (int j = 1; j <= n; ++j) total += cost[p[j] - 1][j - 1];
    return total;
}

}  // namespace detail

// Sliced approximation: project on random unit directions and match order
// statistics. E[(theta . g)^2] = |g|^2 / dim for unit-uniform theta, so the
// per-projection costs are scaled back by dim and translations are recovered
// exactly.
inline double wasserstein2_sliced(const Mat& x, const Mat& y, int n_projections = kSlicedProjections,
                                  uint64_t seed = kSlicedSeed) {
    if (x.cols != y.cols) throw std::invalid_argument("wasserstein2_sliced: dimension mismatch");
    if (x.rows != y.rows) throw std::invalid_argument("wasserstein2_sliced: needs equal sizes");
    if (x.rows < 1) throw std::invalid_argument("wasserstein2_sliced: empty sample set");
    const int n = x.rows;
    const int d = x.cols;
    Rng rng(seed);
    double acc = 0.0;
    std::vector<double> px(n), py(n);
    for (int proj = 0; proj < n_projections; ++proj) {
        Vec dir = rng.normal_vec(d);
        const double norm = std::sqrt(squared_norm(dir));
        for (auto& c : dir) c /= norm;
        for (int i = 0; i < n; ++i) {
            px[i] = dot(x.row(i), dir);
            py[i] = dot(y.row(i), dir);
        }
        std::sort(px.begin(), px.end());
        std::sort(py.begin(), py.end());
        double c = 0.0;
        for (int i = 0; i < n; ++i) c += (px[i] - py[i]) * (px[i] - py[i]);
        acc += c / n;
    }
    return std::sqrt(d * acc / n_projections);
}

// Exact mode: minimum-cost perfect matching on squared Euclidean costs, root
// of the mean matched cost. Beyond the size cutoff the sliced approximation
// takes over.
inline double wasserstein2(const Mat& x, const Mat& y) {
    if (x.cols != y.cols) throw std::invalid_argument("wasserstein2: dimension mismatch");
    if (x.rows < 1 || y.rows < 1) throw std::invalid_argument("wasserstein2: empty sample set");
    if (x.rows <= kExactAssignmentLimit && y.rows <= kExactAssignmentLimit) {
        if (x.rows != y.rows) throw std::invalid_argument("wasserstein2: exact mode needs equal sizes");
        const int n = x.rows;
        std::vector<std::vector<double>> cost(n, std::vector<double>(n));
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) cost[i][j] = squared_distance(x.row(i), y.row(j));
        }
        return std::sqrt(detail::min_cost_assignment(cost) / n);
    }
    return wasserstein2_sliced(x, y);
}

// ---------------------------------------------------------------------------
// Mode coverage
// ---------------------------------------------------------------------------

inline double mode_coverage(const Mat& x, const MixtureTarget& target, double radius, int min_count) {
    if (radius <= 0.0) throw std::invalid_argument("mode_coverage: radius must be > 0");
    const double r2 = radius * radius;
    int covered = 0;
    for (const auto& mean : target.means) {
        int count = 0;
        for (int i = 0; i < x.rows; ++i) {
            if (squared_distance(x.row(i), mean) <= r2) {
                if (++count >= min_count) break;
            }
        }
        if (count >= min_count) ++covered;
    }
    return static_cast<double>(covered) / target.n_components();
}

// Defaults used by every report: radius of three component stds, at least
// five samples per mode.
inline double default_coverage_radius(const MixtureTarget& target) { return 3.0 * target.component_std; }
inline constexpr int kCoverageMinCount = 5;

inline double median_of(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median_of: empty");
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// Reports and calibration
// ---------------------------------------------------------------------------

struct MetricReport {
    double mmd2 = 0.0;
    double w2 = 0.0;
    double mode_coverage = 0.0;
    std::optional<double> mean_reward;
    int n_samples = 0;
    uint64_t seed = 0;
    std::string variant;
};

// Same-distribution MMD^2 spread: mean + 3 std over `repeats` independent
// target-vs-target draws, with the kernel bandwidths fixed from one reference
// draw. Differences below this band are indistinguishable from sampling
// noise.
struct MmdCalibration {
    std::vector<double> bandwidths;
    double band = 0.0;  // mean + 3 std
    double mean = 0.0;
    double stddev = 0.0;
};

inline MmdCalibration calibrate_mmd_band(const MixtureTarget& target, int n, int repeats, uint64_t seed) {
    if (repeats < 2) throw std::invalid_argument("calibrate_mmd_band: need at least two repeats");
    MmdCalibration cal;
    Rng ref_rng(seed, "mmd-band-ref");
    cal.bandwidths = median_heuristic_bandwidths(sample_target(target, n, ref_rng).x);
    std::vector<double> vals(repeats);
    for (int r = 0; r < repeats; ++r) {
        Rng a(seed, "mmd-band-a", {static_cast<uint64_t>(r)});
        Rng b(seed, "mmd-band-b", {static_cast<uint64_t>(r)});
        vals[r] = mmd2(sample_target(target, n, a).x, sample_target(target, n, b).x, cal.bandwidths);
    }
    double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / repeats;
    double var = 0.0;
    for (double v : vals) var += (v - mean) * (v - mean);
    cal.mean = mean;
    cal.stddev = std::sqrt(var / repeats);
    cal.band = mean + 3.0 * cal.stddev;
    return cal;
}

// Full report for a sample set against the target, with shared kernel
// bandwidths so reports are comparable across variants.
inline MetricReport evaluate_samples(const Mat& samples, const MixtureTarget& target,
                                     const std::vector<double>& bandwidths, uint64_t seed) {
    Rng target_rng(seed, "eval-target");
    auto ref = sample_target(target, samples.rows, target_rng);
    MetricReport rep;
    rep.n_samples = samples.rows;
    rep.seed = seed;
    rep.mmd2 = mmd2(samples, ref.x, bandwidths);
    rep.w2 = wasserstein2(samples, ref.x);  // sliced automatically above the exact cutoff
    rep.mode_coverage = mode_coverage(samples, target, default_coverage_radius(target), kCoverageMinCount);
    return rep;
}

}  // namespace advdmd
