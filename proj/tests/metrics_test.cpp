#include <gtest/gtest.h>

#include <cmath>

#include "advdmd/metrics.hpp"
#include "advdmd/proxy.hpp"

using namespace advdmd;

namespace {

Mat random_cloud(int n, double cx, double cy, double spread, uint64_t seed) {
    Mat m(n, 2);
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        m.at(i, 0) = cx + spread * rng.normal();
        m.at(i, 1) = cy + spread * rng.normal();
    }
    return m;
}

}  // namespace

TEST(Mmd2, IdenticalMultisetsGiveExactlyZero) {
    Mat x = random_cloud(64, 0.0, 0.0, 1.0, 1);
    EXPECT_DOUBLE_EQ(mmd2(x, x, {0.5, 1.0}), 0.0);
}

TEST(Mmd2, TwoSingletonsClosedForm) {
    Mat x(1, 2), y(1, 2);
    x.data = {0.0, 0.0};
    y.data = {0.6, 0.8};  // distance 1
    const double sigma = 0.7;
    const double want = 2.0 * (1.0 - std::exp(-1.0 / (2.0 * sigma * sigma)));
    EXPECT_NEAR(mmd2(x, y, {sigma}), want, 1e-12);
}

TEST(Mmd2, SeparatedCloudsScoreHigherThanOverlapping) {
    Mat base = random_cloud(128, 0.0, 0.0, 0.5, 2);
    Mat near = random_cloud(128, 0.2, 0.0, 0.5, 3);
    Mat far = random_cloud(128, 4.0, 0.0, 0.5, 3);
    const std::vector<double> bw{0.5, 1.0};
    EXPECT_GT(mmd2(base, far, bw), mmd2(base, near, bw));
}

TEST(Mmd2, SymmetricInArguments) {
    Mat x = random_cloud(64, 0.0, 0.0, 1.0, 4);
    Mat y = random_cloud(48, 1.0, -0.5, 0.8, 5);
    const std::vector<double> bw{0.3, 0.9};
    EXPECT_NEAR(mmd2(x, y, bw), mmd2(y, x, bw), 1e-12);
}

TEST(Mmd2, RejectsEmptyAndMismatched) {
    Mat x(0, 2), y(4, 2), z(4, 3);
    EXPECT_THROW(mmd2(x, y, {1.0}), std::invalid_argument);
    EXPECT_THROW(mmd2(y, z, {1.0}), std::invalid_argument);
    EXPECT_THROW(mmd2(y, y, {}), std::invalid_argument);
}

TEST(Wasserstein2, IdenticalSetsGiveZero) {
    Mat x = random_cloud(32, 0.0, 0.0, 1.0, 6);
    EXPECT_NEAR(wasserstein2(x, x), 0.0, 1e-12);
}

TEST(Wasserstein2, SingletonsGiveDistance) {
    Mat x(1, 2), y(1, 2);
    x.data = {1.0, 2.0};
    y.data = {4.0, 6.0};
    EXPECT_NEAR(wasserstein2(x, y), 5.0, 1e-12);
}

TEST(Wasserstein2, ExactModeRejectsSizeMismatch) {
    Mat x(8, 2), y(9, 2);
    EXPECT_THROW(wasserstein2(x, y), std::invalid_argument);
}

TEST(Wasserstein2, MatchesBruteForceOnTinySets) {
    // Independent oracle: enumerate all 4! matchings.
    Mat x(4, 2), y(4, 2);
    Rng rng(7);
    for (auto& v : x.data) v = rng.normal();
    for (auto& v : y.data) v = rng.normal();
    std::vector<int> perm{0, 1, 2, 3};
    double best = 1e300;
    do {
        double c = 0.0;
        for (int i = 0; i < 4; ++i) c += squared_distance(x.row(i), y.row(perm[i]));
        best = std::min(best, c);
    } while (std::next_permutation(perm.begin(), perm.end()));
    EXPECT_NEAR(wasserstein2(x, y), std::sqrt(best / 4.0), 1e-12);
}

TEST(Wasserstein2, SlicedAgreesWithExactOnSeededFixtures) {
    // Translation-dominated fixtures where the sqrt(dim)-corrected sliced
    // estimator tracks the exact assignment within 10%.
    auto target = ring_target();
    Rng r1(1), r2(2);
    auto a = sample_target(target, 256, r1);
    auto b = sample_target(target, 256, r2);
    for (int i = 0; i < 256; ++i) {
        b.x.at(i, 0) += 0.8;
        b.x.at(i, 1) += 0.48;
    }
    const double exact = wasserstein2(a.x, b.x);
    const double sliced = wasserstein2_sliced(a.x, b.x);
    EXPECT_LT(std::abs(exact - sliced) / exact, 0.10);

    Mat c = random_cloud(256, 0.0, 0.0, 1.0, 8);
    Mat d = random_cloud(256, 1.0, 0.5, 1.0, 9);
    const double exact2 = wasserstein2(c, d);
    const double sliced2 = wasserstein2_sliced(c, d);
    EXPECT_LT(std::abs(exact2 - sliced2) / exact2, 0.10);
}

TEST(Wasserstein2, TriangleInequalityOnSeededFixtures) {
    Mat x = random_cloud(96, 0.0, 0.0, 1.0, 10);
    Mat y = random_cloud(96, 1.0, 0.0, 0.7, 11);
    Mat z = random_cloud(96, 0.0, 1.5, 1.2, 12);
    EXPECT_LE(wasserstein2(x, z), wasserstein2(x, y) + wasserstein2(y, z) + 1e-12);
}

TEST(ModeCoverage, ExactPlacements) {
    auto target = ring_target();
    Mat all(8, 2);
    for (int k = 0; k < 8; ++k) all.set_row(k, target.means[k]);
    EXPECT_DOUBLE_EQ(mode_coverage(all, target, 0.45, 1), 1.0);

    Mat one(16, 2);
    for (int i = 0; i < 16; ++i) one.set_row(i, target.means[0]);
    EXPECT_DOUBLE_EQ(mode_coverage(one, target, 0.45, 1), 0.125);
    EXPECT_THROW(mode_coverage(one, target, 0.0, 1), std::invalid_argument);
}

TEST(ModeCoverage, MonotoneInRadius) {
    auto target = ring_target();
    Rng rng(13);
    auto b = sample_target(target, 256, rng);
    double prev = 0.0;
    for (double r : {0.05, 0.15, 0.3, 0.6, 1.2}) {
        const double c = mode_coverage(b.x, target, r, 5);
        EXPECT_GE(c, prev);
        prev = c;
    }
}

TEST(ProxyReward, ModePullPinnedValues) {
    auto target = ring_target();
    auto proxy = ProxyReward::mode_pull(target.means[0], 1.0);
    EXPECT_DOUBLE_EQ(proxy.value(target.means[0]), 1.0);
    // Reward decays monotonically with distance from the pulled mode.
    Vec p = target.means[0];
    double prev = proxy.value(p);
    for (double d : {0.2, 0.5, 1.0, 2.0}) {
        Vec q{target.means[0][0] + d, target.means[0][1]};
        const double v = proxy.value(q);
        EXPECT_LT(v, prev);
        EXPECT_GT(v, 0.0);
        prev = v;
    }
}

TEST(ProxyReward, NormPenaltyInUnitInterval) {
    auto proxy = ProxyReward::norm_penalty(2.0);
    EXPECT_DOUBLE_EQ(proxy.value(Vec{0.0, 0.0}), 1.0);
    Rng rng(14);
    for (int i = 0; i < 20; ++i) {
        const double v = proxy.value(rng.normal_vec(2));
        EXPECT_GT(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(ProxyReward, TableMatchesStepwiseShape) {
    auto g = GaussianField::isotropic({0.0, 0.0}, 1.0);
    auto sched = make_schedule(4, 0.7);
    Rng rng(15);
    std::vector<Trajectory> group;
    for (int i = 0; i < 3; ++i) group.push_back(sample_trajectory(g, rng.normal_vec(2), 0, sched, rng));
    auto proxy = ProxyReward::norm_penalty(1.0);
    auto table = proxy_reward_table(proxy, group);
    EXPECT_EQ(table.rows, 3);
    EXPECT_EQ(table.cols, 4);
    for (double v : table.data) {
        EXPECT_GT(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Calibration, BandPositiveAndDeterministic) {
    auto target = ring_target();
    auto a = calibrate_mmd_band(target, 256, 8, 42);
    auto b = calibrate_mmd_band(target, 256, 8, 42);
    EXPECT_GT(a.band, 0.0);
    EXPECT_EQ(a.band, b.band);
    EXPECT_EQ(a.bandwidths, b.bandwidths);
    EXPECT_GE(a.band, a.mean);
}

TEST(Median, OddAndEven) {
    EXPECT_DOUBLE_EQ(median_of({3.0, 1.0, 2.0}), 2.0);
    EXPECT_DOUBLE_EQ(median_of({4.0, 1.0, 2.0, 3.0}), 2.5);
}
