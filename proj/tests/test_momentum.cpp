#include "dissect/momentum/schedule.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace dissect;
using namespace dissect::momentum;

namespace {

ParamStore<double> random_store(Rng& rng) {
    ParamStore<double> p;
    p.add("a.weight", {3, 4}, ParamKind::weight) = tu::random_mat(rng, 3, 12);
    p.add("a.bias", {3}, ParamKind::bias) = tu::random_mat(rng, 3, 1);
    p.add("b.weight", {5, 2}, ParamKind::weight) = tu::random_mat(rng, 5, 2);
    return p;
}

}  // namespace

TEST(MomentumSchedule, Examples) {
    const MomentumSchedule s{0.996, 1.0, 1000};
    EXPECT_DOUBLE_EQ(mu_at(s, 0), 0.996);
    EXPECT_DOUBLE_EQ(mu_at(s, 1000), 1.0);
    EXPECT_NEAR(mu_at(s, 500), 0.998, 1e-15);
    EXPECT_DOUBLE_EQ(mu_at(s, 5000), 1.0);
}

TEST(MomentumSchedule, NondecreasingOverSteps) {
    const MomentumSchedule s{0.996, 1.0, 1600};
    for (long t = 1; t <= 1600; ++t) ASSERT_GE(mu_at(s, t), mu_at(s, t - 1));
}

TEST(LrSchedule, Examples) {
    const LrSchedule s{0.3, 10, 50, 0.001};
    EXPECT_EQ(lr_at(s, 0), 0.0);
    EXPECT_NEAR(lr_at(s, 5), 0.15, 1e-15);
    EXPECT_DOUBLE_EQ(lr_at(s, 10), 0.3);
    EXPECT_NEAR(lr_at(s, 30), 0.5 * (0.3 + 0.001), 1e-15);
    EXPECT_NEAR(lr_at(s, 50), 0.001, 1e-15);
}

TEST(LrSchedule, WarmupRisesThenDecays) {
    const LrSchedule s{0.3, 10, 50, 0.0};
    for (double e = 0.25; e <= 10; e += 0.25) ASSERT_GT(lr_at(s, e), lr_at(s, e - 0.25));
    for (double e = 10.25; e <= 50; e += 0.25) ASSERT_LE(lr_at(s, e), lr_at(s, e - 0.25));
}

TEST(MomentumUpdate, FixedPoints) {
    Rng rng = make_rng(1);
    const auto theta = random_store(rng);
    auto phi = random_store(rng);
    const auto before = phi;
    momentum_update(theta, phi, 1.0);
    for (std::size_t i = 0; i < phi.size(); ++i) EXPECT_TRUE(phi.at(i).value == before.at(i).value);
    momentum_update(theta, phi, 0.0);
    for (std::size_t i = 0; i < phi.size(); ++i) EXPECT_TRUE(phi.at(i).value == theta.at(i).value);
}

TEST(MomentumUpdate, ScalarHalfway) {
    ParamStore<double> theta, phi;
    theta.add("w", {1}, ParamKind::weight)(0, 0) = 2.0;
    phi.add("w", {1}, ParamKind::weight)(0, 0) = 0.0;
    momentum_update(theta, phi, 0.5);
    EXPECT_EQ(phi["w"](0, 0), 1.0);
}

TEST(MomentumUpdate, ContractsTowardTheta) {
    Rng rng = make_rng(2);
    for (double mu : {0.1, 0.5, 0.9, 0.996}) {
        const auto theta = random_store(rng);
        auto phi = random_store(rng);
        const auto before = phi;
        momentum_update(theta, phi, mu);
        for (std::size_t i = 0; i < phi.size(); ++i) {
            const double was = (before.at(i).value - theta.at(i).value).norm();
            const double now = (phi.at(i).value - theta.at(i).value).norm();
            EXPECT_NEAR(now, mu * was, 1e-12 * was) << phi.at(i).name;
        }
    }
}

TEST(MomentumUpdate, IncongruentStoresThrow) {
    Rng rng = make_rng(3);
    const auto theta = random_store(rng);
    ParamStore<double> phi;
    phi.add("a.weight", {3, 4}, ParamKind::weight);
    EXPECT_THROW(momentum_update(theta, phi, 0.5), ShapeError);
}
