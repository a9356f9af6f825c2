#include "dissect/serf/serf.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace dissect;
using namespace dissect::serf;

namespace {

constexpr int kDim = 4;

ScaleTokens<double> random_scale(Rng& rng, Index side, double scale = 1.0) {
    return {tu::random_mat(rng, kDim, side * side, scale), side, side};
}

std::array<ScaleTokens<double>, 3> random_sample(Rng& rng) {
    return {random_scale(rng, 2), random_scale(rng, 4), random_scale(rng, 8)};
}

SerfConfig small_config() {
    SerfConfig c;
    c.dim = kDim;
    c.hidden = 6;
    c.trainable_alpha = true;
    c.alpha = {0.5, 0.3, 0.2};
    return c;
}

ParamStore<double> serf_params(const SerfConfig& c, std::uint64_t seed) {
    ParamStore<double> p;
    add_params(p, c, seed);
    return p;
}

// Block mean of a row-major grid, computed independently of the pooling helper.
Mat<double> block_mean(const ScaleTokens<double>& s, Index factor) {
    const Index gh = s.height / factor, gw = s.width / factor;
    Mat<double> out = Mat<double>::Zero(s.tokens.rows(), gh * gw);
    for (Index r = 0; r < s.height; ++r)
        for (Index c = 0; c < s.width; ++c) out.col((r / factor) * gw + c / factor) += s.tokens.col(r * s.width + c);
    return out / static_cast<double>(factor * factor);
}

}  // namespace

TEST(Fuse, OneHotAlphaSelectsThatScale) {
    Rng rng = make_rng(1);
    const auto smp = random_sample(rng);
    for (int j = 0; j < 3; ++j) {
        std::array<double, 3> a{0, 0, 0};
        a[static_cast<std::size_t>(j)] = 1.0;
        const auto f = fuse(smp, a);
        const Index factor = smp[static_cast<std::size_t>(j)].height / 2;
        EXPECT_LT((f.tokens - block_mean(smp[static_cast<std::size_t>(j)], factor)).cwiseAbs().maxCoeff(), 1e-12)
            << "scale " << j;
    }
}

TEST(Fuse, WeightedSumOfBlockMeans) {
    Rng rng = make_rng(2);
    const auto smp = random_sample(rng);
    const std::array<double, 3> a{0.2, 0.5, 1.5};
    const auto f = fuse(smp, a);
    const Mat<double> expect = a[0] * smp[0].tokens + a[1] * block_mean(smp[1], 2) + a[2] * block_mean(smp[2], 4);
    EXPECT_LT((f.tokens - expect).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((f.pooled - expect.rowwise().mean()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Fuse, MissingScalesAreSkipped) {
    Rng rng = make_rng(3);
    auto smp = random_sample(rng);
    smp[kCoarse] = {};
    const auto f = fuse(smp, {1.0, 1.0, 0.0});
    EXPECT_EQ(f.tokens.cols(), 16);
    EXPECT_LT((f.tokens - smp[kMedium].tokens).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_THROW(fuse(std::array<ScaleTokens<double>, 3>{}, {1.0, 1.0, 1.0}), ShapeError);
}

TEST(Fuse, IncompatibleGridsThrow) {
    Rng rng = make_rng(4);
    auto smp = random_sample(rng);
    smp[kFine] = random_scale(rng, 5);
    EXPECT_THROW(fuse(smp, {1.0, 1.0, 1.0}), ShapeError);
}

TEST(Refine, WeightsAreASoftmaxDistribution) {
    for (int inst = 0; inst < 50; ++inst) {
        Rng rng = make_rng(100 + static_cast<std::uint64_t>(inst));
        const Mat<double> t = tu::random_mat(rng, kDim, 9, 3.0);
        const Vec<double> h = tu::random_vec(rng, kDim, 3.0);
        const auto r = refine(t, h, RefineMode::token_value);
        ASSERT_EQ(r.weights.size(), 9);
        EXPECT_NEAR(r.weights.sum(), 1.0, 1e-12);
        EXPECT_GE(r.weights.minCoeff(), 0.0);
        // Softmax of s = t^T h / sqrt(d), checked directly.
        const Vec<double> s = t.transpose() * h / 2.0;
        const Vec<double> e = s.array().exp().matrix();
        EXPECT_LT((r.weights - e / e.sum()).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Refine, ResultLiesInConvexHullOfTokens) {
    for (int inst = 0; inst < 50; ++inst) {
        Rng rng = make_rng(200 + static_cast<std::uint64_t>(inst));
        const Mat<double> t = tu::random_mat(rng, kDim, 16);
        const auto r = refine(t, tu::random_vec(rng, kDim, 5.0), RefineMode::token_value);
        EXPECT_LT((r.k - t * r.weights).cwiseAbs().maxCoeff(), 1e-12);
        for (Index i = 0; i < kDim; ++i) {
            EXPECT_GE(r.k(i), t.row(i).minCoeff() - 1e-12);
            EXPECT_LE(r.k(i), t.row(i).maxCoeff() + 1e-12);
        }
    }
}

TEST(Refine, EqualTokensGiveUniformWeights) {
    Rng rng = make_rng(5);
    const Vec<double> col = tu::random_vec(rng, kDim);
    const Mat<double> t = col.replicate(1, 6);
    const auto r = refine(t, tu::random_vec(rng, kDim), RefineMode::token_value);
    for (Index i = 0; i < 6; ++i) EXPECT_NEAR(r.weights(i), 1.0 / 6.0, 1e-12);
    EXPECT_LT((r.k - col).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Refine, LiteralModeReturnsEmbedding) {
    Rng rng = make_rng(6);
    const Vec<double> h = tu::random_vec(rng, kDim);
    const auto r = refine(tu::random_mat(rng, kDim, 4), h, RefineMode::paper_literal);
    EXPECT_TRUE(r.k == h);
    EXPECT_EQ(r.weights.size(), 0);
}

TEST(Refine, DimensionMismatchThrows) {
    Rng rng = make_rng(7);
    EXPECT_THROW(refine(tu::random_mat(rng, 3, 4), tu::random_vec(rng, 4), RefineMode::token_value), ShapeError);
}

TEST(Serf, IdentityHeadPassesRefinedTokensThrough) {
    SerfConfig c = small_config();
    c.hidden = kDim;
    auto p = serf_params(c, 1);
    p["serf.head.fc1.weight"].setIdentity();
    p["serf.head.fc2.weight"].setIdentity();
    const Serf<double> serf(c);
    Rng rng = make_rng(8);
    std::vector<std::array<ScaleTokens<double>, 3>> batch;
    for (int b = 0; b < 3; ++b) {
        auto smp = random_sample(rng);
        for (auto& s : smp) s.tokens = s.tokens.cwiseAbs();  // ReLU is the identity on non-negative inputs
        batch.push_back(smp);
    }
    const auto out = serf.forward(p, batch, tu::random_mat(rng, kDim, 3));
    EXPECT_LT((out.q_t - out.k).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Serf, ZeroFinalLayerIsDegenerate) {
    const SerfConfig c = small_config();
    auto p = serf_params(c, 2);
    p["serf.head.fc2.weight"].setZero();
    Rng rng = make_rng(9);
    const Serf<double> serf(c);
    EXPECT_THROW(serf.forward(p, {random_sample(rng)}, tu::random_mat(rng, kDim, 1)), DegenerateTargetError);
}

TEST(Serf, NoHeadGivesRefinedTokens) {
    SerfConfig c = small_config();
    c.post_head = false;
    const auto p = serf_params(c, 3);
    EXPECT_FALSE(p.has("serf.head.fc1.weight"));
    Rng rng = make_rng(10);
    const Serf<double> serf(c);
    const auto smp = random_sample(rng);
    const Mat<double> h = tu::random_mat(rng, kDim, 1);
    const auto out = serf.forward(p, {smp}, h);
    const auto f = fuse(smp, serf.alpha(p));
    EXPECT_LT((out.q_t.col(0) - refine<double>(f.tokens, h.col(0), c.mode).k).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Serf, ConcatWithoutHeadIsRejected) {
    SerfConfig c = small_config();
    c.fusion = Fusion::concat;
    c.post_head = false;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_config();
    c.alpha[1] = -0.1;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Serf, FixedAlphaGetsNoGradient) {
    SerfConfig c = small_config();
    c.trainable_alpha = false;
    const auto p = serf_params(c, 4);
    const Serf<double> serf(c);
    Rng rng = make_rng(11);
    const auto out = serf.forward(p, {random_sample(rng), random_sample(rng)}, tu::random_mat(rng, kDim, 2));
    auto g = p.zeros_like();
    serf.backward(p, out, tu::random_mat(rng, kDim, 2), g);
    EXPECT_EQ(g["serf.alpha"].squaredNorm(), 0.0);
    EXPECT_GT(g["serf.head.fc1.weight"].squaredNorm(), 0.0);
}

namespace {

// Checks d<q_t, dq> against central differences in the parameters and in h_phi.
void check_serf_gradients(SerfConfig c, int instances) {
    c.hidden = 16;
    const Serf<double> serf(c);
    double worst_p = 0, worst_h = 0;
    for (int inst = 0; inst < instances; ++inst) {
        Rng rng = make_rng(1000 + static_cast<std::uint64_t>(inst));
        auto p = serf_params(c, static_cast<std::uint64_t>(inst));
        // Random biases keep the ReLU units away from the all-dead case.
        if (c.post_head) p["serf.head.fc1.bias"] = tu::random_mat(rng, c.hidden, 1);
        std::vector<std::array<ScaleTokens<double>, 3>> batch{random_sample(rng), random_sample(rng),
                                                              random_sample(rng)};
        const Mat<double> h = tu::random_mat(rng, kDim, 3, 2.0);
        const Mat<double> dq = tu::random_mat(rng, kDim, 3);
        const auto value = [&](const ParamStore<double>& q, const Mat<double>& hh) {
            return serf.forward(q, batch, hh).q_t.cwiseProduct(dq).sum();
        };
        const auto out = serf.forward(p, batch, h);
        auto g = p.zeros_like();
        Mat<double> dh;
        serf.backward(p, out, dq, g, &dh);

        const auto u = tu::random_direction(p, rng);
        const double num_p =
            tu::directional_fd(p, u, [&](const ParamStore<double>& q) { return value(q, h); });
        worst_p = std::max(worst_p, tu::rel_err(g.dot(u), num_p));

        Mat<double> v = tu::random_mat(rng, kDim, 3);
        v /= v.norm();
        const double num_h = (value(p, h + tu::kFdStep * v) - value(p, h - tu::kFdStep * v)) / (2 * tu::kFdStep);
        worst_h = std::max(worst_h, tu::rel_err(dh.cwiseProduct(v).sum(), num_h));
    }
    EXPECT_LT(worst_p, tu::kFdTol);
    EXPECT_LT(worst_h, tu::kFdTol);
}

}  // namespace

TEST(Serf, RefineAndHeadMatchFiniteDifferences) { check_serf_gradients(small_config(), 20); }

TEST(Serf, ConcatFusionMatchesFiniteDifferences) {
    SerfConfig c = small_config();
    c.fusion = Fusion::concat;
    check_serf_gradients(c, 20);
}

TEST(Serf, LiteralRefineMatchesFiniteDifferences) {
    SerfConfig c = small_config();
    c.mode = RefineMode::paper_literal;
    check_serf_gradients(c, 20);
}
