#include "dissect/vq/codebook.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace dissect;
using namespace dissect::vq;

namespace {

template <typename T>
Codebook<T> make_codebook(const Mat<T>& entries, T decay = T(0.99), EmaMode mode = EmaMode::literal) {
    Codebook<T> cb;
    cb.entries = entries;
    cb.ema_count = Vec<T>::Ones(entries.cols());
    cb.ema_sum = entries;
    cb.decay = decay;
    cb.mode = mode;
    return cb;
}

// Exhaustive nearest-codeword scan; strict < keeps the lowest index on ties.
template <typename T>
std::vector<Index> brute_force_assign(const Mat<T>& tokens, const Mat<T>& entries) {
    std::vector<Index> out;
    for (Index p = 0; p < tokens.cols(); ++p) {
        Index best = 0;
        T best_d = std::numeric_limits<T>::infinity();
        for (Index n = 0; n < entries.cols(); ++n) {
            T d = 0;
            for (Index k = 0; k < tokens.rows(); ++k) {
                const T diff = tokens(k, p) - entries(k, n);
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = n;
            }
        }
        out.push_back(best);
    }
    return out;
}

// Random instance; every third one uses small integers and duplicated
// codewords so exact ties are common.
template <typename T>
std::pair<Mat<T>, Mat<T>> random_instance(Rng& rng, int inst) {
    const Index d = 1 + uniform_int(rng, 0, 15);
    const Index n = 2 + uniform_int(rng, 0, 62);
    const Index p = 1 + uniform_int(rng, 0, 63);
    Mat<T> entries(d, n), tokens(d, p);
    if (inst % 3 == 0) {
        for (Index i = 0; i < entries.size(); ++i) entries.data()[i] = static_cast<T>(uniform_int(rng, -2, 2));
        for (Index c = 1; c < n; c += 3) entries.col(c) = entries.col(uniform_int(rng, 0, c - 1));
        for (Index i = 0; i < tokens.size(); ++i) tokens.data()[i] = static_cast<T>(uniform_int(rng, -2, 2));
        for (Index c = 0; c < p; c += 2) tokens.col(c) = entries.col(uniform_int(rng, 0, n - 1));
    } else {
        for (Index i = 0; i < entries.size(); ++i) entries.data()[i] = static_cast<T>(normal(rng));
        for (Index i = 0; i < tokens.size(); ++i) tokens.data()[i] = static_cast<T>(normal(rng) * 1.5);
    }
    return {tokens, entries};
}

}  // namespace

TEST(ProjectTokens, IdentityProjectionReshapesInput) {
    Rng rng = make_rng(1);
    FeatureMap<double> z(3, 4, 4, 2);
    z.data = tu::random_mat(rng, 3, 32);
    const Mat<double> t = project_tokens(z, Mat<double>::Identity(3, 3).eval());
    EXPECT_TRUE(t == z.data);
}

TEST(ProjectTokens, ZeroWeightsGiveZeroTokens) {
    Rng rng = make_rng(2);
    FeatureMap<double> z(3, 4, 4, 1);
    z.data = tu::random_mat(rng, 3, 16);
    const Mat<double> t = project_tokens(z, Mat<double>::Zero(5, 3).eval());
    EXPECT_EQ(t.cols(), 16);
    EXPECT_EQ(t.rows(), 5);
    EXPECT_EQ(t.squaredNorm(), 0.0);
}

TEST(ProjectTokens, ChannelMismatchThrows) {
    FeatureMap<double> z(3, 4, 4, 1);
    EXPECT_THROW(project_tokens(z, Mat<double>::Zero(5, 4).eval()), ShapeError);
}

TEST(Assign, NearerEntryWins) {
    Mat<double> e(2, 2);
    e << 0, 1, 0, 1;
    Mat<double> t(2, 1);
    t << 0.1, 0.1;
    EXPECT_EQ(assign(t, make_codebook(e))[0], 0);
}

TEST(Assign, ExactHitReturnsThatIndex) {
    Rng rng = make_rng(3);
    const Mat<double> e = tu::random_mat(rng, 4, 10);
    for (Index k = 0; k < 10; ++k) EXPECT_EQ(assign(Mat<double>(e.col(k)), make_codebook(e))[0], k);
}

TEST(Assign, TiesGoToLowestIndex) {
    Mat<double> e(1, 3);
    e << -1, 1, 1;
    Mat<double> t(1, 2);
    t << 0, 1;
    const auto idx = assign(t, make_codebook(e));
    EXPECT_EQ(idx[0], 0);
    EXPECT_EQ(idx[1], 1);
}

TEST(Assign, MatchesExhaustiveScanOn1000Instances) {
    Rng rng = make_rng(4);
    for (int inst = 0; inst < 1000; ++inst) {
        auto [tokens, entries] = random_instance<float>(rng, inst);
        ASSERT_EQ(assign(tokens, make_codebook(entries)), brute_force_assign(tokens, entries)) << "instance " << inst;
    }
}

TEST(Assign, MatchesExhaustiveScanInDoublePrecision) {
    Rng rng = make_rng(5);
    for (int inst = 0; inst < 300; ++inst) {
        auto [tokens, entries] = random_instance<double>(rng, inst);
        ASSERT_EQ(assign(tokens, make_codebook(entries)), brute_force_assign(tokens, entries)) << "instance " << inst;
    }
}

TEST(Assign, LargeBatchCrossesBlockBoundary) {
    Rng rng = make_rng(6);
    const Mat<float> e = tu::random_mat(rng, 8, 32).cast<float>();
    const Mat<float> t = tu::random_mat(rng, 8, 5000).cast<float>();
    EXPECT_EQ(assign(t, make_codebook(e)), brute_force_assign(t, e));
}

TEST(Assign, QuantizedIsNeverFartherThanAnyEntry) {
    Rng rng = make_rng(7);
    for (int inst = 0; inst < 50; ++inst) {
        const Mat<double> e = tu::random_mat(rng, 6, 20);
        const Mat<double> t = tu::random_mat(rng, 6, 40);
        const auto q = quantize(t, make_codebook(e), 0.25);
        for (Index p = 0; p < t.cols(); ++p) {
            const double dq = (t.col(p) - q.quantized.col(p)).squaredNorm();
            for (Index n = 0; n < e.cols(); ++n) ASSERT_LE(dq, (t.col(p) - e.col(n)).squaredNorm());
        }
    }
}

TEST(Quantize, QuantizedRowsCopyEntriesExactly) {
    Rng rng = make_rng(8);
    const Mat<float> e = tu::random_mat(rng, 5, 9).cast<float>();
    const Mat<float> t = tu::random_mat(rng, 5, 30).cast<float>();
    const auto q = quantize(t, make_codebook(e), 0.25f);
    for (Index p = 0; p < t.cols(); ++p) EXPECT_TRUE(q.quantized.col(p) == e.col(q.indices[static_cast<std::size_t>(p)]));
    EXPECT_GE(q.perplexity, 1.0);
    EXPECT_LE(q.perplexity, 9.0);
}

TEST(Quantize, TokensOnEntryZeroGiveZeroLossAndPerplexityOne) {
    Rng rng = make_rng(9);
    const Mat<double> e = tu::random_mat(rng, 4, 6);
    const Mat<double> t = e.col(0).replicate(1, 12);
    const auto q = quantize(t, make_codebook(e), 0.25);
    EXPECT_EQ(q.commit_loss, 0.0);
    EXPECT_EQ(q.perplexity, 1.0);
}

TEST(Quantize, SingleTokenLossIsBetaTimesSquaredDistance) {
    Mat<double> e(3, 2);
    e << 0, 5, 0, 5, 0, 5;
    Mat<double> t(3, 1);
    t << 1, -2, 0.5;
    const auto q = quantize(t, make_codebook(e), 0.25);
    EXPECT_DOUBLE_EQ(q.commit_loss, 0.25 * (1 + 4 + 0.25));
}

TEST(Quantize, CommitLossNonNegativeAndZeroOnlyOnExactHits) {
    Rng rng = make_rng(10);
    for (int inst = 0; inst < 50; ++inst) {
        const Mat<double> e = tu::random_mat(rng, 3, 5);
        Mat<double> t = e.col(inst % 5).replicate(1, 4);
        EXPECT_EQ(quantize(t, make_codebook(e), 0.25).commit_loss, 0.0);
        t(0, 2) += 1e-3;
        EXPECT_GT(quantize(t, make_codebook(e), 0.25).commit_loss, 0.0);
    }
}

TEST(Quantize, CommitGradientMatchesFiniteDifferences) {
    double worst = 0;
    for (int inst = 0; inst < 20; ++inst) {
        Rng rng = make_rng(200 + static_cast<std::uint64_t>(inst));
        const Mat<double> e = tu::random_mat(rng, 8, 12);
        const Mat<double> t = tu::random_mat(rng, 8, 10);
        const auto cb = make_codebook(e);
        const auto q = quantize(t, cb, 0.25);
        const Mat<double> g = commit_loss_grad(q, 0.25);
        Mat<double> u = tu::random_mat(rng, 8, 10);
        u /= u.norm();
        const auto plus = quantize((t + tu::kFdStep * u).eval(), cb, 0.25);
        const auto minus = quantize((t - tu::kFdStep * u).eval(), cb, 0.25);
        ASSERT_EQ(plus.indices, q.indices);
        ASSERT_EQ(minus.indices, q.indices);
        const double numeric = (plus.commit_loss - minus.commit_loss) / (2 * tu::kFdStep);
        worst = std::max(worst, tu::rel_err(g.cwiseProduct(u).sum(), numeric));
    }
    EXPECT_LT(worst, tu::kFdTol);
}

TEST(Perplexity, AllIdenticalIsOne) { EXPECT_DOUBLE_EQ(perplexity({3, 3, 3, 3}, 8), 1.0); }

TEST(Perplexity, UniformOverFourIsFour) { EXPECT_NEAR(perplexity({0, 1, 2, 3, 0, 1, 2, 3}, 4), 4.0, 1e-12); }

TEST(Perplexity, ThreeOneSplit) {
    const double oracle = std::exp(-0.75 * std::log(0.75) - 0.25 * std::log(0.25));
    EXPECT_NEAR(perplexity({0, 0, 0, 1}, 2), oracle, 1e-12);
    EXPECT_NEAR(oracle, 1.7548, 1e-4);
}

TEST(Perplexity, EmptyThrows) { EXPECT_THROW(perplexity({}, 4), PreconditionError); }

TEST(Ema, LiteralStepTowardMean) {
    Mat<double> e(1, 2);
    e << 1.0, -3.0;
    auto cb = make_codebook(e);
    Mat<double> t(1, 2);
    t << 1.5, 2.5;  // both nearer entry 0, mean 2.0
    ema_update(cb, t, {0, 0});
    EXPECT_NEAR(cb.entries(0, 0), 1.01, 1e-12);
    EXPECT_EQ(cb.entries(0, 1), -3.0);
}

TEST(Ema, MeanEqualToEntryIsFixedPoint) {
    Rng rng = make_rng(12);
    const Mat<double> e = tu::random_mat(rng, 4, 3);
    auto cb = make_codebook(e);
    Mat<double> t(4, 2);
    t.col(0) = e.col(1) + Vec<double>::Constant(4, 0.5);
    t.col(1) = e.col(1) - Vec<double>::Constant(4, 0.5);
    ema_update(cb, t, {1, 1});
    EXPECT_LT((cb.entries.col(1) - e.col(1)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Ema, UnassignedEntriesUnchangedInLiteralMode) {
    Rng rng = make_rng(13);
    const Mat<double> e = tu::random_mat(rng, 3, 5);
    auto cb = make_codebook(e);
    const Mat<double> t = tu::random_mat(rng, 3, 4);
    ema_update(cb, t, {0, 2, 2, 0});
    for (Index n : {1, 3, 4}) EXPECT_TRUE(cb.entries.col(n) == e.col(n));
}

TEST(Ema, LiteralContractionIsExact) {
    Rng rng = make_rng(14);
    for (double m : {0.5, 0.9, 0.99}) {
        const Mat<double> e = tu::random_mat(rng, 5, 4);
        auto cb = make_codebook(e, m);
        const Mat<double> t = tu::random_mat(rng, 5, 6);
        const std::vector<Index> idx{0, 0, 1, 3, 3, 3};
        ema_update(cb, t, idx);
        for (Index n : {0, 1, 3}) {
            Vec<double> mean = Vec<double>::Zero(5);
            double c = 0;
            for (std::size_t p = 0; p < idx.size(); ++p)
                if (idx[p] == n) {
                    mean += t.col(static_cast<Index>(p));
                    c += 1;
                }
            mean /= c;
            const Vec<double> delta = cb.entries.col(n) - e.col(n);
            EXPECT_LT((delta - (1 - m) * (mean - e.col(n))).cwiseAbs().maxCoeff(), 1e-12);
        }
    }
}

TEST(Ema, CountWeightedModeFollowsSmoothedRatio) {
    Rng rng = make_rng(15);
    const Mat<double> e = tu::random_mat(rng, 2, 3);
    auto cb = make_codebook(e, 0.9, EmaMode::count_weighted);
    cb.epsilon = 1e-5;
    const Mat<double> t = tu::random_mat(rng, 2, 4);
    const std::vector<Index> idx{0, 0, 2, 0};
    ema_update(cb, t, idx);
    const Vec<double> counts = (Vec<double>(3) << 3, 0, 1).finished();
    Mat<double> sums = Mat<double>::Zero(2, 3);
    for (std::size_t p = 0; p < idx.size(); ++p) sums.col(idx[p]) += t.col(static_cast<Index>(p));
    const Vec<double> ema_count = 0.9 * Vec<double>::Ones(3) + 0.1 * counts;
    const Mat<double> ema_sum = 0.9 * e + 0.1 * sums;
    EXPECT_LT((cb.ema_count - ema_count).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LT((cb.ema_sum - ema_sum).cwiseAbs().maxCoeff(), 1e-14);
    const double total = ema_count.sum();
    for (Index n = 0; n < 3; ++n) {
        const double smoothed = (ema_count(n) + 1e-5) / (1 + 3 * 1e-5 / total);
        EXPECT_LT((cb.entries.col(n) - ema_sum.col(n) / smoothed).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Ema, UpdateVarianceScalesWithSquaredOneMinusDecay) {
    for (double m : {0.9, 0.99}) {
        Rng rng = make_rng(16);
        const double v = 0.7;
        const int steps = 20000;
        double sum = 0, sum2 = 0;
        for (int s = 0; s < steps; ++s) {
            Mat<double> e(1, 2);
            e << 0.3, 100.0;
            auto cb = make_codebook(e, m);
            Mat<double> zbar(1, 1);
            zbar << 0.3 + std::sqrt(v) * normal(rng);
            ema_update(cb, zbar, {0});
            const double delta = cb.entries(0, 0) - 0.3;
            sum += delta;
            sum2 += delta * delta;
        }
        const double mean = sum / steps;
        const double var = sum2 / steps - mean * mean;
        const double ratio = var / v;
        EXPECT_NEAR(ratio / ((1 - m) * (1 - m)), 1.0, 0.15) << "m=" << m;
    }
}

TEST(Codebook, InitIsDeterministicAndScaled) {
    const auto a = Codebook<double>::init(512, 16, 3);
    const auto b = Codebook<double>::init(512, 16, 3);
    EXPECT_TRUE(a.entries == b.entries);
    const double var = a.entries.squaredNorm() / static_cast<double>(a.entries.size());
    EXPECT_NEAR(var, 1.0 / 16, 0.01);
    EXPECT_TRUE(a.ema_count == Vec<double>::Ones(512));
    EXPECT_TRUE(a.ema_sum == a.entries);
}

TEST(Codebook, InvalidSettingsRejected) {
    EXPECT_THROW(Codebook<double>::init(1, 4, 0), ConfigError);
    EXPECT_THROW(Codebook<double>::init(4, 4, 0, 1.0), ConfigError);
}

TEST(Codebook, AllIdenticalEntriesCollapseToIndexZero) {
    Mat<double> e = Mat<double>::Ones(3, 6);
    Rng rng = make_rng(17);
    const auto q = quantize(tu::random_mat(rng, 3, 50), make_codebook(e), 0.25);
    for (Index i : q.indices) EXPECT_EQ(i, 0);
    EXPECT_EQ(q.perplexity, 1.0);
}

TEST(Codebook, DeadCodesAreReseededFromTokens) {
    Rng rng = make_rng(18);
    auto cb = make_codebook(tu::random_mat(rng, 3, 4));
    cb.ema_count << 5, 0.2, 3, 0.5;
    const Mat<double> t = tu::random_mat(rng, 3, 10);
    const Mat<double> before = cb.entries;
    EXPECT_EQ(reinit_dead_codes(cb, t, rng), 2);
    EXPECT_TRUE(cb.entries.col(0) == before.col(0));
    EXPECT_TRUE(cb.entries.col(2) == before.col(2));
    for (Index n : {1, 3}) {
        bool found = false;
        for (Index p = 0; p < t.cols(); ++p) found = found || cb.entries.col(n) == t.col(p);
        EXPECT_TRUE(found);
        EXPECT_EQ(cb.ema_count(n), 1.0);
    }
}
