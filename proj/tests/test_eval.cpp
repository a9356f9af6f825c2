#include "dissect/eval/auc.hpp"
#include "dissect/eval/protocols.hpp"
#include "dissect/eval/report.hpp"
#include "dissect/eval/split.hpp"
#include "dissect/trainer/checkpoint.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace dissect;
using namespace dissect::eval;

namespace {

// All-pairs count: positives above negatives plus half the ties.
double brute_force_auc(const std::vector<double>& s, const std::vector<int>& l) {
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (!l[i] || l[j]) continue;
            pairs += 1;
            wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
        }
    return wins / pairs;
}

Labels coin_flips(std::size_t n, std::uint64_t seed) {
    Rng rng = make_rng(seed);
    Labels out(n);
    for (auto& l : out)
        for (int& v : l) v = uniform(rng, 0.0, 1.0) < 0.5;
    return out;
}

trainer::Config eval_config() {
    trainer::Config c = tu::toy_config();
    c.probe.fractions = {0.5};
    c.probe.seeds = 3;
    return c;
}

}  // namespace

TEST(Auc, Examples) {
    EXPECT_EQ(auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}), 1.0);
    EXPECT_EQ(auc({0.9, 0.8, 0.2, 0.1}, {0, 0, 1, 1}), 0.0);
    EXPECT_EQ(auc({0.3, 0.3, 0.3, 0.3, 0.3}, {0, 1, 0, 1, 1}), 0.5);
    EXPECT_EQ(auc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}), 0.75);
}

TEST(Auc, SingleClassThrows) {
    EXPECT_THROW(auc({0.1, 0.2}, {1, 1}), SingleClassError);
    EXPECT_THROW(auc({0.1, 0.2}, {0, 0}), SingleClassError);
    EXPECT_THROW(auc({0.1}, {0, 1}), ShapeError);
}

TEST(Auc, MatchesBruteForceExactly) {
    Rng rng = make_rng(1);
    for (int inst = 0; inst < 400; ++inst) {
        const auto n = static_cast<std::size_t>(uniform_int(rng, 2, 200));
        std::vector<double> s(n);
        std::vector<int> l(n);
        const bool ties = inst % 2 == 0;
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = ties ? static_cast<double>(uniform_int(rng, 0, 5)) : normal(rng);
            l[i] = uniform(rng, 0.0, 1.0) < 0.4;
        }
        l[0] = 1;
        l[1] = 0;
        ASSERT_EQ(auc(s, l), brute_force_auc(s, l)) << "instance " << inst;
    }
}

TEST(Auc, MeanOverLabelColumns) {
    MatD scores(4, 4);
    scores << 0.1, 0.2, 0.8, 0.9,  //
        0.9, 0.8, 0.2, 0.1,        //
        0.5, 0.5, 0.5, 0.5,        //
        0.1, 0.4, 0.35, 0.8;
    const Labels labels{{0, 0, 0, 0}, {0, 0, 1, 0}, {1, 1, 0, 1}, {1, 1, 1, 1}};
    EXPECT_DOUBLE_EQ(mean_auc(scores, labels), (1.0 + 0.0 + 0.5 + 0.75) / 4.0);
}

TEST(Split, DisjointCoveringAndDeterministic) {
    const Split s = split_indices(2000);
    EXPECT_EQ(s.train.size() + s.test.size(), 2000u);
    std::set<std::size_t> all(s.train.begin(), s.train.end());
    for (std::size_t i : s.test) EXPECT_TRUE(all.insert(i).second);
    EXPECT_NEAR(static_cast<double>(s.test.size()) / 2000.0, 0.2, 0.03);
    EXPECT_EQ(split_indices(2000).test, s.test);
    // A larger corpus keeps the assignment of the shared indices.
    const Split big = split_indices(3000);
    for (std::size_t i = 0; i < s.test.size(); ++i) EXPECT_EQ(big.test[i], s.test[i]);
}

TEST(Split, SubsetsAreNestedAndDeterministic) {
    const Split s = split_indices(2000);
    for (std::uint64_t seed : {0ULL, 7ULL, 99ULL}) {
        std::vector<std::size_t> prev;
        for (double f : {0.01, 0.05, 0.10, 0.20, 0.30, 0.40, 1.0}) {
            const auto cur = label_subset(s.train, f, seed);
            EXPECT_EQ(cur.size(), subset_size(s.train.size(), f));
            EXPECT_EQ(cur, label_subset(s.train, f, seed));
            const std::set<std::size_t> c(cur.begin(), cur.end());
            for (std::size_t i : prev) EXPECT_TRUE(c.count(i)) << "fraction " << f;
            prev = cur;
        }
    }
    EXPECT_THROW(label_subset(s.train, 0.0, 0), PreconditionError);
    EXPECT_THROW(label_subset(s.train, 1.5, 0), PreconditionError);
}

TEST(Split, UsableSubsetHasBothClassesPerLabel) {
    Labels labels(100, {0, 0, 0, 0});
    labels[3] = {1, 1, 1, 1};
    labels[50] = {1, 1, 1, 1};
    std::vector<std::size_t> pool(100);
    for (std::size_t i = 0; i < 100; ++i) pool[i] = i;
    std::uint64_t used = 0;
    const auto sub = usable_label_subset(pool, 0.2, 5, labels, &used);
    EXPECT_TRUE(every_label_has_both_classes(sub, labels));
    EXPECT_GE(used, 5u);
    const Labels none(100, {0, 0, 0, 0});
    EXPECT_THROW(usable_label_subset(pool, 0.2, 5, none, nullptr, 20), SingleClassError);
}

TEST(LinearProbe, CoinFlipLabelsGiveChance) {
    const auto cfg = eval_config();
    const nn::Encoder<float> enc(cfg.encoder);
    const auto corpus = datagen::generate_corpus_in_memory(cfg.phantom_spec(), 1500);
    const MatD feats = extract_features(enc, enc.init_params(1), corpus.images, cfg.augment);
    const Labels labels = coin_flips(corpus.size(), 3);
    const Split split = split_indices(corpus.size());
    double mean = 0;
    for (int s = 0; s < 3; ++s)
        mean += linear_probe_features(feats, labels, split, 0.5, probe_seed(0, s), cfg.probe).auc / 3.0;
    EXPECT_GE(mean, 0.45);
    EXPECT_LE(mean, 0.55);
}

TEST(LinearProbe, InjectedLabelsAreSeparable) {
    const auto cfg = eval_config();
    const Labels labels = coin_flips(400, 4);
    MatD feats(4, 400);
    for (Index i = 0; i < 400; ++i)
        for (Index k = 0; k < 4; ++k) feats(k, i) = labels[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
    const Split split = split_indices(400);
    for (double f : {0.05, 0.5})
        EXPECT_EQ(linear_probe_features(feats, labels, split, f, 11, cfg.probe).auc, 1.0) << f;
}

TEST(LinearProbe, EncoderIsUntouched) {
    const auto cfg = eval_config();
    const trainer::Trainer<float> tr(cfg, 1);
    const auto state = tr.init_state();
    const auto dir = tu::temp_dir("lp_hash");
    trainer::save_checkpoint(state, cfg, dir / "before.ckpt");
    const auto corpus = datagen::generate_corpus_in_memory(cfg.phantom_spec(), 200);
    const auto res = linear_probe(tr.encoder(), state.model.theta, corpus, cfg, cfg.probe.fractions);
    EXPECT_EQ(res.size(), 3u);
    trainer::save_checkpoint(state, cfg, dir / "after.ckpt");
    EXPECT_EQ(trainer::checkpoint_payload(dir / "before.ckpt"), trainer::checkpoint_payload(dir / "after.ckpt"));
    for (const auto& r : res) {
        EXPECT_GE(r.auc, 0.0);
        EXPECT_LE(r.auc, 1.0);
    }
}

TEST(Finetune, ZeroEpochsIsChanceAndZeroLrMatchesIt) {
    const auto cfg = eval_config();
    const trainer::Trainer<float> tr(cfg, 1);
    const auto state = tr.init_state();
    const auto corpus = datagen::generate_corpus_in_memory(cfg.phantom_spec(), 200);
    const Split split = split_indices(corpus.size());
    const auto zero = finetune_once(tr.encoder(), state.model.theta, corpus, cfg, split, 0.5, 3, 0, 0.003);
    EXPECT_NEAR(zero.auc, 0.5, 0.05);
    const auto no_lr = finetune_once(tr.encoder(), state.model.theta, corpus, cfg, split, 0.5, 3, 3, 0.0);
    EXPECT_EQ(no_lr.auc, zero.auc);
    EXPECT_EQ(no_lr.labeled, zero.labeled);
}

TEST(Finetune, TrainingMovesOffChance) {
    const auto cfg = eval_config();
    const trainer::Trainer<float> tr(cfg, 1);
    const auto state = tr.init_state();
    const auto corpus = datagen::generate_corpus_in_memory(cfg.phantom_spec(), 300);
    const Split split = split_indices(corpus.size());
    const auto r = finetune_once(tr.encoder(), state.model.theta, corpus, cfg, split, 1.0, 3, 5, 0.003);
    EXPECT_NE(r.auc, 0.5);
    EXPECT_GT(r.auc, 0.5);
}

TEST(Position, GridPatchesFollowRowMajorCells) {
    datagen::Image img(18, 18);
    for (int r = 0; r < 18; ++r)
        for (int c = 0; c < 18; ++c) img.at(r, c) = static_cast<float>((r / 6) * 3 + c / 6);
    const auto patches = grid_patches(img);
    ASSERT_EQ(patches.size(), 9u);
    for (int k = 0; k < 9; ++k) {
        EXPECT_EQ(patches[static_cast<std::size_t>(k)].rows, 18);
        for (float v : patches[static_cast<std::size_t>(k)].pixels) ASSERT_EQ(v, static_cast<float>(k));
    }
    const auto odd = grid_patches(datagen::Image(16, 16, 0.5f));
    ASSERT_EQ(odd.size(), 9u);
    EXPECT_EQ(odd[8].rows, 16);
    EXPECT_EQ(odd[8].cols, 16);
}

TEST(Position, OneHotPositionsAreSeparable) {
    const std::size_t images = 100;
    MatD feats = MatD::Zero(9, static_cast<Index>(9 * images));
    for (std::size_t i = 0; i < images; ++i)
        for (int k = 0; k < 9; ++k) feats(k, static_cast<Index>(i * 9 + static_cast<std::size_t>(k))) = 1.0;
    EXPECT_EQ(position_probe_features(feats, images, eval_config().probe).accuracy, 1.0);
}

TEST(Position, NoiseIsChance) {
    const std::size_t images = 400;
    Rng rng = make_rng(6);
    const MatD feats = tu::random_mat(rng, 16, static_cast<Index>(9 * images));
    const auto r = position_probe_features(feats, images, eval_config().probe);
    EXPECT_NEAR(r.accuracy, 1.0 / 9.0, 0.05);
    EXPECT_THROW(position_probe_features(feats, images + 1, eval_config().probe), ShapeError);
}

TEST(CodebookReport, IdenticalEntriesCollapseToIndexZero) {
    const auto cfg = eval_config();
    const trainer::Trainer<float> tr(cfg, 1);
    auto state = tr.init_state();
    for (auto& cb : state.model.codebooks) cb.entries.colwise() = cb.entries.col(3).eval();
    const auto corpus = datagen::generate_corpus_in_memory(cfg.phantom_spec(), 16);
    const auto rep = codebook_report(tr, state.model, corpus.images);
    for (const auto& r : rep) {
        ASSERT_TRUE(r.active);
        EXPECT_EQ(r.perplexity, 1.0);
        EXPECT_DOUBLE_EQ(r.utilization, 1.0 / 6.0);
        EXPECT_GT(r.histogram[0], 0);
        for (std::size_t i = 1; i < r.histogram.size(); ++i) EXPECT_EQ(r.histogram[i], 0);
    }
}

TEST(CodebookReport, InactiveScalesAreMarked) {
    auto cfg = eval_config();
    cfg.variant.scales = {true, false, false};
    const trainer::Trainer<float> tr(cfg, 1);
    const auto state = tr.init_state();
    const auto corpus = datagen::generate_corpus_in_memory(cfg.phantom_spec(), 8);
    const auto rep = codebook_report(tr, state.model, corpus.images);
    EXPECT_TRUE(rep[0].active);
    EXPECT_FALSE(rep[1].active);
    EXPECT_FALSE(rep[2].active);
    EXPECT_EQ(rep[1].perplexity, 0.0);
}

TEST(Report, DeltaIsLpMinusFt) {
    std::vector<ProbeResult> lp{{0.05, 0, 0, 10, 0.8}, {0.05, 1, 1, 10, 0.9}};
    std::vector<ProbeResult> ft{{0.05, 0, 0, 10, 0.6}, {0.05, 1, 1, 10, 0.7}};
    const auto rows = combine(lp, ft, {0.05});
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_DOUBLE_EQ(rows[0].lp_auc, 0.85);
    EXPECT_DOUBLE_EQ(rows[0].ft_auc, 0.65);
    EXPECT_EQ(rows[0].delta, rows[0].lp_auc - rows[0].ft_auc);
}

TEST(Report, JsonRoundTrip) {
    auto cfg = eval_config();
    cfg.probe.seeds = 2;
    const trainer::Trainer<float> tr(cfg, 1);
    const auto state = tr.init_state();
    const auto corpus = datagen::generate_corpus_in_memory(cfg.phantom_spec(), 120);
    EvalOptions opt;
    opt.finetune = false;
    const EvalReport rep = evaluate(cfg, state.model, corpus, opt, "toy");
    const auto text = to_json(rep).dump();
    const EvalReport back = report_from_json(nlohmann::json::parse(text));
    EXPECT_EQ(to_json(back).dump(), text);
    EXPECT_EQ(back.label, "toy");
    EXPECT_EQ(back.codebooks[1].histogram, rep.codebooks[1].histogram);
    EXPECT_FALSE(to_table(rep).empty());
}

TEST(Report, ProtocolsThatDidNotRunAreNull) {
    EvalReport rep;
    rep.label = "lp-only";
    rep.rows = combine({{0.05, 0, 0, 10, 0.8}}, {}, {0.05});
    const auto j = to_json(rep);
    EXPECT_TRUE(j["rows"][0]["ft_auc"].is_null());
    EXPECT_TRUE(j["rows"][0]["delta"].is_null());
    EXPECT_EQ(j["rows"][0]["lp_auc"].get<double>(), 0.8);
    EXPECT_TRUE(j["position_accuracy"].is_null());
    EXPECT_EQ(to_json(report_from_json(nlohmann::json::parse(j.dump()))).dump(), j.dump());
    const std::string table = to_table(rep);
    EXPECT_EQ(table.find("0.05  FT"), std::string::npos);
    EXPECT_NE(table.find("0.05  LP"), std::string::npos);
    EXPECT_EQ(table.find("position probe"), std::string::npos);
}
