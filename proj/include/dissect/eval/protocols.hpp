#pragma once

// Downstream protocols on a pretrained state: linear probing on frozen
// pooled features, fine-tuning of encoder and head, the 3x3 patch-position
// probe and codebook utilization diagnostics.

#include "dissect/core/error.hpp"
#include "dissect/core/rng.hpp"
#include "dissect/datagen/augment.hpp"
#include "dissect/datagen/corpus.hpp"
#include "dissect/eval/auc.hpp"
#include "dissect/eval/linear.hpp"
#include "dissect/eval/split.hpp"
#include "dissect/nn/encoder.hpp"
#include "dissect/trainer/config.hpp"
#include "dissect/trainer/optimizer.hpp"
#include "dissect/trainer/trainer.hpp"
#include "dissect/vq/codebook.hpp"

#include <array>
#include <cmath>
#include <string>
#include <vector>

namespace dissect::eval {

using Labels = std::vector<std::array<int, 4>>;

inline datagen::Image prepare_image(const datagen::Image& img, const datagen::AugmentConfig& aug) {
    return datagen::normalize(img, aug.normalize_mean, aug.normalize_std);
}

// Pooled backbone features (channels x images) of normalized, unaugmented images.
template <typename T>
MatD extract_features(const nn::Encoder<T>& enc, const ParamStore<T>& params, const std::vector<datagen::Image>& images,
                      const datagen::AugmentConfig& aug, std::size_t batch = 128) {
    MatD out(enc.config().coarse_channels(), static_cast<Index>(images.size()));
    for (std::size_t start = 0; start < images.size(); start += batch) {
        const std::size_t end = std::min(images.size(), start + batch);
        std::vector<datagen::Image> chunk;
        for (std::size_t i = start; i < end; ++i) chunk.push_back(prepare_image(images[i], aug));
        const auto fwd = enc.forward(params, nn::images_to_batch<T>(chunk), nn::Heads::none);
        out.middleCols(static_cast<Index>(start), static_cast<Index>(end - start)) = fwd.features.pooled.template cast<double>();
    }
    return out;
}

inline MatD label_matrix(const Labels& labels, const std::vector<std::size_t>& idx) {
    MatD y(4, static_cast<Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (int k = 0; k < 4; ++k) y(k, static_cast<Index>(i)) = labels[idx[i]][static_cast<std::size_t>(k)];
    return y;
}

inline Labels gather_labels(const Labels& labels, const std::vector<std::size_t>& idx) {
    Labels out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(labels[i]);
    return out;
}

struct ProbeResult {
    double fraction = 0;
    int seed = 0;                 // requested seed index
    std::uint64_t subset_seed = 0;  // seed that produced a usable subset
    std::size_t labeled = 0;
    double auc = 0;
};

inline std::uint64_t probe_seed(std::uint64_t root, int s) {
    return derive_seed(stream_seed(root, "probe"), static_cast<std::uint64_t>(s));
}

// Linear probe on precomputed features (features x samples). Standardization
// uses the labeled subset only.
inline ProbeResult linear_probe_features(const MatD& features, const Labels& labels, const Split& split, double fraction,
                                         std::uint64_t seed, const trainer::ProbeSettings& ps) {
    ProbeResult r;
    r.fraction = fraction;
    const auto subset = usable_label_subset(split.train, fraction, seed, labels, &r.subset_seed);
    r.labeled = subset.size();
    const Standardizer st = Standardizer::fit(features, subset);
    const MatD x_train = st.apply(gather_columns(features, subset));
    FitSettings fs{ps.l2, ps.lr, ps.epochs, ps.grad_tol};
    const LinearHead head = fit_logistic(x_train, label_matrix(labels, subset), fs);
    const MatD x_test = st.apply(gather_columns(features, split.test));
    r.auc = mean_auc(head.scores(x_test), gather_labels(labels, split.test));
    return r;
}

template <typename T>
std::vector<ProbeResult> linear_probe(const nn::Encoder<T>& enc, const ParamStore<T>& theta, const datagen::Corpus& corpus,
                                      const trainer::Config& cfg, const std::vector<double>& fractions) {
    const MatD features = extract_features(enc, theta, corpus.images, cfg.augment);
    const Split split = split_indices(corpus.size());
    std::vector<ProbeResult> out;
    for (double f : fractions) {
        for (int s = 0; s < cfg.probe.seeds; ++s) {
            ProbeResult r = linear_probe_features(features, corpus.labels, split, f, probe_seed(cfg.train.seed, s), cfg.probe);
            r.seed = s;
            out.push_back(r);
        }
    }
    return out;
}

// Fine-tunes the backbone and a zero-initialized linear head with BCE and
// momentum SGD; no augmentation. The head sees pooled features through a
// fixed standardization fitted on the labeled subset at the starting weights,
// the same preprocessing the linear probe uses.
template <typename T>
ProbeResult finetune_once(const nn::Encoder<T>& enc, ParamStore<T> theta, const datagen::Corpus& corpus,
                          const trainer::Config& cfg, const Split& split, double fraction, std::uint64_t seed,
                          int epochs, double lr) {
    ProbeResult r;
    r.fraction = fraction;
    const auto subset = usable_label_subset(split.train, fraction, seed, corpus.labels, &r.subset_seed);
    r.labeled = subset.size();
    const Index c = enc.config().coarse_channels();
    ParamStore<T> head;
    head.add("head.weight", {4, c}, ParamKind::weight);
    head.add("head.bias", {4}, ParamKind::bias);
    ParamStore<T> vel_theta = theta.zeros_like();
    ParamStore<T> vel_head = head.zeros_like();
    trainer::LarsOptions o;
    o.lr = lr;
    o.weight_decay = 0.0;
    o.momentum = cfg.finetune.momentum;
    const auto backbone_only = [](const std::string& n) { return n.rfind("backbone.", 0) == 0; };

    std::vector<datagen::Image> prepared;
    prepared.reserve(corpus.size());
    for (const auto& img : corpus.images) prepared.push_back(prepare_image(img, cfg.augment));

    const Standardizer st = [&] {
        std::vector<datagen::Image> labeled;
        for (std::size_t i : subset) labeled.push_back(corpus.images[i]);
        const MatD f = extract_features(enc, theta, labeled, cfg.augment);
        std::vector<std::size_t> all(subset.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        return Standardizer::fit(f, all);
    }();
    const Vec<T> mean = st.mean.cast<T>();
    const Vec<T> inv_std = st.inv_std.cast<T>();

    Rng rng = make_rng(derive_seed(seed, 0x66696e65ULL));
    std::vector<std::size_t> order = subset;
    const auto bs = static_cast<std::size_t>(cfg.finetune.batch_size);
    for (int e = 0; e < epochs; ++e) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<long>(i - 1)))]);
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(order.size(), start + bs);
            std::vector<datagen::Image> imgs;
            std::vector<std::size_t> idx;
            for (std::size_t i = start; i < end; ++i) {
                imgs.push_back(prepared[order[i]]);
                idx.push_back(order[i]);
            }
            const auto fwd = enc.forward(theta, nn::images_to_batch<T>(imgs), nn::Heads::none);
            const Mat<T> xs = ((fwd.features.pooled.colwise() - mean).array().colwise() * inv_std.array()).matrix();
            Mat<T> z = (head["head.weight"] * xs).colwise() + head["head.bias"].col(0);
            const Mat<T> y = label_matrix(corpus.labels, idx).cast<T>();
            const T inv = T(1) / static_cast<T>(xs.cols());
            Mat<T> dz = z.unaryExpr([](T v) { return static_cast<T>(detail::sigmoid(static_cast<double>(v))); }) - y;
            dz *= inv;
            ParamStore<T> g_head = head.zeros_like();
            g_head["head.weight"] = dz * xs.transpose();
            g_head["head.bias"] = dz.rowwise().sum();
            nn::EncoderUpstream<T> up;
            up.dpooled = ((head["head.weight"].transpose() * dz).array().colwise() * inv_std.array()).matrix();
            const ParamStore<T> g_theta = enc.backward(theta, fwd, up);
            trainer::optimizer_step(theta, g_theta, vel_theta, false, o, backbone_only);
            trainer::optimizer_step(head, g_head, vel_head, false, o);
        }
    }

    const auto test_imgs = [&] {
        std::vector<datagen::Image> v;
        for (std::size_t i : split.test) v.push_back(corpus.images[i]);
        return v;
    }();
    const MatD feats = st.apply(extract_features(enc, theta, test_imgs, cfg.augment));
    const MatD scores = (head["head.weight"].template cast<double>() * feats).colwise() +
                        head["head.bias"].col(0).template cast<double>();
    r.auc = mean_auc(scores, gather_labels(corpus.labels, split.test));
    return r;
}

template <typename T>
std::vector<ProbeResult> finetune(const nn::Encoder<T>& enc, const ParamStore<T>& theta, const datagen::Corpus& corpus,
                                  const trainer::Config& cfg, const std::vector<double>& fractions) {
    const Split split = split_indices(corpus.size());
    const double lr = cfg.finetune.lr_scale * cfg.train.base_lr;
    std::vector<ProbeResult> out;
    for (double f : fractions) {
        for (int s = 0; s < cfg.probe.seeds; ++s) {
            ProbeResult r = finetune_once(enc, theta, corpus, cfg, split, f, probe_seed(cfg.train.seed, s),
                                          cfg.finetune.epochs, lr);
            r.seed = s;
            out.push_back(r);
        }
    }
    return out;
}

// Pads to the next multiple of 3 by edge replication and cuts a 3x3 grid;
// patch k = row * 3 + col, each resized (nearest) back to the input size.
inline std::vector<datagen::Image> grid_patches(const datagen::Image& img) {
    const int padded = ((img.rows + 2) / 3) * 3;
    const int cell = padded / 3;
    std::vector<datagen::Image> out;
    for (int gr = 0; gr < 3; ++gr) {
        for (int gc = 0; gc < 3; ++gc) {
            datagen::Image p(img.rows, img.cols);
            for (int r = 0; r < img.rows; ++r) {
                for (int c = 0; c < img.cols; ++c) {
                    const int sr = std::min(gr * cell + (r * cell) / img.rows, img.rows - 1);
                    const int sc = std::min(gc * cell + (c * cell) / img.cols, img.cols - 1);
                    p.at(r, c) = img.at(sr, sc);
                }
            }
            out.push_back(std::move(p));
        }
    }
    return out;
}

struct PositionProbeResult {
    double accuracy = 0;
    std::size_t train_patches = 0;
    std::size_t test_patches = 0;
};

// Softmax probe on patch position from features (features x (9 * images)),
// column i * 9 + k holding patch k of image i.
inline PositionProbeResult position_probe_features(const MatD& features, std::size_t images, const trainer::ProbeSettings& ps) {
    if (features.cols() != static_cast<Index>(9 * images)) throw ShapeError("position probe: expected 9 patches per image");
    const Split split = split_indices(images);
    std::vector<std::size_t> train_cols, test_cols;
    std::vector<int> train_labels, test_labels;
    for (std::size_t i : split.train)
        for (int k = 0; k < 9; ++k) {
            train_cols.push_back(i * 9 + static_cast<std::size_t>(k));
            train_labels.push_back(k);
        }
    for (std::size_t i : split.test)
        for (int k = 0; k < 9; ++k) {
            test_cols.push_back(i * 9 + static_cast<std::size_t>(k));
            test_labels.push_back(k);
        }
    if (train_cols.empty() || test_cols.empty()) throw PreconditionError("position probe needs images on both sides of the split");
    const Standardizer st = Standardizer::fit(features, train_cols);
    FitSettings fs{ps.l2, ps.lr, ps.epochs, ps.grad_tol};
    const LinearHead head = fit_softmax(st.apply(gather_columns(features, train_cols)), train_labels, 9, fs);
    const auto pred = argmax_columns(head.scores(st.apply(gather_columns(features, test_cols))));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == test_labels[i];
    PositionProbeResult r;
    r.accuracy = static_cast<double>(correct) / static_cast<double>(pred.size());
    r.train_patches = train_cols.size();
    r.test_patches = test_cols.size();
    return r;
}

template <typename T>
PositionProbeResult position_probe(const nn::Encoder<T>& enc, const ParamStore<T>& theta,
                                   const std::vector<datagen::Image>& images, const trainer::Config& cfg) {
    std::vector<datagen::Image> patches;
    patches.reserve(images.size() * 9);
    for (const auto& img : images)
        for (auto& p : grid_patches(img)) patches.push_back(std::move(p));
    const MatD features = extract_features(enc, theta, patches, cfg.augment);
    return position_probe_features(features, images.size(), cfg.probe);
}

struct CodebookScaleReport {
    bool active = false;
    double perplexity = 0;
    double utilization = 0;  // fraction of codewords with at least one assignment
    std::vector<long> histogram;
};

// Assignments of the supervision branch over a reference image set.
template <typename T>
std::array<CodebookScaleReport, 3> codebook_report(const trainer::Trainer<T>& tr, const trainer::Model<T>& model,
                                                   const std::vector<datagen::Image>& images, std::size_t batch = 128) {
    std::array<CodebookScaleReport, 3> rep;
    std::array<std::vector<Index>, 3> indices;
    const auto& cfg = tr.config();
    for (std::size_t start = 0; start < images.size(); start += batch) {
        const std::size_t end = std::min(images.size(), start + batch);
        std::vector<datagen::Image> chunk;
        for (std::size_t i = start; i < end; ++i) chunk.push_back(prepare_image(images[i], cfg.augment));
        const auto fwd = tr.encoder().forward(model.phi, nn::images_to_batch<T>(chunk), nn::Heads::none);
        for (int j = 0; j < 3; ++j) {
            if (!cfg.variant.scales[static_cast<std::size_t>(j)]) continue;
            const Mat<T> tokens = vq::project_tokens(trainer::scale_map(fwd.features, j), model.aux[trainer::projection_name(j)]);
            const auto idx = vq::assign(tokens, model.codebooks[static_cast<std::size_t>(j)]);
            indices[static_cast<std::size_t>(j)].insert(indices[static_cast<std::size_t>(j)].end(), idx.begin(), idx.end());
        }
    }
    for (int j = 0; j < 3; ++j) {
        auto& r = rep[static_cast<std::size_t>(j)];
        const auto& idx = indices[static_cast<std::size_t>(j)];
        if (idx.empty()) continue;
        const Index n = model.codebooks[static_cast<std::size_t>(j)].size();
        r.active = true;
        r.histogram.assign(static_cast<std::size_t>(n), 0);
        for (Index i : idx) ++r.histogram[static_cast<std::size_t>(i)];
        long used = 0;
        for (long h : r.histogram) used += h > 0;
        r.utilization = static_cast<double>(used) / static_cast<double>(n);
        r.perplexity = vq::perplexity(idx, n);
    }
    return rep;
}

}  // namespace dissect::eval
