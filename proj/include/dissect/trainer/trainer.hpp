#pragma once

// One pretraining step over a batch of view pairs:
//   theta forward on both views, phi forward on both views, per-scale
//   projection + quantization, SERF target per view, symmetrized loss,
//   optimizer update, codebook EMA, momentum update of phi.

#include "dissect/core/error.hpp"
#include "dissect/core/param_store.hpp"
#include "dissect/core/rng.hpp"
#include "dissect/core/types.hpp"
#include "dissect/datagen/augment.hpp"
#include "dissect/momentum/schedule.hpp"
#include "dissect/nn/encoder.hpp"
#include "dissect/objective/objective.hpp"
#include "dissect/serf/serf.hpp"
#include "dissect/trainer/config.hpp"
#include "dissect/trainer/optimizer.hpp"
#include "dissect/vq/codebook.hpp"

#include <array>
#include <chrono>
#include <cmath>
#include <string>
#include <vector>

namespace dissect::trainer {

inline constexpr std::array<const char*, 3> kScaleNames{"c", "m", "f"};

inline std::string projection_name(int j) { return std::string("vq.proj_") + kScaleNames[static_cast<std::size_t>(j)]; }

template <typename T>
struct Model {
    ParamStore<T> theta;  // gradient-trained encoder and heads
    ParamStore<T> phi;    // momentum copy of theta
    ParamStore<T> aux;    // scale projections and SERF parameters
    std::array<vq::Codebook<T>, 3> codebooks;  // coarse, medium, fine
};

template <typename T>
struct TrainState {
    long step = 0;
    int epoch = 0;
    Model<T> model;
    ParamStore<T> velocity_theta;
    ParamStore<T> velocity_aux;
};

struct MetricsRecord {
    long step = 0;
    int epoch = 0;
    double lr = 0;
    double mu = 0;
    objective::LossBreakdown loss;
    std::array<double, 3> perplexity{0, 0, 0};  // 0 for inactive scales
    double grad_norm = 0;
    double wall_time = 0;
};

// Scale-indexed view of the encoder taps.
template <typename T>
const FeatureMap<T>& scale_map(const nn::MultiScaleFeatures<T>& f, int j) {
    return j == 0 ? f.z_c : j == 1 ? f.z_m : f.z_f;
}

template <typename T>
struct ViewPass {
    nn::ForwardResult<T> theta;
    nn::ForwardResult<T> phi;
    std::array<vq::QuantizeResult<T>, 3> quant;
    serf::SerfBatch<T> serf;
};

template <typename T>
struct StepOutput {
    objective::LossBreakdown loss;
    ParamStore<T> grad_theta;
    ParamStore<T> grad_aux;
    std::array<ViewPass<T>, 2> views;
    std::array<double, 3> perplexity{0, 0, 0};
    double grad_norm = 0;
};

template <typename T>
class Trainer {
public:
    // steps_per_epoch drives the lr and momentum schedules.
    Trainer(Config cfg, long steps_per_epoch)
        : cfg_(std::move(cfg)), encoder_(cfg_.encoder), serf_(cfg_.serf_config()), steps_per_epoch_(steps_per_epoch) {
        cfg_.validate();
        if (steps_per_epoch_ < 1) throw ConfigError("steps_per_epoch must be >= 1");
    }

    const Config& config() const { return cfg_; }
    const nn::Encoder<T>& encoder() const { return encoder_; }
    const serf::Serf<T>& serf_module() const { return serf_; }
    long steps_per_epoch() const { return steps_per_epoch_; }
    long total_steps() const { return steps_per_epoch_ * cfg_.train.epochs; }

    TrainState<T> init_state() const {
        TrainState<T> s;
        const std::uint64_t init_seed = stream_seed(cfg_.train.seed, "init");
        s.model.theta = encoder_.init_params(derive_seed(init_seed, 1));
        s.model.phi = s.model.theta;
        const int d = cfg_.encoder.embed_dim;
        Rng rng = make_rng(derive_seed(init_seed, 2));
        for (int j = 0; j < 3; ++j) {
            const int c = cfg_.encoder.stage_channels[static_cast<std::size_t>(2 - j)];
            Mat<T>& w = s.model.aux.add(projection_name(j), {d, c}, ParamKind::weight);
            const double bound = std::sqrt(6.0 / c);
            for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(uniform(rng, -bound, bound));
        }
        serf::add_params(s.model.aux, serf_.config(), derive_seed(init_seed, 3));
        for (int j = 0; j < 3; ++j) {
            s.model.codebooks[static_cast<std::size_t>(j)] = vq::Codebook<T>::init(
                cfg_.vq.entries[static_cast<std::size_t>(j)], d, derive_seed(init_seed, 4, static_cast<std::uint64_t>(j)),
                static_cast<T>(cfg_.vq.decay), cfg_.vq.mode, static_cast<T>(cfg_.vq.epsilon));
        }
        s.velocity_theta = s.model.theta.zeros_like();
        s.velocity_aux = s.model.aux.zeros_like();
        return s;
    }

    double lr_at_step(long step) const {
        momentum::LrSchedule ls{cfg_.train.base_lr, cfg_.train.warmup_epochs, static_cast<double>(cfg_.train.epochs),
                                cfg_.train.floor_lr};
        return momentum::lr_at(ls, static_cast<double>(step) / static_cast<double>(steps_per_epoch_));
    }

    double mu_at_step(long step) const {
        if (!cfg_.variant.momentum) return 0.0;
        momentum::MomentumSchedule ms{cfg_.momentum.mu_base, cfg_.momentum.mu_final, total_steps()};
        return momentum::mu_at(ms, step);
    }

    bool aux_trainable(const std::string& name) const {
        if (name.rfind("vq.proj_", 0) == 0) return true;
        if (cfg_.serf.grad_mode != SerfGradMode::align) return false;
        if (name == "serf.alpha") return cfg_.serf.trainable_alpha;
        return true;
    }

    // Loss and gradients for one batch; the state is not modified.
    StepOutput<T> compute(const Model<T>& m, const FeatureMap<T>& x1, const FeatureMap<T>& x2) const {
        if (x1.batch != x2.batch || x1.batch < 1) throw PreconditionError("train step needs two equal non-empty views");
        StepOutput<T> out;
        const std::array<const FeatureMap<T>*, 2> xs{&x1, &x2};
        const T beta = static_cast<T>(cfg_.vq.beta);
        const auto& scales = cfg_.variant.scales;

        for (int v = 0; v < 2; ++v) {
            auto& vp = out.views[static_cast<std::size_t>(v)];
            vp.theta = encoder_.forward(m.theta, *xs[static_cast<std::size_t>(v)], nn::Heads::projection_and_prediction);
            vp.phi = encoder_.forward(m.phi, *xs[static_cast<std::size_t>(v)], nn::Heads::projection);
            for (int j = 0; j < 3; ++j) {
                if (!scales[static_cast<std::size_t>(j)]) continue;
                const Mat<T> tokens = vq::project_tokens(scale_map(vp.phi.features, j), m.aux[projection_name(j)]);
                vp.quant[static_cast<std::size_t>(j)] = vq::quantize(tokens, m.codebooks[static_cast<std::size_t>(j)], beta);
            }
            const Index batch = xs[0]->batch;
            std::vector<std::array<serf::ScaleTokens<T>, 3>> samples(static_cast<std::size_t>(batch));
            for (int j = 0; j < 3; ++j) {
                if (!scales[static_cast<std::size_t>(j)]) continue;
                const auto& map = scale_map(vp.phi.features, j);
                const auto& q = vp.quant[static_cast<std::size_t>(j)].quantized;
                for (Index b = 0; b < batch; ++b) {
                    auto& st = samples[static_cast<std::size_t>(b)][static_cast<std::size_t>(j)];
                    st.tokens = q.middleCols(b * map.spatial(), map.spatial());
                    st.height = map.height;
                    st.width = map.width;
                }
            }
            vp.serf = serf_.forward(m.aux, samples, vp.phi.embeddings.g);
        }

        // Symmetrized alignment: theta on view a against targets from view 1-a.
        const auto w = objective::target_weights(cfg_.variant.targets);
        const bool serf_trains = cfg_.serf.grad_mode == SerfGradMode::align && w[1] > 0.0;
        out.grad_theta = m.theta.zeros_like();
        out.grad_aux = m.aux.zeros_like();
        double l_hphi = 0, l_qt = 0;
        for (int a = 0; a < 2; ++a) {
            auto& va = out.views[static_cast<std::size_t>(a)];
            const auto& vb = out.views[static_cast<std::size_t>(1 - a)];
            const Mat<T>& h_theta = va.theta.embeddings.h;
            Mat<T> d_hphi, d_qt;
            l_hphi += 0.5 * static_cast<double>(objective::cosine_regression_batch(h_theta, vb.phi.embeddings.g, &d_hphi));
            l_qt += 0.5 * static_cast<double>(objective::cosine_regression_batch(h_theta, vb.serf.q_t, &d_qt));
            nn::EncoderUpstream<T> up;
            up.dh = static_cast<T>(0.5 * w[0]) * d_hphi + static_cast<T>(0.5 * w[1]) * d_qt;
            encoder_.backward_into(m.theta, va.theta, up, out.grad_theta);
            if (serf_trains) {
                Mat<T> d_target;
                objective::cosine_regression_batch(vb.serf.q_t, h_theta, &d_target);
                d_target *= static_cast<T>(0.5 * w[1]);
                serf_.backward(m.aux, vb.serf, d_target, out.grad_aux);
            }
        }

        objective::LossBreakdown& lb = out.loss;
        lb.lambda = cfg_.lambda;
        lb.l_reg_hphi = l_hphi;
        lb.l_reg_qt = l_qt;
        lb.l_sim = w[0] * l_hphi + w[1] * l_qt;
        const T commit_scale = static_cast<T>(0.5 * cfg_.lambda);
        for (int j = 0; j < 3; ++j) {
            if (!scales[static_cast<std::size_t>(j)]) continue;
            double l = 0;
            std::vector<Index> all_indices;
            for (int v = 0; v < 2; ++v) {
                const auto& vp = out.views[static_cast<std::size_t>(v)];
                const auto& q = vp.quant[static_cast<std::size_t>(j)];
                l += 0.5 * static_cast<double>(q.commit_loss);
                const Mat<T> dtok = commit_scale * vq::commit_loss_grad(q, beta);
                out.grad_aux[projection_name(j)].noalias() += dtok * scale_map(vp.phi.features, j).data.transpose();
                all_indices.insert(all_indices.end(), q.indices.begin(), q.indices.end());
            }
            lb.l_vq_per_scale[static_cast<std::size_t>(j)] = l;
            out.perplexity[static_cast<std::size_t>(j)] =
                vq::perplexity(all_indices, m.codebooks[static_cast<std::size_t>(j)].size());
        }
        objective::total_loss(lb);
        if (!std::isfinite(lb.l_total)) throw NonFiniteError("non-finite loss at this step");

        for (std::size_t i = 0; i < out.grad_aux.size(); ++i)
            if (!aux_trainable(out.grad_aux.at(i).name)) out.grad_aux.at(i).value.setZero();
        out.grad_norm = std::sqrt(static_cast<double>(out.grad_theta.squared_norm() + out.grad_aux.squared_norm()));
        if (!std::isfinite(out.grad_norm)) throw NonFiniteError("non-finite gradient at this step");
        return out;
    }

    // Optimizer -> codebook EMA -> momentum, then advances the step counter.
    MetricsRecord apply(TrainState<T>& s, const StepOutput<T>& out) const {
        MetricsRecord rec;
        rec.step = s.step;
        rec.epoch = static_cast<int>(s.step / steps_per_epoch_);
        rec.lr = lr_at_step(s.step);
        rec.mu = mu_at_step(s.step);
        rec.loss = out.loss;
        rec.perplexity = out.perplexity;
        rec.grad_norm = out.grad_norm;

        LarsOptions o;
        o.lr = rec.lr;
        o.weight_decay = cfg_.train.weight_decay;
        o.momentum = cfg_.train.opt_momentum;
        o.trust_coefficient = cfg_.train.trust_coefficient;
        const bool lars = cfg_.train.optimizer == OptimizerKind::lars;
        optimizer_step(s.model.theta, out.grad_theta, s.velocity_theta, lars, o);
        optimizer_step(s.model.aux, out.grad_aux, s.velocity_aux, lars, o,
                       [this](const std::string& n) { return aux_trainable(n); });

        for (int j = 0; j < 3; ++j) {
            if (!cfg_.variant.scales[static_cast<std::size_t>(j)]) continue;
            auto& cb = s.model.codebooks[static_cast<std::size_t>(j)];
            vq::AssignmentStats<T> stats(cb.dim(), cb.size());
            for (const auto& vp : out.views) {
                const auto& q = vp.quant[static_cast<std::size_t>(j)];
                stats.accumulate(q.tokens, q.indices);
            }
            vq::ema_update(cb, stats);
        }

        momentum::momentum_update(s.model.theta, s.model.phi, rec.mu);
        ++s.step;
        if (!s.model.theta.all_finite() || !s.model.phi.all_finite() || !s.model.aux.all_finite())
            throw NonFiniteError("parameters became non-finite at step " + std::to_string(rec.step));
        return rec;
    }

    MetricsRecord train_step(TrainState<T>& s, const FeatureMap<T>& x1, const FeatureMap<T>& x2) const {
        const auto t0 = std::chrono::steady_clock::now();
        StepOutput<T> out = compute(s.model, x1, x2);
        MetricsRecord rec = apply(s, out);
        rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return rec;
    }

    MetricsRecord train_step(TrainState<T>& s, const std::vector<datagen::AugmentedPair>& batch) const {
        if (batch.empty()) throw PreconditionError("train step needs a non-empty batch");
        std::vector<datagen::Image> v1, v2;
        for (const auto& p : batch) {
            v1.push_back(p.x1);
            v2.push_back(p.x2);
        }
        return train_step(s, nn::images_to_batch<T>(v1), nn::images_to_batch<T>(v2));
    }

private:
    Config cfg_;
    nn::Encoder<T> encoder_;
    serf::Serf<T> serf_;
    long steps_per_epoch_;
};

}  // namespace dissect::trainer
