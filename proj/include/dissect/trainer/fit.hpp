#pragma once

// Epoch loop: per-epoch shuffle, per-sample augmentation, train steps,
// metrics log and checkpoints. All randomness is keyed by (seed, epoch,
// step, sample), so a run resumed at an epoch boundary replays exactly.

#include "dissect/core/error.hpp"
#include "dissect/core/rng.hpp"
#include "dissect/datagen/augment.hpp"
#include "dissect/datagen/corpus.hpp"
#include "dissect/trainer/checkpoint.hpp"
#include "dissect/trainer/config.hpp"
#include "dissect/trainer/metrics.hpp"
#include "dissect/trainer/trainer.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace dissect::trainer {

struct FitOptions {
    std::filesystem::path out_dir;
    std::optional<std::filesystem::path> resume_from;
    int stop_after_epoch = -1;  // stop (with a checkpoint) once this many epochs are done
    std::function<void(const MetricsRecord&)> on_step;
    bool quiet = true;
};

struct FitResult {
    std::filesystem::path checkpoint;
    std::filesystem::path metrics;
    std::vector<double> epoch_mean_loss;  // l_total per epoch run in this call
    std::array<double, 3> final_perplexity{0, 0, 0};
};

inline long steps_per_epoch(std::size_t n, int batch_size) {
    return static_cast<long>((n + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size));
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = make_rng(derive_seed(stream_seed(seed, "augment"), 0x73687566, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<long>(i - 1)));
        std::swap(order[i - 1], order[j]);
    }
    return order;
}

inline std::vector<datagen::AugmentedPair> make_batch(const Config& cfg, const datagen::Corpus& corpus,
                                                     const std::vector<std::size_t>& order, int epoch, long step_in_epoch) {
    const auto b = static_cast<std::size_t>(cfg.train.batch_size);
    const std::size_t start = static_cast<std::size_t>(step_in_epoch) * b;
    const std::size_t end = std::min(order.size(), start + b);
    const std::uint64_t aug_seed = stream_seed(cfg.train.seed, "augment");
    std::vector<datagen::AugmentedPair> batch;
    batch.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) {
        Rng rng = make_rng(derive_seed(aug_seed, static_cast<std::uint64_t>(epoch),
                                       static_cast<std::uint64_t>(step_in_epoch), static_cast<std::uint64_t>(order[i])));
        batch.push_back(datagen::make_pair(corpus.images[order[i]], cfg.augment, rng));
    }
    return batch;
}

inline std::string epoch_checkpoint_name(int epoch) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "epoch_%04d.ckpt", epoch);
    return buf;
}

// Codewords whose EMA count fell below one are reseeded from the tokens of
// the epoch's final step.
inline void reseed_dead_codes(const Config& cfg, TrainState<float>& state, const StepOutput<float>& out, int epoch) {
    Rng rng = make_rng(derive_seed(stream_seed(cfg.train.seed, "init"), 0x64656164, static_cast<std::uint64_t>(epoch)));
    for (int j = 0; j < 3; ++j) {
        if (!cfg.variant.scales[static_cast<std::size_t>(j)]) continue;
        const auto& q0 = out.views[0].quant[static_cast<std::size_t>(j)].tokens;
        const auto& q1 = out.views[1].quant[static_cast<std::size_t>(j)].tokens;
        Mat<float> tokens(q0.rows(), q0.cols() + q1.cols());
        tokens << q0, q1;
        vq::reinit_dead_codes(state.model.codebooks[static_cast<std::size_t>(j)], tokens, rng);
    }
}

inline FitResult fit(const Config& cfg, const datagen::Corpus& corpus, const FitOptions& opts) {
    cfg.validate();
    if (corpus.size() == 0) throw PreconditionError("corpus is empty");
    if (corpus.manifest.image_size != cfg.encoder.input_size)
        throw ConfigError("corpus image size " + std::to_string(corpus.manifest.image_size) +
                          " does not match encoder.input_size " + std::to_string(cfg.encoder.input_size));
    Eigen::setNbThreads(cfg.train.threads);
    const long spe = steps_per_epoch(corpus.size(), cfg.train.batch_size);
    Trainer<float> trainer(cfg, spe);

    TrainState<float> state;
    if (opts.resume_from) {
        auto loaded = load_checkpoint<float>(*opts.resume_from);
        if (config_hash(loaded.config) != config_hash(cfg)) {
            // Only the epoch budget may differ between the original run and a resume.
            Config a = loaded.config, b = cfg;
            a.train.epochs = b.train.epochs = 0;
            if (config_hash(a) != config_hash(b)) throw ConfigError("resume checkpoint was written with a different config");
        }
        state = std::move(loaded.state);
        if (state.step != static_cast<long>(state.epoch) * spe)
            throw CheckpointError("resume checkpoint is not at an epoch boundary");
    } else {
        state = trainer.init_state();
    }

    std::filesystem::create_directories(opts.out_dir);
    FitResult result;
    result.metrics = opts.out_dir / "metrics.jsonl";
    std::ofstream log(result.metrics, opts.resume_from ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot write metrics log '" + result.metrics.string() + "'");

    const int last_epoch = opts.stop_after_epoch >= 0 ? std::min(opts.stop_after_epoch, cfg.train.epochs) : cfg.train.epochs;
    for (int epoch = state.epoch; epoch < last_epoch; ++epoch) {
        const auto order = epoch_order(corpus.size(), cfg.train.seed, epoch);
        double loss_sum = 0;
        for (long s = 0; s < spe; ++s) {
            const auto batch = make_batch(cfg, corpus, order, epoch, s);
            std::vector<datagen::Image> v1, v2;
            for (const auto& pr : batch) {
                v1.push_back(pr.x1);
                v2.push_back(pr.x2);
            }
            const auto t0 = std::chrono::steady_clock::now();
            const StepOutput<float> out =
                trainer.compute(state.model, nn::images_to_batch<float>(v1), nn::images_to_batch<float>(v2));
            MetricsRecord rec = trainer.apply(state, out);
            rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            if (cfg.vq.dead_code_reinit && s + 1 == spe) reseed_dead_codes(cfg, state, out, epoch);
            loss_sum += rec.loss.l_total;
            result.final_perplexity = rec.perplexity;
            if (rec.step % cfg.train.log_every == 0) log << to_json(rec).dump() << "\n";
            if (opts.on_step) opts.on_step(rec);
        }
        log.flush();
        state.epoch = epoch + 1;
        result.epoch_mean_loss.push_back(loss_sum / static_cast<double>(spe));
        if (!opts.quiet)
            std::fprintf(stderr, "epoch %d/%d  mean l_total %.5f\n", epoch + 1, cfg.train.epochs,
                         result.epoch_mean_loss.back());
        if (cfg.train.checkpoint_every > 0 && state.epoch % cfg.train.checkpoint_every == 0)
            save_checkpoint(state, cfg, opts.out_dir / epoch_checkpoint_name(state.epoch));
    }
    result.checkpoint = opts.out_dir / (state.epoch >= cfg.train.epochs ? "final.ckpt" : epoch_checkpoint_name(state.epoch));
    save_checkpoint(state, cfg, result.checkpoint);
    return result;
}

// Corpus from a directory, or generated in memory from the config.
inline datagen::Corpus load_or_generate_corpus(const Config& cfg, const std::optional<std::filesystem::path>& dir) {
    if (dir) return datagen::read_corpus(*dir);
    return datagen::generate_corpus_in_memory(cfg.phantom_spec(), static_cast<std::size_t>(cfg.data_num));
}

}  // namespace dissect::trainer
