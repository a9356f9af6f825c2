#pragma once

// Command-line entry point. Exit codes: 0 success, 1 runtime failure,
// 2 usage or configuration error.

#include "dissect/core/error.hpp"
#include "dissect/datagen/corpus.hpp"
#include "dissect/eval/report.hpp"
#include "dissect/trainer/checkpoint.hpp"
#include "dissect/trainer/config.hpp"
#include "dissect/trainer/fit.hpp"

#include "CLI11.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dissect::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// Ablation variant name -> config overrides.
inline const std::map<std::string, std::vector<std::pair<std::string, std::string>>>& ablation_variants() {
    static const std::map<std::string, std::vector<std::pair<std::string, std::string>>> table = {
        {"full", {}},
        {"no-serf-concat", {{"variant.serf", "concat"}}},
        {"no-post-serf-head", {{"variant.post_serf_head", "off"}}},
        {"coarse-only", {{"variant.scales", "c"}}},
        {"medium-only", {{"variant.scales", "m"}}},
        {"fine-only", {{"variant.scales", "f"}}},
        {"hphi-only", {{"variant.targets", "h_phi"}}},
        {"qt-only", {{"variant.targets", "q_t"}}},
        {"no-momentum", {{"variant.momentum", "off"}}},
    };
    return table;
}

inline trainer::Config apply_variant(trainer::Config cfg, const std::string& variant) {
    const auto& table = ablation_variants();
    auto it = table.find(variant);
    if (it == table.end()) {
        std::string names;
        for (const auto& [k, v] : table) names += (names.empty() ? "" : ", ") + k;
        throw UsageError("unknown variant '" + variant + "' (expected one of: " + names + ")");
    }
    KeyValues kv;
    for (const auto& [k, v] : it->second) kv.set(k, v);
    cfg = trainer::apply(cfg, kv);
    cfg.validate();
    return cfg;
}

struct CommonFlags {
    std::optional<std::uint64_t> seed;
    std::string config;
    std::string out;
    int threads = 1;
};

inline void add_common(CLI::App* sub, CommonFlags& f) {
    sub->add_option("--seed", f.seed, "Root seed for all random streams");
    sub->add_option("--config", f.config, "key=value config file");
    sub->add_option("--out", f.out, "Output path");
    sub->add_option("--threads", f.threads, "Worker threads (1 keeps runs bitwise reproducible)")->check(CLI::PositiveNumber);
}

inline trainer::Config build_config(const CommonFlags& f) {
    trainer::Config cfg;
    if (!f.config.empty()) cfg = trainer::apply(cfg, KeyValues::load(f.config));
    if (f.seed) cfg.train.seed = *f.seed;
    cfg.train.threads = f.threads;
    cfg.validate();
    return cfg;
}

// Evaluation settings layered on top of a checkpoint's config: only probe.*
// and finetune.* keys may change.
inline trainer::Config eval_config(trainer::Config base, const CommonFlags& f) {
    if (!f.config.empty()) {
        const KeyValues kv = KeyValues::load(f.config);
        for (const auto& [k, v] : kv.entries())
            if (k.rfind("probe.", 0) != 0 && k.rfind("finetune.", 0) != 0)
                throw ConfigError("key '" + k + "' cannot be overridden when evaluating a checkpoint");
        base = trainer::apply(base, kv);
    }
    if (f.seed) base.train.seed = *f.seed;
    base.train.threads = f.threads;
    base.validate();
    return base;
}

inline std::optional<std::filesystem::path> opt_path(const std::string& s) {
    if (s.empty()) return std::nullopt;
    return std::filesystem::path(s);
}

inline void write_report(const eval::EvalReport& rep, const std::string& out_dir, std::ostream& out) {
    const std::string line = eval::to_json(rep).dump();
    const std::string table = eval::to_table(rep);
    out << table << line << "\n";
    if (out_dir.empty()) return;
    std::filesystem::create_directories(out_dir);
    std::ofstream j(std::filesystem::path(out_dir) / "report.jsonl", std::ios::app);
    std::ofstream t(std::filesystem::path(out_dir) / "report.txt");
    if (!j || !t) throw IoError("cannot write report files in '" + out_dir + "'");
    j << line << "\n";
    t << table;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Multi-scale quantized self-supervised pretraining toolkit"};
    app.require_subcommand(1);

    CommonFlags gen_f, pre_f, probe_f, ft_f, eval_f, insp_f, abl_f;
    int gen_num = 100;
    std::string pre_data, pre_resume, probe_ckpt, probe_data, ft_ckpt, ft_data, eval_ckpt, eval_data, insp_ckpt,
        abl_variant, abl_data;
    std::optional<int> pre_epochs, abl_epochs;
    bool verbose = false;

    auto* gen = app.add_subcommand("gen-data", "Generate a phantom corpus");
    add_common(gen, gen_f);
    gen->add_option("--num", gen_num, "Number of images")->required();

    auto* pre = app.add_subcommand("pretrain", "Pretrain an encoder");
    add_common(pre, pre_f);
    pre->add_option("--data", pre_data, "Corpus directory (default: generate from config)");
    pre->add_option("--epochs", pre_epochs, "Override train.epochs");
    pre->add_option("--resume", pre_resume, "Resume from a checkpoint at an epoch boundary");
    pre->add_flag("--verbose", verbose, "Print per-epoch progress");

    auto* probe = app.add_subcommand("probe", "Linear-probe a checkpoint");
    add_common(probe, probe_f);
    probe->add_option("--ckpt", probe_ckpt, "Checkpoint")->required();
    probe->add_option("--data", probe_data, "Corpus directory");

    auto* ft = app.add_subcommand("finetune", "Fine-tune a checkpoint");
    add_common(ft, ft_f);
    ft->add_option("--ckpt", ft_ckpt, "Checkpoint")->required();
    ft->add_option("--data", ft_data, "Corpus directory");

    auto* ev = app.add_subcommand("eval-all", "Run every evaluation protocol on a checkpoint");
    add_common(ev, eval_f);
    ev->add_option("--ckpt", eval_ckpt, "Checkpoint")->required();
    ev->add_option("--data", eval_data, "Corpus directory");

    auto* insp = app.add_subcommand("inspect", "Print checkpoint manifest and codebook usage");
    add_common(insp, insp_f);
    insp->add_option("--ckpt", insp_ckpt, "Checkpoint")->required();

    auto* abl = app.add_subcommand("ablate", "Pretrain and evaluate one ablation variant");
    add_common(abl, abl_f);
    abl->add_option("--variant", abl_variant, "Variant name")->required();
    abl->add_option("--data", abl_data, "Corpus directory");
    abl->add_option("--epochs", abl_epochs, "Override train.epochs");
    abl->add_flag("--verbose", verbose, "Print per-epoch progress");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*gen) {
            if (gen_f.out.empty()) throw UsageError("gen-data needs --out");
            const trainer::Config cfg = build_config(gen_f);
            if (gen_num < 1) throw UsageError("--num must be >= 1");
            const auto man = datagen::generate_corpus(cfg.phantom_spec(), static_cast<std::size_t>(gen_num), gen_f.out);
            out << "wrote " << man.count << " images to " << gen_f.out << " (spec_hash " << man.spec_hash << ")\n";
            return kExitOk;
        }
        if (*pre || *abl) {
            CommonFlags& f = *pre ? pre_f : abl_f;
            trainer::Config cfg = build_config(f);
            const auto& epochs = *pre ? pre_epochs : abl_epochs;
            if (epochs) {
                if (*epochs < 0) throw UsageError("--epochs must be >= 0");
                cfg.train.epochs = *epochs;
            }
            if (*abl) cfg = apply_variant(cfg, abl_variant);
            if (f.out.empty()) throw UsageError(std::string(*pre ? "pretrain" : "ablate") + " needs --out");
            Eigen::setNbThreads(cfg.train.threads);
            const auto corpus = trainer::load_or_generate_corpus(cfg, opt_path(*pre ? pre_data : abl_data));
            trainer::FitOptions fo;
            fo.out_dir = f.out;
            fo.quiet = !verbose;
            if (*pre && !pre_resume.empty()) fo.resume_from = pre_resume;
            const auto res = trainer::fit(cfg, corpus, fo);
            out << "checkpoint " << res.checkpoint.string() << "\n"
                << "metrics " << res.metrics.string() << "\n";
            if (!res.epoch_mean_loss.empty())
                out << "epoch mean l_total: first " << res.epoch_mean_loss.front() << ", last "
                    << res.epoch_mean_loss.back() << "\n";
            if (*abl) {
                const auto loaded = trainer::load_checkpoint<float>(res.checkpoint);
                write_report(eval::evaluate(cfg, loaded.state.model, corpus, {}, abl_variant), f.out, out);
            }
            return kExitOk;
        }
        if (*probe || *ft || *ev) {
            CommonFlags& f = *probe ? probe_f : *ft ? ft_f : eval_f;
            const std::string& ckpt = *probe ? probe_ckpt : *ft ? ft_ckpt : eval_ckpt;
            const std::string& data = *probe ? probe_data : *ft ? ft_data : eval_data;
            auto loaded = trainer::load_checkpoint<float>(ckpt);
            const trainer::Config cfg = eval_config(loaded.config, f);
            Eigen::setNbThreads(cfg.train.threads);
            const auto corpus = trainer::load_or_generate_corpus(cfg, opt_path(data));
            eval::EvalOptions eo;
            eo.linear_probe = !*ft;
            eo.finetune = !*probe;
            eo.position = ev->parsed();
            eo.codebooks = ev->parsed();
            write_report(eval::evaluate(cfg, loaded.state.model, corpus, eo, std::filesystem::path(ckpt).filename().string()),
                         f.out, out);
            return kExitOk;
        }
        if (*insp) {
            const auto raw = trainer::read_raw_checkpoint(insp_ckpt);
            auto loaded = trainer::load_checkpoint<float>(insp_ckpt);
            trainer::Config cfg = loaded.config;
            if (insp_f.seed) cfg.train.seed = *insp_f.seed;
            out << "format_version " << raw.manifest.version << "\n"
                << "step " << raw.manifest.step << "\n"
                << "epoch " << raw.manifest.epoch << "\n"
                << "config_hash " << raw.manifest.config_hash << "\n"
                << "payload_bytes " << raw.manifest.payload_bytes << "\n"
                << "payload_checksum " << raw.manifest.payload_checksum << "\n"
                << "arrays " << raw.manifest.arrays.size() << "\n";
            const std::size_t n = std::min<std::size_t>(256, static_cast<std::size_t>(cfg.data_num));
            const auto ref = datagen::generate_corpus_in_memory(cfg.phantom_spec(), n);
            trainer::Trainer<float> tr(cfg, 1);
            const auto rep = eval::codebook_report(tr, loaded.state.model, ref.images);
            for (int j = 0; j < 3; ++j) {
                const auto& r = rep[static_cast<std::size_t>(j)];
                out << "perplexity_" << trainer::kScaleNames[static_cast<std::size_t>(j)] << " ";
                if (r.active) out << r.perplexity << " utilization " << r.utilization << "\n";
                else out << "inactive\n";
            }
            if (!insp_f.out.empty()) {
                std::ofstream o(insp_f.out);
                if (!o) throw IoError("cannot write '" + insp_f.out + "'");
                o << "step=" << raw.manifest.step << "\nepoch=" << raw.manifest.epoch << "\n";
            }
            return kExitOk;
        }
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}

}  // namespace dissect::cli
