#pragma once

#include "dissect/eval/protocols.hpp"
#include "dissect/trainer/checkpoint.hpp"

#include "json.hpp"

#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace dissect::eval {

struct FractionRow {
    double fraction = 0;
    double ft_auc = 0;  // mean over seeds
    double lp_auc = 0;
    double delta = 0;   // lp_auc - ft_auc
    std::vector<double> ft_per_seed;
    std::vector<double> lp_per_seed;
};

struct EvalReport {
    std::string label;
    std::vector<FractionRow> rows;
    std::array<CodebookScaleReport, 3> codebooks;
    bool has_position = false;
    double position_accuracy = 0;
};

// A protocol that was not run leaves its per-seed list empty.
inline nlohmann::ordered_json number_or_null(double v, bool present) {
    return present ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
}

inline double number_or_zero(const nlohmann::json& j) { return j.is_null() ? 0.0 : j.get<double>(); }

inline double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline std::vector<FractionRow> combine(const std::vector<ProbeResult>& lp, const std::vector<ProbeResult>& ft,
                                        const std::vector<double>& fractions) {
    std::vector<FractionRow> rows;
    for (double f : fractions) {
        FractionRow row;
        row.fraction = f;
        for (const auto& r : lp)
            if (r.fraction == f) row.lp_per_seed.push_back(r.auc);
        for (const auto& r : ft)
            if (r.fraction == f) row.ft_per_seed.push_back(r.auc);
        row.lp_auc = mean_of(row.lp_per_seed);
        row.ft_auc = mean_of(row.ft_per_seed);
        row.delta = row.lp_auc - row.ft_auc;
        rows.push_back(row);
    }
    return rows;
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    j["record"] = "eval_report";
    j["label"] = r.label;
    auto rows = nlohmann::ordered_json::array();
    for (const auto& row : r.rows) {
        nlohmann::ordered_json o;
        o["fraction"] = row.fraction;
        const bool ft = !row.ft_per_seed.empty(), lp = !row.lp_per_seed.empty();
        o["ft_auc"] = number_or_null(row.ft_auc, ft);
        o["lp_auc"] = number_or_null(row.lp_auc, lp);
        o["delta"] = number_or_null(row.delta, ft && lp);
        o["ft_per_seed"] = row.ft_per_seed;
        o["lp_per_seed"] = row.lp_per_seed;
        rows.push_back(o);
    }
    j["rows"] = rows;
    const char* names[3] = {"c", "m", "f"};
    for (int s = 0; s < 3; ++s) {
        const auto& cb = r.codebooks[static_cast<std::size_t>(s)];
        nlohmann::ordered_json o;
        o["active"] = cb.active;
        o["perplexity"] = cb.perplexity;
        o["utilization"] = cb.utilization;
        o["histogram"] = cb.histogram;
        j[std::string("codebook_") + names[s]] = o;
    }
    j["position_accuracy"] = number_or_null(r.position_accuracy, r.has_position);
    return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport r;
    r.label = j.at("label").get<std::string>();
    for (const auto& o : j.at("rows")) {
        FractionRow row;
        row.fraction = o.at("fraction").get<double>();
        row.ft_auc = number_or_zero(o.at("ft_auc"));
        row.lp_auc = number_or_zero(o.at("lp_auc"));
        row.delta = number_or_zero(o.at("delta"));
        row.ft_per_seed = o.at("ft_per_seed").get<std::vector<double>>();
        row.lp_per_seed = o.at("lp_per_seed").get<std::vector<double>>();
        r.rows.push_back(row);
    }
    const char* names[3] = {"c", "m", "f"};
    for (int s = 0; s < 3; ++s) {
        const auto& o = j.at(std::string("codebook_") + names[s]);
        auto& cb = r.codebooks[static_cast<std::size_t>(s)];
        cb.active = o.at("active").get<bool>();
        cb.perplexity = o.at("perplexity").get<double>();
        cb.utilization = o.at("utilization").get<double>();
        cb.histogram = o.at("histogram").get<std::vector<long>>();
    }
    r.has_position = !j.at("position_accuracy").is_null();
    r.position_accuracy = number_or_zero(j.at("position_accuracy"));
    return r;
}

// One row per (fraction, protocol), followed by the wide FT / LP / delta table.
inline std::string to_table(const EvalReport& r) {
    std::ostringstream os;
    char buf[160];
    os << "# " << (r.label.empty() ? "evaluation" : r.label) << "\n";
    os << "fraction  protocol  auc_mean  per_seed\n";
    for (const auto& row : r.rows) {
        for (int p = 0; p < 2; ++p) {
            const auto& seeds = p == 0 ? row.ft_per_seed : row.lp_per_seed;
            if (seeds.empty()) continue;
            std::snprintf(buf, sizeof(buf), "%8.2f  %-8s  %8.4f ", row.fraction, p == 0 ? "FT" : "LP",
                          p == 0 ? row.ft_auc : row.lp_auc);
            os << buf;
            for (double s : seeds) {
                std::snprintf(buf, sizeof(buf), " %.4f", s);
                os << buf;
            }
            os << "\n";
        }
    }
    os << "\nfraction        FT        LP     delta\n";
    const auto cell = [&](double v, bool present, const char* fmt) {
        if (!present) return std::string("        -");
        std::snprintf(buf, sizeof(buf), fmt, v);
        return std::string(buf);
    };
    for (const auto& row : r.rows) {
        const bool ft = !row.ft_per_seed.empty(), lp = !row.lp_per_seed.empty();
        std::snprintf(buf, sizeof(buf), "%8.2f", row.fraction);
        os << buf << "  " << cell(row.ft_auc, ft, "%8.4f") << "  " << cell(row.lp_auc, lp, "%8.4f") << "  "
           << cell(row.delta, ft && lp, "%+8.4f") << "\n";
    }
    os << "\nscale  perplexity  utilization\n";
    const char* names[3] = {"c", "m", "f"};
    for (int s = 0; s < 3; ++s) {
        const auto& cb = r.codebooks[static_cast<std::size_t>(s)];
        if (!cb.active) {
            std::snprintf(buf, sizeof(buf), "%5s  %10s  %11s\n", names[s], "-", "-");
        } else {
            std::snprintf(buf, sizeof(buf), "%5s  %10.3f  %11.3f\n", names[s], cb.perplexity, cb.utilization);
        }
        os << buf;
    }
    if (r.has_position) {
        std::snprintf(buf, sizeof(buf), "\nposition probe accuracy: %.4f\n", r.position_accuracy);
        os << buf;
    }
    return os.str();
}

struct EvalOptions {
    bool linear_probe = true;
    bool finetune = true;
    bool position = true;
    bool codebooks = true;
    std::size_t reference_images = 256;
};

template <typename T>
EvalReport evaluate(const trainer::Config& cfg, const trainer::Model<T>& model, const datagen::Corpus& corpus,
                    const EvalOptions& opt = {}, std::string label = {}) {
    trainer::Trainer<T> tr(cfg, 1);
    EvalReport rep;
    rep.label = std::move(label);
    std::vector<ProbeResult> lp, ft;
    if (opt.linear_probe) lp = linear_probe(tr.encoder(), model.theta, corpus, cfg, cfg.probe.fractions);
    if (opt.finetune) ft = finetune(tr.encoder(), model.theta, corpus, cfg, cfg.probe.fractions);
    rep.rows = combine(lp, ft, cfg.probe.fractions);
    const Split split = split_indices(corpus.size());
    if (opt.codebooks) {
        std::vector<datagen::Image> ref;
        for (std::size_t i = 0; i < split.test.size() && ref.size() < opt.reference_images; ++i)
            ref.push_back(corpus.images[split.test[i]]);
        rep.codebooks = codebook_report(tr, model, ref);
    }
    if (opt.position) {
        std::vector<datagen::Image> imgs;
        const std::size_t n = std::min<std::size_t>(corpus.size(), static_cast<std::size_t>(cfg.probe.position_images));
        for (std::size_t i = 0; i < n; ++i) imgs.push_back(corpus.images[i]);
        rep.position_accuracy = position_probe(tr.encoder(), model.theta, imgs, cfg).accuracy;
        rep.has_position = true;
    }
    return rep;
}

}  // namespace dissect::eval
