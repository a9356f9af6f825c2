#pragma once

// Metrics log: one JSON object per line with the field order
//   step, epoch, lr, mu, l_reg_hphi, l_reg_qt, l_sim, l_vq_c, l_vq_m, l_vq_f,
//   l_vq, l_total, lambda, perplexity_c, perplexity_m, perplexity_f,
//   grad_norm, wall_time

#include "dissect/core/error.hpp"
#include "dissect/trainer/trainer.hpp"

#include "json.hpp"

#include <fstream>
#include <string>
#include <vector>

namespace dissect::trainer {

inline nlohmann::ordered_json to_json(const MetricsRecord& r) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["epoch"] = r.epoch;
    j["lr"] = r.lr;
    j["mu"] = r.mu;
    j["l_reg_hphi"] = r.loss.l_reg_hphi;
    j["l_reg_qt"] = r.loss.l_reg_qt;
    j["l_sim"] = r.loss.l_sim;
    j["l_vq_c"] = r.loss.l_vq_per_scale[0];
    j["l_vq_m"] = r.loss.l_vq_per_scale[1];
    j["l_vq_f"] = r.loss.l_vq_per_scale[2];
    j["l_vq"] = r.loss.l_vq;
    j["l_total"] = r.loss.l_total;
    j["lambda"] = r.loss.lambda;
    j["perplexity_c"] = r.perplexity[0];
    j["perplexity_m"] = r.perplexity[1];
    j["perplexity_f"] = r.perplexity[2];
    j["grad_norm"] = r.grad_norm;
    j["wall_time"] = r.wall_time;
    return j;
}

inline MetricsRecord metrics_from_json(const nlohmann::json& j) {
    MetricsRecord r;
    try {
        r.step = j.at("step").get<long>();
        r.epoch = j.at("epoch").get<int>();
        r.lr = j.at("lr").get<double>();
        r.mu = j.at("mu").get<double>();
        r.loss.l_reg_hphi = j.at("l_reg_hphi").get<double>();
        r.loss.l_reg_qt = j.at("l_reg_qt").get<double>();
        r.loss.l_sim = j.at("l_sim").get<double>();
        r.loss.l_vq_per_scale = {j.at("l_vq_c").get<double>(), j.at("l_vq_m").get<double>(),
                                 j.at("l_vq_f").get<double>()};
        r.loss.l_vq = j.at("l_vq").get<double>();
        r.loss.l_total = j.at("l_total").get<double>();
        r.loss.lambda = j.at("lambda").get<double>();
        r.perplexity = {j.at("perplexity_c").get<double>(), j.at("perplexity_m").get<double>(),
                        j.at("perplexity_f").get<double>()};
        r.grad_norm = j.at("grad_norm").get<double>();
        r.wall_time = j.at("wall_time").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed metrics record: ") + e.what());
    }
    return r;
}

// The record as a line without wall_time, for run-to-run comparisons.
inline std::string deterministic_line(const MetricsRecord& r) {
    auto j = to_json(r);
    j.erase("wall_time");
    return j.dump();
}

inline std::vector<MetricsRecord> read_metrics(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open metrics log '" + path + "'");
    std::vector<MetricsRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(metrics_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::parse_error& e) {
            throw IoError(std::string("malformed metrics line: ") + e.what());
        }
    }
    return out;
}

}  // namespace dissect::trainer
