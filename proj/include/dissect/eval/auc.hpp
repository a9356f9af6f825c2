#pragma once

#include "dissect/core/error.hpp"
#include "dissect/core/types.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

namespace dissect::eval {

// Mann-Whitney AUC: P(score+ > score-) + P(tie)/2, via average ranks.
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ShapeError("auc: scores and labels differ in length");
    const std::size_t n = scores.size();
    std::size_t pos = 0;
    for (int l : labels) pos += l != 0;
    const std::size_t neg = n - pos;
    if (pos == 0 || neg == 0) throw SingleClassError("auc needs both classes present");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k)
            if (labels[order[k]] != 0) rank_sum += avg_rank;
        i = j + 1;
    }
    const double p = static_cast<double>(pos);
    const double u = rank_sum - p * (p + 1.0) / 2.0;
    return u / (p * static_cast<double>(neg));
}

// Mean AUC over label columns. scores: outputs x samples; labels[s][k].
template <typename T, std::size_t K>
double mean_auc(const Mat<T>& scores, const std::vector<std::array<int, K>>& labels) {
    if (scores.rows() != static_cast<Index>(K) || scores.cols() != static_cast<Index>(labels.size()))
        throw ShapeError("mean_auc: score matrix shape does not match labels");
    double total = 0;
    for (std::size_t k = 0; k < K; ++k) {
        std::vector<double> s(labels.size());
        std::vector<int> l(labels.size());
        for (std::size_t i = 0; i < labels.size(); ++i) {
            s[i] = static_cast<double>(scores(static_cast<Index>(k), static_cast<Index>(i)));
            l[i] = labels[i][k];
        }
        total += auc(s, l);
    }
    return total / static_cast<double>(K);
}

}  // namespace dissect::eval
