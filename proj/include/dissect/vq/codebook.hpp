#pragma once

// Per-scale discrete bottleneck: 1x1 projection to codeword space,
// nearest-codeword assignment, commitment loss and EMA codebook updates.
//
// Tokens are stored column-wise: a d x P matrix whose column p is the token
// at spatial position p (row-major over the map, batch-major across samples).

#include "dissect/core/error.hpp"
#include "dissect/core/rng.hpp"
#include "dissect/core/types.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace dissect::vq {

enum class EmaMode { literal, count_weighted };

inline const char* to_string(EmaMode m) { return m == EmaMode::literal ? "literal" : "count_weighted"; }

inline EmaMode parse_ema_mode(const std::string& s) {
    if (s == "literal") return EmaMode::literal;
    if (s == "count_weighted") return EmaMode::count_weighted;
    throw ConfigError("unknown vq mode '" + s + "' (expected literal|count_weighted)");
}

template <typename T>
struct Codebook {
    Mat<T> entries;   // d x N; column n is codeword n
    Vec<T> ema_count; // N
    Mat<T> ema_sum;   // d x N
    T decay = static_cast<T>(0.99);
    T epsilon = static_cast<T>(1e-5);
    EmaMode mode = EmaMode::literal;

    Index size() const { return entries.cols(); }
    Index dim() const { return entries.rows(); }

    void validate() const {
        if (size() < 2) throw ConfigError("codebook needs at least 2 entries");
        if (!(decay >= T(0) && decay < T(1))) throw ConfigError("codebook decay must lie in [0, 1)");
        if (!entries.allFinite()) throw NonFiniteError("codebook entries are not finite");
    }

    // Gaussian entries scaled by 1/sqrt(d).
    static Codebook init(Index entries_count, Index dim, std::uint64_t seed, T decay = static_cast<T>(0.99),
                         EmaMode mode = EmaMode::literal, T epsilon = static_cast<T>(1e-5)) {
        Codebook cb;
        cb.entries.resize(dim, entries_count);
        Rng rng = make_rng(derive_seed(seed, 0x7671));
        const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
        for (Index i = 0; i < cb.entries.size(); ++i) cb.entries.data()[i] = static_cast<T>(normal(rng) * scale);
        cb.ema_count = Vec<T>::Ones(entries_count);
        cb.ema_sum = cb.entries;
        cb.decay = decay;
        cb.epsilon = epsilon;
        cb.mode = mode;
        cb.validate();
        return cb;
    }
};

template <typename T>
struct QuantizeResult {
    Mat<T> tokens;                // d x P
    std::vector<Index> indices;   // P
    Mat<T> quantized;             // d x P, quantized.col(p) == entries.col(indices[p])
    T commit_loss = 0;
    double perplexity = 1.0;
};

// 1x1 convolution: projection is d x c, features are c x P.
template <typename T>
Mat<T> project_tokens(const FeatureMap<T>& z, const Mat<T>& projection) {
    if (projection.cols() != z.channels)
        throw ShapeError("project_tokens: projection expects " + std::to_string(projection.cols()) +
                         " channels, map has " + std::to_string(z.channels));
    return projection * z.data;
}

namespace detail {

template <typename T>
T squared_distance(const T* a, const T* b, Index d) {
    T s = 0;
    for (Index k = 0; k < d; ++k) {
        const T diff = a[k] - b[k];
        s += diff * diff;
    }
    return s;
}

}  // namespace detail

// indices[p] = argmin_n ||tokens[p] - entries[n]||^2, ties to the lowest n.
// A GEMM-expanded distance prefilters the candidates; the winner is decided
// on the directly summed squared distance so near ties resolve exactly.
template <typename T>
std::vector<Index> assign(const Mat<T>& tokens, const Codebook<T>& cb) {
    if (tokens.rows() != cb.dim())
        throw ShapeError("assign: token dim " + std::to_string(tokens.rows()) + " != codeword dim " +
                         std::to_string(cb.dim()));
    const Index n_codes = cb.size();
    const Index d = cb.dim();
    const Index total = tokens.cols();
    std::vector<Index> indices(static_cast<std::size_t>(total));
    const Vec<T> code_norms = cb.entries.colwise().squaredNorm().transpose();
    const T max_code_norm = std::sqrt(code_norms.maxCoeff());
    const T unit = std::numeric_limits<T>::epsilon();

    constexpr Index kBlock = 2048;
    Mat<T> scores;
    for (Index start = 0; start < total; start += kBlock) {
        const Index len = std::min(kBlock, total - start);
        scores.noalias() = cb.entries.transpose() * tokens.middleCols(start, len);
        for (Index j = 0; j < len; ++j) {
            const Index p = start + j;
            T best_approx = std::numeric_limits<T>::infinity();
            for (Index n = 0; n < n_codes; ++n) {
                const T s = code_norms(n) - T(2) * scores(n, j);
                if (s < best_approx) best_approx = s;
            }
            const T token_norm = tokens.col(p).norm();
            const T band = T(8) * static_cast<T>(d + 2) * unit *
                           (max_code_norm * max_code_norm + T(2) * max_code_norm * token_norm + token_norm * token_norm);
            Index best = -1;
            T best_exact = std::numeric_limits<T>::infinity();
            const T* t = tokens.col(p).data();
            for (Index n = 0; n < n_codes; ++n) {
                if (code_norms(n) - T(2) * scores(n, j) > best_approx + band) continue;
                const T dist = detail::squared_distance(t, cb.entries.col(n).data(), d);
                if (dist < best_exact) {
                    best_exact = dist;
                    best = n;
                }
            }
            indices[static_cast<std::size_t>(p)] = best;
        }
    }
    return indices;
}

// exp(entropy) of the empirical assignment distribution.
inline double perplexity(const std::vector<Index>& indices, Index n_codes) {
    if (indices.empty()) throw PreconditionError("perplexity of an empty assignment");
    std::vector<double> counts(static_cast<std::size_t>(n_codes), 0.0);
    for (Index i : indices) {
        if (i < 0 || i >= n_codes) throw ShapeError("assignment index out of range");
        counts[static_cast<std::size_t>(i)] += 1.0;
    }
    const double total = static_cast<double>(indices.size());
    double entropy = 0;
    for (double c : counts) {
        if (c <= 0) continue;
        const double q = c / total;
        entropy -= q * std::log(q);
    }
    return std::exp(entropy);
}

// commit_loss = beta * mean_p ||tokens[p] - sg[quantized[p]]||^2
template <typename T>
QuantizeResult<T> quantize(const Mat<T>& tokens, const Codebook<T>& cb, T beta) {
    QuantizeResult<T> r;
    r.indices = assign(tokens, cb);
    r.quantized.resize(tokens.rows(), tokens.cols());
    for (Index p = 0; p < tokens.cols(); ++p) r.quantized.col(p) = cb.entries.col(r.indices[static_cast<std::size_t>(p)]);
    const T count = static_cast<T>(std::max<Index>(tokens.cols(), 1));
    r.commit_loss = beta * (tokens - r.quantized).squaredNorm() / count;
    r.perplexity = tokens.cols() > 0 ? perplexity(r.indices, cb.size()) : 1.0;
    r.tokens = tokens;
    return r;
}

// d commit_loss / d tokens = 2 beta (tokens - quantized) / P. The codebook
// receives no gradient.
template <typename T>
Mat<T> commit_loss_grad(const QuantizeResult<T>& q, T beta) {
    const T count = static_cast<T>(std::max<Index>(q.tokens.cols(), 1));
    return (T(2) * beta / count) * (q.tokens - q.quantized);
}

// Per-codeword assignment counts and token sums for one step; shards reduce
// these before a single ema_update.
template <typename T>
struct AssignmentStats {
    Vec<T> counts;  // N
    Mat<T> sums;    // d x N

    AssignmentStats(Index dim, Index n_codes) : counts(Vec<T>::Zero(n_codes)), sums(Mat<T>::Zero(dim, n_codes)) {}

    void accumulate(const Mat<T>& tokens, const std::vector<Index>& indices) {
        for (Index p = 0; p < tokens.cols(); ++p) {
            const Index n = indices[static_cast<std::size_t>(p)];
            counts(n) += T(1);
            sums.col(n) += tokens.col(p);
        }
    }
};

template <typename T>
void ema_update(Codebook<T>& cb, const AssignmentStats<T>& stats) {
    const T m = cb.decay;
    cb.ema_count = m * cb.ema_count + (T(1) - m) * stats.counts;
    cb.ema_sum = m * cb.ema_sum + (T(1) - m) * stats.sums;
    if (cb.mode == EmaMode::literal) {
        for (Index n = 0; n < cb.size(); ++n) {
            if (stats.counts(n) <= T(0)) continue;
            const Vec<T> mean = stats.sums.col(n) / stats.counts(n);
            cb.entries.col(n) = m * cb.entries.col(n) + (T(1) - m) * mean;
        }
    } else {
        const T total = cb.ema_count.sum();
        const T n_codes = static_cast<T>(cb.size());
        for (Index n = 0; n < cb.size(); ++n) {
            // Laplace smoothing keeps rarely used codewords finite.
            const T smoothed = (cb.ema_count(n) + cb.epsilon) / (T(1) + n_codes * cb.epsilon / total);
            cb.entries.col(n) = cb.ema_sum.col(n) / smoothed;
        }
    }
}

template <typename T>
void ema_update(Codebook<T>& cb, const Mat<T>& tokens, const std::vector<Index>& indices) {
    AssignmentStats<T> stats(cb.dim(), cb.size());
    stats.accumulate(tokens, indices);
    ema_update(cb, stats);
}

// Reseeds codewords whose EMA count fell below min_count with random tokens.
// Returns the number of codewords replaced.
template <typename T>
Index reinit_dead_codes(Codebook<T>& cb, const Mat<T>& tokens, Rng& rng, T min_count = T(1)) {
    if (tokens.cols() == 0) return 0;
    Index replaced = 0;
    for (Index n = 0; n < cb.size(); ++n) {
        if (cb.ema_count(n) >= min_count) continue;
        const Index p = uniform_int(rng, 0, static_cast<long>(tokens.cols() - 1));
        cb.entries.col(n) = tokens.col(p);
        cb.ema_sum.col(n) = tokens.col(p);
        cb.ema_count(n) = T(1);
        ++replaced;
    }
    return replaced;
}

}  // namespace dissect::vq
