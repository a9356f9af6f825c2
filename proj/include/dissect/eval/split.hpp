#pragma once

#include "dissect/core/error.hpp"
#include "dissect/core/rng.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

namespace dissect::eval {

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

// Fixed 80/20 split keyed only by the sample index.
inline Split split_indices(std::size_t n) {
    Split s;
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t h = derive_seed(0x73706c6974ULL, static_cast<std::uint64_t>(i));
        (h % 5 == 0 ? s.test : s.train).push_back(i);
    }
    return s;
}

inline std::size_t subset_size(std::size_t pool, double fraction) {
    const auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(pool) - 1e-9));
    return std::clamp<std::size_t>(k, 1, pool);
}

// Prefix of a seeded permutation of pool, so subsets for growing fractions
// under one seed are nested.
inline std::vector<std::size_t> label_subset(const std::vector<std::size_t>& pool, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw PreconditionError("label fraction must lie in (0, 1]");
    std::vector<std::size_t> perm = pool;
    Rng rng = make_rng(derive_seed(seed, 0x6c6162656cULL));
    for (std::size_t i = perm.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<long>(i - 1)));
        std::swap(perm[i - 1], perm[j]);
    }
    perm.resize(subset_size(pool.size(), fraction));
    return perm;
}

template <std::size_t K>
bool every_label_has_both_classes(const std::vector<std::size_t>& subset, const std::vector<std::array<int, K>>& labels) {
    for (std::size_t k = 0; k < K; ++k) {
        bool pos = false, neg = false;
        for (std::size_t i : subset) (labels[i][k] ? pos : neg) = true;
        if (!pos || !neg) return false;
    }
    return true;
}

// Subset for (fraction, seed); a subset missing a class for some label is
// redrawn with the next seed. Returns the seed actually used.
template <std::size_t K>
std::vector<std::size_t> usable_label_subset(const std::vector<std::size_t>& pool, double fraction, std::uint64_t seed,
                                             const std::vector<std::array<int, K>>& labels, std::uint64_t* used_seed = nullptr,
                                             int max_attempts = 1000) {
    for (int a = 0; a < max_attempts; ++a) {
        auto s = label_subset(pool, fraction, seed + static_cast<std::uint64_t>(a));
        if (every_label_has_both_classes(s, labels)) {
            if (used_seed) *used_seed = seed + static_cast<std::uint64_t>(a);
            return s;
        }
    }
    throw SingleClassError("no label subset with both classes for every label at fraction " + std::to_string(fraction));
}

}  // namespace dissect::eval
