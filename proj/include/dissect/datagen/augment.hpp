#pragma once

#include "dissect/core/error.hpp"
#include "dissect/core/rng.hpp"
#include "dissect/datagen/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace dissect::datagen {

struct AugmentConfig {
    double crop_scale_min = 0.6;
    double crop_scale_max = 1.0;
    double flip_prob = 0.5;
    double blur_sigma_min = 0.1;
    double blur_sigma_max = 1.0;
    double blur_prob = 0.5;
    double normalize_mean = 0.35;
    double normalize_std = 0.2;

    void validate() const {
        if (!(crop_scale_min > 0.0) || crop_scale_max > 1.0 || crop_scale_max < crop_scale_min)
            throw ConfigError("crop_scale_range must lie within (0, 1]");
        if (flip_prob < 0.0 || flip_prob > 1.0) throw ConfigError("flip_prob must lie in [0, 1]");
        if (blur_prob < 0.0 || blur_prob > 1.0) throw ConfigError("blur_prob must lie in [0, 1]");
        if (blur_sigma_min <= 0.0 || blur_sigma_max < blur_sigma_min)
            throw ConfigError("blur_sigma_range must be a positive interval");
        if (!(normalize_std > 0.0)) throw ConfigError("normalize_std must be > 0");
    }
};

struct AugmentedPair {
    Image x1;
    Image x2;
};

// Index reflection without edge repeat: ... 2 1 | 0 1 2 ... n-1 | n-2 ...
inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

inline std::vector<double> gaussian_kernel(double sigma) {
    const int half = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * half + 1);
    double total = 0;
    for (int i = -half; i <= half; ++i) {
        k[i + half] = std::exp(-(i * i) / (2.0 * sigma * sigma));
        total += k[i + half];
    }
    for (double& v : k) v /= total;
    return k;
}

// Separable Gaussian blur with reflect padding.
inline Image gaussian_blur(const Image& in, double sigma) {
    const auto k = gaussian_kernel(sigma);
    const int half = static_cast<int>(k.size() / 2);
    Image tmp(in.rows, in.cols);
    for (int r = 0; r < in.rows; ++r) {
        for (int c = 0; c < in.cols; ++c) {
            double acc = 0;
            for (int t = -half; t <= half; ++t) acc += k[t + half] * in.at(r, reflect_index(c + t, in.cols));
            tmp.at(r, c) = static_cast<float>(acc);
        }
    }
    Image out(in.rows, in.cols);
    for (int r = 0; r < in.rows; ++r) {
        for (int c = 0; c < in.cols; ++c) {
            double acc = 0;
            for (int t = -half; t <= half; ++t) acc += k[t + half] * tmp.at(reflect_index(r + t, in.rows), c);
            out.at(r, c) = static_cast<float>(acc);
        }
    }
    return out;
}

inline Image horizontal_flip(const Image& in) {
    Image out(in.rows, in.cols);
    for (int r = 0; r < in.rows; ++r)
        for (int c = 0; c < in.cols; ++c) out.at(r, c) = in.at(r, in.cols - 1 - c);
    return out;
}

// Bilinear resample of the square box [top, top+side) x [left, left+side)
// back to the full image size. A full-image box reproduces the input exactly.
inline Image crop_resize(const Image& in, double top, double left, double side) {
    Image out(in.rows, in.cols);
    const double sy = side / in.rows;
    const double sx = side / in.cols;
    for (int r = 0; r < in.rows; ++r) {
        const double y = std::clamp(top + (r + 0.5) * sy - 0.5, 0.0, in.rows - 1.0);
        const int y0 = static_cast<int>(std::floor(y));
        const int y1 = std::min(y0 + 1, in.rows - 1);
        const double fy = y - y0;
        for (int c = 0; c < in.cols; ++c) {
            const double x = std::clamp(left + (c + 0.5) * sx - 0.5, 0.0, in.cols - 1.0);
            const int x0 = static_cast<int>(std::floor(x));
            const int x1 = std::min(x0 + 1, in.cols - 1);
            const double fx = x - x0;
            const double top_row = (1 - fx) * in.at(y0, x0) + fx * in.at(y0, x1);
            const double bottom_row = (1 - fx) * in.at(y1, x0) + fx * in.at(y1, x1);
            out.at(r, c) = static_cast<float>((1 - fy) * top_row + fy * bottom_row);
        }
    }
    return out;
}

inline Image normalize(const Image& in, double mean, double std) {
    Image out = in;
    for (float& v : out.pixels) v = static_cast<float>((v - mean) / std);
    return out;
}

// Crop, flip and blur only; values stay inside the input range.
inline Image augment_view_unnormalized(const Image& image, const AugmentConfig& cfg, Rng& rng) {
    const double area = uniform(rng, cfg.crop_scale_min, cfg.crop_scale_max);
    const double side = std::sqrt(area) * image.rows;
    const double top = uniform(rng, 0.0, image.rows - side);
    const double left = uniform(rng, 0.0, image.cols - side);
    const bool flip = bernoulli(rng, cfg.flip_prob);
    const bool blur = bernoulli(rng, cfg.blur_prob);
    const double sigma = uniform(rng, cfg.blur_sigma_min, cfg.blur_sigma_max);

    Image view = crop_resize(image, top, left, side);
    if (flip) view = horizontal_flip(view);
    if (blur) view = gaussian_blur(view, sigma);
    return view;
}

inline Image augment_view(const Image& image, const AugmentConfig& cfg, Rng& rng) {
    return normalize(augment_view_unnormalized(image, cfg, rng), cfg.normalize_mean, cfg.normalize_std);
}

inline AugmentedPair make_pair(const Image& image, const AugmentConfig& cfg, Rng& rng) {
    cfg.validate();
    AugmentedPair pair;
    pair.x1 = augment_view(image, cfg, rng);
    pair.x2 = augment_view(image, cfg, rng);
    return pair;
}

}  // namespace dissect::datagen
