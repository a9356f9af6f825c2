#pragma once

// Procedural "phantom radiograph" generator. Every image shares one
// anatomical template (body outline, two lung fields with rib arcs, spine,
// an off-centre heart) under a small per-sample pose jitter, plus zero to a
// few Gaussian-blob lesions whose quadrant gives the downstream labels.

#include "dissect/core/error.hpp"
#include "dissect/core/kv.hpp"
#include "dissect/core/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace dissect::datagen {

struct Image {
    int rows = 0;
    int cols = 0;
    std::vector<float> pixels;  // row-major

    Image() = default;
    Image(int r, int c, float fill = 0.0f) : rows(r), cols(c), pixels(static_cast<std::size_t>(r) * c, fill) {}

    float& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * cols + c]; }
    float at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * cols + c]; }

    friend bool operator==(const Image& a, const Image& b) {
        return a.rows == b.rows && a.cols == b.cols && a.pixels == b.pixels;
    }
};

struct LesionCenter {
    double row = 0;
    double col = 0;
};

enum Quadrant { top_left = 0, top_right = 1, bottom_left = 2, bottom_right = 3 };

// A center on the midline belongs to the bottom / right half.
inline int quadrant_of(const LesionCenter& c, int image_size) {
    const double half = image_size / 2.0;
    const int bottom = c.row >= half ? 1 : 0;
    const int right = c.col >= half ? 1 : 0;
    return bottom * 2 + right;
}

inline std::array<int, 4> quadrant_labels(const std::vector<LesionCenter>& centers, int image_size) {
    std::array<int, 4> labels{0, 0, 0, 0};
    for (const auto& c : centers) labels[quadrant_of(c, image_size)] = 1;
    return labels;
}

struct PhantomSpec {
    int image_size = 32;
    double anatomy_jitter = 0.1;
    int lesion_count_min = 0;
    int lesion_count_max = 3;
    double lesion_radius_min = 1.0;
    double lesion_radius_max = 2.5;
    double lesion_intensity_min = 0.3;
    double lesion_intensity_max = 0.6;
    double noise_sigma = 0.02;
    std::uint64_t seed = 0;
    // When non-empty, every sample carries exactly these lesions (radius and
    // intensity still drawn from the ranges).
    std::vector<LesionCenter> fixed_lesion_centers;

    void validate() const {
        if (image_size < 8) throw ConfigError("phantom image_size must be >= 8");
        if (anatomy_jitter < 0.0 || anatomy_jitter > 0.2) throw ConfigError("anatomy_jitter must lie in [0, 0.2]");
        if (lesion_count_min < 0 || lesion_count_max < lesion_count_min || lesion_count_max > 3)
            throw ConfigError("lesion_count_range must be an interval within [0, 3]");
        if (lesion_radius_min <= 0.0 || lesion_radius_max < lesion_radius_min)
            throw ConfigError("lesion_radius_range must be a positive interval");
        if (lesion_intensity_min < 0.0 || lesion_intensity_max > 1.0 || lesion_intensity_max < lesion_intensity_min)
            throw ConfigError("lesion_intensity_range must lie in [0, 1]");
        if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
        for (const auto& c : fixed_lesion_centers) {
            if (c.row < 0 || c.col < 0 || c.row >= image_size || c.col >= image_size)
                throw ConfigError("fixed lesion center outside the image");
        }
    }

    // Canonical text form; the corpus manifest stores its hash.
    std::string canonical() const {
        std::string s;
        s += "image_size=" + std::to_string(image_size) + "\n";
        s += "anatomy_jitter=" + format_double(anatomy_jitter) + "\n";
        s += "lesion_count=" + std::to_string(lesion_count_min) + "," + std::to_string(lesion_count_max) + "\n";
        s += "lesion_radius=" + format_double(lesion_radius_min) + "," + format_double(lesion_radius_max) + "\n";
        s += "lesion_intensity=" + format_double(lesion_intensity_min) + "," + format_double(lesion_intensity_max) + "\n";
        s += "noise_sigma=" + format_double(noise_sigma) + "\n";
        s += "seed=" + std::to_string(seed) + "\n";
        for (const auto& c : fixed_lesion_centers)
            s += "fixed_lesion=" + format_double(c.row) + "," + format_double(c.col) + "\n";
        return s;
    }

    std::uint64_t hash() const { return fnv1a64(canonical()); }
};

struct PhantomSample {
    Image image;
    std::array<int, 4> labels{0, 0, 0, 0};  // TL, TR, BL, BR
    std::vector<LesionCenter> lesion_centers;
};

namespace detail {

inline double smooth_inside(double dist, double softness) {
    // dist < 1 inside the unit ellipse; soft edge avoids hard aliasing.
    return 1.0 / (1.0 + std::exp((dist - 1.0) / softness));
}

inline double ellipse_dist(double u, double v, double cu, double cv, double ru, double rv) {
    const double du = (u - cu) / ru;
    const double dv = (v - cv) / rv;
    return std::sqrt(du * du + dv * dv);
}

// Template intensity at normalized coordinates (u across, v down).
inline double anatomy(double u, double v) {
    const double body = smooth_inside(ellipse_dist(u, v, 0.5, 0.53, 0.45, 0.52), 0.03);
    double value = 0.06 + 0.40 * body;

    const double lung_l = smooth_inside(ellipse_dist(u, v, 0.31, 0.45, 0.14, 0.28), 0.04);
    const double lung_r = smooth_inside(ellipse_dist(u, v, 0.69, 0.45, 0.14, 0.28), 0.04);
    const double lung = std::max(lung_l, lung_r);
    value -= 0.26 * lung;

    const double arc = 6.0 * v + 2.5 * (u - 0.5) * (u - 0.5);
    const double rib = std::pow(0.5 + 0.5 * std::cos(6.283185307179586 * arc), 3.0);
    value += 0.11 * rib * lung;

    const double spine = smooth_inside(std::abs(u - 0.5) / 0.035, 0.08) * body;
    value += 0.18 * spine;

    const double heart = smooth_inside(ellipse_dist(u, v, 0.58, 0.64, 0.13, 0.11), 0.06);
    value = value * (1.0 - heart) + 0.62 * heart;
    return value;
}

}  // namespace detail

inline PhantomSample generate_sample(const PhantomSpec& spec, std::uint64_t index) {
    spec.validate();
    Rng rng = make_rng(derive_seed(spec.seed, index));
    const int n = spec.image_size;
    const double j = spec.anatomy_jitter;

    const double tx = uniform(rng, -j, j) * 0.5;
    const double ty = uniform(rng, -j, j) * 0.5;
    const double scale = 1.0 + uniform(rng, -j, j);
    const double angle = uniform(rng, -j, j) * 0.5;
    const double ca = std::cos(angle);
    const double sa = std::sin(angle);

    PhantomSample sample;
    if (!spec.fixed_lesion_centers.empty()) {
        sample.lesion_centers = spec.fixed_lesion_centers;
    } else {
        const long count = uniform_int(rng, spec.lesion_count_min, spec.lesion_count_max);
        const double margin = std::min(2.0, n / 4.0);
        for (long k = 0; k < count; ++k) {
            LesionCenter c;
            c.row = uniform(rng, margin, n - margin);
            c.col = uniform(rng, margin, n - margin);
            sample.lesion_centers.push_back(c);
        }
    }
    std::vector<std::pair<double, double>> lesion_shape;  // (radius, intensity)
    for (std::size_t k = 0; k < sample.lesion_centers.size(); ++k) {
        const double r = uniform(rng, spec.lesion_radius_min, spec.lesion_radius_max);
        const double a = uniform(rng, spec.lesion_intensity_min, spec.lesion_intensity_max);
        lesion_shape.emplace_back(r, a);
    }

    sample.image = Image(n, n);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            // Inverse pose: image coordinates to template coordinates.
            const double u0 = (c + 0.5) / n - 0.5 - tx;
            const double v0 = (r + 0.5) / n - 0.5 - ty;
            const double u = (ca * u0 + sa * v0) / scale + 0.5;
            const double v = (-sa * u0 + ca * v0) / scale + 0.5;
            double value = detail::anatomy(u, v);
            for (std::size_t k = 0; k < sample.lesion_centers.size(); ++k) {
                const double dr = r + 0.5 - sample.lesion_centers[k].row;
                const double dc = c + 0.5 - sample.lesion_centers[k].col;
                const double rad = lesion_shape[k].first;
                value += lesion_shape[k].second * std::exp(-(dr * dr + dc * dc) / (2.0 * rad * rad));
            }
            if (spec.noise_sigma > 0) value += spec.noise_sigma * normal(rng);
            sample.image.at(r, c) = static_cast<float>(std::clamp(value, 0.0, 1.0));
        }
    }
    sample.labels = quadrant_labels(sample.lesion_centers, n);
    return sample;
}

}  // namespace dissect::datagen
