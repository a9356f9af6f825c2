#pragma once

#include "dissect/core/param_store.hpp"
#include "dissect/core/rng.hpp"
#include "dissect/core/types.hpp"
#include "dissect/trainer/config.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>

namespace tu {
using namespace dissect;

inline constexpr double kFdStep = 1e-5;
inline constexpr double kFdTol = 1e-4;

inline double rel_err(double a, double b) {
    const double scale = std::max({std::abs(a), std::abs(b), 1e-6});
    return std::abs(a - b) / scale;
}

inline Mat<double> random_mat(Rng& rng, Index r, Index c, double scale = 1.0) {
    Mat<double> m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * normal(rng);
    return m;
}

inline Vec<double> random_vec(Rng& rng, Index n, double scale = 1.0) {
    Vec<double> v(n);
    for (Index i = 0; i < n; ++i) v(i) = scale * normal(rng);
    return v;
}

inline ParamStore<double> random_direction(const ParamStore<double>& like, Rng& rng) {
    ParamStore<double> d = like.zeros_like();
    for (auto& p : d)
        for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = normal(rng);
    const double n = std::sqrt(d.squared_norm());
    for (auto& p : d) p.value /= n;
    return d;
}

// Central difference of f along direction u at params p; u is expected to
// have unit norm so h is the actual step length.
inline double directional_fd(const ParamStore<double>& p, const ParamStore<double>& u,
                             const std::function<double(const ParamStore<double>&)>& f, double h = kFdStep) {
    ParamStore<double> plus = p, minus = p;
    plus.add_scaled(u, h);
    minus.add_scaled(u, -h);
    return (f(plus) - f(minus)) / (2.0 * h);
}

// Central difference that refuses stencils straddling a kink (a ReLU
// switching inside [-h, h]): the two one-sided slopes must agree to within
// kKinkTol of the slope scale, otherwise nullopt.
inline constexpr double kKinkTol = 1e-2;

inline std::optional<double> smooth_directional_fd(const ParamStore<double>& p, const ParamStore<double>& u,
                                                   const std::function<double(const ParamStore<double>&)>& f,
                                                   double h = kFdStep) {
    ParamStore<double> plus = p, minus = p;
    plus.add_scaled(u, h);
    minus.add_scaled(u, -h);
    const double f0 = f(p), fp = f(plus), fm = f(minus);
    const double fwd = (fp - f0) / h, bwd = (f0 - fm) / h;
    const double central = (fp - fm) / (2.0 * h);
    if (std::abs(fwd - bwd) > kKinkTol * std::max({std::abs(fwd), std::abs(bwd), 1e-6})) return std::nullopt;
    return central;
}

// Small float64 model used by the gradient checks: embed dim 8, 16x16 input.
inline trainer::Config toy_config() {
    trainer::Config c;
    c.encoder.input_size = 16;
    c.encoder.stage_channels = {4, 8, 8};
    c.encoder.norm_groups = 2;
    c.encoder.embed_dim = 8;
    c.encoder.proj_hidden = 8;
    c.encoder.proj_out = 8;
    c.vq.entries = {6, 6, 6};
    c.data_num = 48;
    c.train.batch_size = 8;
    c.train.epochs = 2;
    c.train.warmup_epochs = 1;
    c.probe.position_images = 30;
    c.validate();
    return c;
}

inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("dissect_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace tu
