#pragma once

#include "dissect/core/error.hpp"
#include "dissect/core/types.hpp"

#include <array>
#include <cmath>
#include <string>

namespace dissect::objective {

inline constexpr double kMinNorm = 1e-12;

enum class Targets { both, h_phi, q_t };

inline Targets parse_targets(const std::string& s) {
    if (s == "both") return Targets::both;
    if (s == "h_phi") return Targets::h_phi;
    if (s == "q_t") return Targets::q_t;
    throw ConfigError("unknown targets '" + s + "' (expected both|h_phi|q_t)");
}
inline const char* to_string(Targets t) {
    switch (t) {
        case Targets::both: return "both";
        case Targets::h_phi: return "h_phi";
        case Targets::q_t: return "q_t";
    }
    return "both";
}

struct LossBreakdown {
    double l_reg_hphi = 0;
    double l_reg_qt = 0;
    double l_sim = 0;
    std::array<double, 3> l_vq_per_scale{0, 0, 0};  // coarse, medium, fine
    double l_vq = 0;
    double l_total = 0;
    double lambda = 1.0;
};

template <typename Derived>
void require_norm(const Eigen::MatrixBase<Derived>& v, const char* what) {
    const double n = static_cast<double>(v.norm());
    if (!(n > kMinNorm)) throw ZeroNormError(std::string("cosine regression: ") + what + " has norm " + std::to_string(n));
}

// 2 - 2 cos(x, y)
template <typename T>
T cosine_regression(const Vec<T>& x, const Vec<T>& y) {
    if (x.size() != y.size()) throw ShapeError("cosine regression: size mismatch");
    require_norm(x, "x");
    require_norm(y, "y");
    return T(2) - T(2) * x.dot(y) / (x.norm() * y.norm());
}

// d/dx of 2 - 2 cos(x, y) = (-2/|x|) (y_hat - <x_hat, y_hat> x_hat)
template <typename T>
Vec<T> cosine_regression_grad(const Vec<T>& x, const Vec<T>& y) {
    require_norm(x, "x");
    require_norm(y, "y");
    const T nx = x.norm();
    const Vec<T> xh = x / nx;
    const Vec<T> yh = y / y.norm();
    return (T(-2) / nx) * (yh - xh.dot(yh) * xh);
}

// Mean over columns of the per-sample loss; grad (if given) receives the
// gradient of that mean with respect to x.
template <typename T>
T cosine_regression_batch(const Mat<T>& x, const Mat<T>& y, Mat<T>* grad) {
    if (x.rows() != y.rows() || x.cols() != y.cols()) throw ShapeError("cosine regression: batch shape mismatch");
    const T inv = T(1) / static_cast<T>(x.cols());
    T total = 0;
    if (grad) grad->setZero(x.rows(), x.cols());
    for (Index b = 0; b < x.cols(); ++b) {
        const Vec<T> xb = x.col(b);
        const Vec<T> yb = y.col(b);
        total += cosine_regression(xb, yb);
        if (grad) grad->col(b) = inv * cosine_regression_grad(xb, yb);
    }
    return total * inv;
}

struct SimLoss {
    double l_reg_hphi = 0;
    double l_reg_qt = 0;
    double l_sim = 0;
};

template <typename T>
SimLoss sim_loss(const Vec<T>& h_theta, const Vec<T>& h_phi, const Vec<T>& q_t, Targets targets = Targets::both) {
    SimLoss s;
    s.l_reg_hphi = static_cast<double>(cosine_regression(h_theta, h_phi));
    s.l_reg_qt = static_cast<double>(cosine_regression(h_theta, q_t));
    switch (targets) {
        case Targets::both: s.l_sim = 0.5 * (s.l_reg_hphi + s.l_reg_qt); break;
        case Targets::h_phi: s.l_sim = s.l_reg_hphi; break;
        case Targets::q_t: s.l_sim = s.l_reg_qt; break;
    }
    return s;
}

// Weights of the two regression terms inside l_sim.
inline std::array<double, 2> target_weights(Targets targets) {
    switch (targets) {
        case Targets::both: return {0.5, 0.5};
        case Targets::h_phi: return {1.0, 0.0};
        case Targets::q_t: return {0.0, 1.0};
    }
    return {0.5, 0.5};
}

inline void total_loss(LossBreakdown& lb) {
    if (!(lb.lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    lb.l_vq = lb.l_vq_per_scale[0] + lb.l_vq_per_scale[1] + lb.l_vq_per_scale[2];
    lb.l_total = lb.l_sim + lb.lambda * lb.l_vq;
}

inline LossBreakdown total_loss(double l_sim, const std::array<double, 3>& l_vq_per_scale, double lambda) {
    LossBreakdown lb;
    lb.l_sim = l_sim;
    lb.l_vq_per_scale = l_vq_per_scale;
    lb.lambda = lambda;
    total_loss(lb);
    return lb;
}

}  // namespace dissect::objective
