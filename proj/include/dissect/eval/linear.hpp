#pragma once

// Linear heads on frozen features, fit by full-batch accelerated gradient
// descent on an L2-regularized convex loss. The step size is 1/L with L the
// smoothness constant computed from the feature spectrum.

#include "dissect/core/error.hpp"
#include "dissect/core/types.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <vector>

namespace dissect::eval {

using MatD = Mat<double>;
using VecD = Vec<double>;

struct Standardizer {
    VecD mean;
    VecD inv_std;

    // Statistics from the given columns of X (features x samples).
    static Standardizer fit(const MatD& x, const std::vector<std::size_t>& cols) {
        if (cols.empty()) throw PreconditionError("standardizer needs at least one sample");
        Standardizer s;
        s.mean = VecD::Zero(x.rows());
        for (std::size_t c : cols) s.mean += x.col(static_cast<Index>(c));
        s.mean /= static_cast<double>(cols.size());
        VecD var = VecD::Zero(x.rows());
        for (std::size_t c : cols) var += (x.col(static_cast<Index>(c)) - s.mean).cwiseAbs2();
        var /= static_cast<double>(cols.size());
        s.inv_std = (var.array() + 1e-8).rsqrt().matrix();
        return s;
    }

    MatD apply(const MatD& x) const { return ((x.colwise() - mean).array().colwise() * inv_std.array()).matrix(); }
};

inline MatD gather_columns(const MatD& x, const std::vector<std::size_t>& cols) {
    MatD out(x.rows(), static_cast<Index>(cols.size()));
    for (std::size_t i = 0; i < cols.size(); ++i) out.col(static_cast<Index>(i)) = x.col(static_cast<Index>(cols[i]));
    return out;
}

struct LinearHead {
    MatD weight;  // outputs x features
    VecD bias;
    int iterations = 0;
    double final_grad_norm = 0;

    MatD scores(const MatD& x) const { return (weight * x).colwise() + bias; }
};

struct FitSettings {
    double l2 = 1e-3;
    double lr = 0.0;  // 0 selects 1/L
    int max_iterations = 5000;
    double grad_tol = 1e-5;
};

// Largest eigenvalue of [x; 1][x; 1]^T / n.
inline double feature_curvature(const MatD& x) {
    MatD aug(x.rows() + 1, x.cols());
    aug.topRows(x.rows()) = x;
    aug.bottomRows(1).setOnes();
    const MatD gram = aug * aug.transpose() / static_cast<double>(x.cols());
    Eigen::SelfAdjointEigenSolver<MatD> es(gram, Eigen::EigenvaluesOnly);
    return es.eigenvalues().maxCoeff();
}

namespace detail {

// Nesterov-accelerated gradient descent with adaptive restart.
template <typename GradFn>
LinearHead accelerated_descent(Index outputs, Index features, double smoothness, const FitSettings& fs, GradFn&& grad) {
    LinearHead h;
    h.weight = MatD::Zero(outputs, features);
    h.bias = VecD::Zero(outputs);
    const double lr = fs.lr > 0 ? fs.lr : 1.0 / smoothness;
    MatD yw = h.weight, gw;
    VecD yb = h.bias, gb;
    double t = 1.0;
    for (int it = 0; it < fs.max_iterations; ++it) {
        grad(h.weight, h.bias, gw, gb);
        h.final_grad_norm = std::sqrt(gw.squaredNorm() + gb.squaredNorm());
        h.iterations = it;
        if (h.final_grad_norm < fs.grad_tol) return h;
        grad(yw, yb, gw, gb);
        const MatD next_w = yw - lr * gw;
        const VecD next_b = yb - lr * gb;
        const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        // Restart momentum when the step opposes the previous direction.
        const double dir = (next_w - h.weight).cwiseProduct(yw - next_w).sum() + (next_b - h.bias).dot(yb - next_b);
        const double mom = dir > 0 ? 0.0 : (t - 1.0) / t_next;
        yw = next_w + mom * (next_w - h.weight);
        yb = next_b + mom * (next_b - h.bias);
        h.weight = next_w;
        h.bias = next_b;
        t = dir > 0 ? 1.0 : t_next;
    }
    grad(h.weight, h.bias, gw, gb);
    h.final_grad_norm = std::sqrt(gw.squaredNorm() + gb.squaredNorm());
    h.iterations = fs.max_iterations;
    return h;
}

inline double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

}  // namespace detail

// Independent sigmoid outputs with binary cross-entropy. y: outputs x samples in {0, 1}.
inline LinearHead fit_logistic(const MatD& x, const MatD& y, const FitSettings& fs) {
    if (x.cols() != y.cols() || x.cols() == 0) throw ShapeError("fit_logistic: sample counts differ or are zero");
    const double n = static_cast<double>(x.cols());
    const double smooth = 0.25 * feature_curvature(x) + fs.l2;
    return detail::accelerated_descent(y.rows(), x.rows(), smooth, fs, [&](const MatD& w, const VecD& b, MatD& gw, VecD& gb) {
        MatD r = (w * x).colwise() + b;
        r = r.unaryExpr([](double z) { return detail::sigmoid(z); }) - y;
        gw = r * x.transpose() / n + fs.l2 * w;
        gb = r.rowwise().sum() / n;
    });
}

// Softmax over classes with cross-entropy. labels[i] in [0, classes).
inline LinearHead fit_softmax(const MatD& x, const std::vector<int>& labels, int classes, const FitSettings& fs) {
    if (x.cols() != static_cast<Index>(labels.size()) || x.cols() == 0) throw ShapeError("fit_softmax: bad sample count");
    const double n = static_cast<double>(x.cols());
    MatD onehot = MatD::Zero(classes, x.cols());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= classes) throw ShapeError("fit_softmax: label out of range");
        onehot(labels[i], static_cast<Index>(i)) = 1.0;
    }
    const double smooth = 0.5 * feature_curvature(x) + fs.l2;
    return detail::accelerated_descent(classes, x.rows(), smooth, fs, [&](const MatD& w, const VecD& b, MatD& gw, VecD& gb) {
        MatD z = (w * x).colwise() + b;
        for (Index c = 0; c < z.cols(); ++c) {
            const double top = z.col(c).maxCoeff();
            z.col(c) = (z.col(c).array() - top).exp().matrix();
            z.col(c) /= z.col(c).sum();
        }
        z -= onehot;
        gw = z * x.transpose() / n + fs.l2 * w;
        gb = z.rowwise().sum() / n;
    });
}

inline std::vector<int> argmax_columns(const MatD& scores) {
    std::vector<int> out(static_cast<std::size_t>(scores.cols()));
    for (Index c = 0; c < scores.cols(); ++c) {
        Index best = 0;
        scores.col(c).maxCoeff(&best);
        out[static_cast<std::size_t>(c)] = static_cast<int>(best);
    }
    return out;
}

}  // namespace dissect::eval
