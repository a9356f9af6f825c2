#pragma once

// LARS and plain momentum SGD over ParamStores. Bias and normalization
// parameters skip weight decay and trust scaling.

#include "dissect/core/error.hpp"
#include "dissect/core/param_store.hpp"

#include <cmath>
#include <functional>
#include <string>

namespace dissect::trainer {

struct LarsOptions {
    double lr = 0.3;
    double weight_decay = 1.5e-6;
    double momentum = 0.99;
    double trust_coefficient = 1.0;
    double eps = 1e-9;
};

// Returns the trust ratio used for this update.
template <typename T>
double lars_update(Mat<T>& param, const Mat<T>& grad, Mat<T>& velocity, ParamKind kind, const LarsOptions& o) {
    if (param.rows() != grad.rows() || param.cols() != grad.cols() || velocity.rows() != param.rows() ||
        velocity.cols() != param.cols())
        throw ShapeError("lars_update: shape mismatch");
    if (!grad.allFinite()) throw NonFiniteError("lars_update: non-finite gradient");
    const bool exempt = kind != ParamKind::weight;
    double eta = 1.0;
    double wd = 0.0;
    if (!exempt) {
        wd = o.weight_decay;
        const double pn = static_cast<double>(param.norm());
        const double gn = static_cast<double>(grad.norm());
        if (pn > 0.0) eta = o.trust_coefficient * pn / (gn + wd * pn + o.eps);
    }
    const T step = static_cast<T>(eta * o.lr);
    velocity = static_cast<T>(o.momentum) * velocity + step * (grad + static_cast<T>(wd) * param);
    param -= velocity;
    if (!param.allFinite()) throw NonFiniteError("lars_update: parameter became non-finite");
    return eta;
}

template <typename T>
void sgd_update(Mat<T>& param, const Mat<T>& grad, Mat<T>& velocity, ParamKind kind, const LarsOptions& o) {
    if (!grad.allFinite()) throw NonFiniteError("sgd_update: non-finite gradient");
    const T wd = kind == ParamKind::weight ? static_cast<T>(o.weight_decay) : T(0);
    velocity = static_cast<T>(o.momentum) * velocity + static_cast<T>(o.lr) * (grad + wd * param);
    param -= velocity;
    if (!param.allFinite()) throw NonFiniteError("sgd_update: parameter became non-finite");
}

// Applies one update to every parameter for which trainable(name) holds.
template <typename T>
void optimizer_step(ParamStore<T>& params, const ParamStore<T>& grads, ParamStore<T>& velocity, bool lars,
                    const LarsOptions& o, const std::function<bool(const std::string&)>& trainable = {}) {
    params.require_congruent(grads);
    params.require_congruent(velocity);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params.at(i);
        if (trainable && !trainable(p.name)) continue;
        if (!grads.at(i).value.allFinite())
            throw NonFiniteError("non-finite gradient for '" + p.name + "'");
        if (lars) lars_update(p.value, grads.at(i).value, velocity.at(i).value, p.kind, o);
        else sgd_update(p.value, grads.at(i).value, velocity.at(i).value, p.kind, o);
    }
}

}  // namespace dissect::trainer
