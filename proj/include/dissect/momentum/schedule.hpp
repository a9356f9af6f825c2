#pragma once

#include "dissect/core/error.hpp"
#include "dissect/core/param_store.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace dissect::momentum {

struct MomentumSchedule {
    double mu_base = 0.996;
    double mu_final = 1.0;
    long total_steps = 1;
};

struct LrSchedule {
    double base_lr = 0.3;
    double warmup_epochs = 10;
    double total_epochs = 50;
    double floor_lr = 0.0;
};

// Cosine ramp from mu_base at step 0 to mu_final at total_steps.
inline double mu_at(const MomentumSchedule& s, long step) {
    if (s.total_steps <= 0) return s.mu_base;
    const double t = std::clamp(static_cast<double>(step) / static_cast<double>(s.total_steps), 0.0, 1.0);
    return s.mu_final - (s.mu_final - s.mu_base) * (std::cos(std::numbers::pi * t) + 1.0) / 2.0;
}

// Linear warmup to base_lr, then cosine decay to floor_lr.
inline double lr_at(const LrSchedule& s, double epoch) {
    epoch = std::clamp(epoch, 0.0, s.total_epochs);
    if (s.warmup_epochs > 0 && epoch < s.warmup_epochs) return s.base_lr * epoch / s.warmup_epochs;
    const double span = s.total_epochs - s.warmup_epochs;
    if (span <= 0) return s.base_lr;
    const double progress = (epoch - s.warmup_epochs) / span;
    return s.floor_lr + (s.base_lr - s.floor_lr) * (std::cos(std::numbers::pi * progress) + 1.0) / 2.0;
}

// phi <- mu * phi + (1 - mu) * theta for every array.
template <typename T>
void momentum_update(const ParamStore<T>& theta, ParamStore<T>& phi, double mu) {
    if (!theta.congruent(phi)) throw ShapeError("momentum update: parameter stores are not congruent");
    if (mu == 1.0) return;
    const T m = static_cast<T>(mu);
    for (std::size_t i = 0; i < phi.size(); ++i) {
        auto& dst = phi.at(i).value;
        const auto& src = theta.at(i).value;
        if (mu == 0.0) dst = src;
        else dst = m * dst + (T(1) - m) * src;
    }
}

}  // namespace dissect::momentum
