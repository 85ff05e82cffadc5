// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "elastic/errors.hpp"
#include "elastic/tensor.hpp"

namespace elastic {

struct OptimizerSettings {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    long warmup_steps = 0;

    void validate() const {
        if (!(lr > 0)) throw ConfigError("optimizer.lr must be positive");
        if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
            throw ConfigError("optimizer betas must lie in [0, 1)");
        if (!(eps > 0)) throw ConfigError("optimizer.eps must be positive");
        if (weight_decay < 0) throw ConfigError("optimizer.weight_decay must be non-negative");
        if (warmup_steps < 0) throw ConfigError("optimizer.warmup_steps must be non-negative");
    }
};

/// Linear warm-up from 0 to `base` over `warmup` steps, then cosine decay
/// to 0 at `total`. `step` counts from 0.
inline double cosine_lr(double base, long step, long warmup, long total) {
    if (total <= 0) return base;
    if (step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const long span = std::max(1L, total - warmup);
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(span));
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Adam with decoupled weight decay over a fixed list of tensors.
template <typename T>
class AdamW {
   public:
    AdamW(std::vector<Tensor<T>*> params, OptimizerSettings s) : params_(std::move(params)), s_(s) {
        s_.validate();
        for (auto* p : params_) {
            m_.emplace_back(p->size(), T{0});
            v_.emplace_back(p->size(), T{0});
        }
    }

    long steps() const { return t_; }

    /// One update at learning rate `lr` from the tensors' accumulated grads.
    void step(double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(s_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(s_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto* p = params_[i];
            auto data = p->data();
            auto grad = p->grad();
            if (grad.size() != data.size()) continue;
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < data.size(); ++j) {
                const double g = static_cast<double>(grad[j]);
                m[j] = static_cast<T>(s_.beta1 * m[j] + (1 - s_.beta1) * g);
                v[j] = static_cast<T>(s_.beta2 * v[j] + (1 - s_.beta2) * g * g);
                const double mh = m[j] / c1, vh = v[j] / c2;
                double w = static_cast<double>(data[j]);
                w -= lr * (mh / (std::sqrt(vh) + s_.eps) + s_.weight_decay * w);
                data[j] = static_cast<T>(w);
            }
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

   private:
    std::vector<Tensor<T>*> params_;
    OptimizerSettings s_;
    std::vector<std::vector<T>> m_, v_;
    long t_ = 0;
};

/// Throws NumericalError when `loss` is not finite.
inline void require_finite(double loss, const std::string& where) {
    if (!std::isfinite(loss)) throw NumericalError(where + ": non-finite loss " + std::to_string(loss));
}

}  // namespace elastic
