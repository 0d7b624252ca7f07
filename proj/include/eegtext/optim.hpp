// AdamW with decoupled weight decay, plus gradient clipping.

#pragma once

#include "eegtext/autograd.hpp"

#include <cmath>
#include <vector>

namespace eegtext {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double clip_norm = 0.0;  // 0 disables clipping
};

template <typename T>
class AdamW {
  public:
    AdamW(std::vector<Parameter<T>*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (auto* p : params_) {
            m_.emplace_back(p->value.rows, p->value.cols);
            v_.emplace_back(p->value.rows, p->value.cols);
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    /// Global L2 norm of all parameter gradients.
    double grad_norm() const {
        double acc = 0;
        for (auto* p : params_)
            for (T g : p->grad.data) acc += static_cast<double>(g) * g;
        return std::sqrt(acc);
    }

    /// Multiplies every gradient by `s` (used to average over a batch).
    void scale_grads(T s) {
        for (auto* p : params_) as_eigen(p->grad) *= s;
    }

    void step() {
        if (cfg_.clip_norm > 0) {
            const double n = grad_norm();
            if (n > cfg_.clip_norm) scale_grads(static_cast<T>(cfg_.clip_norm / n));
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i];
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t k = 0; k < p.value.size(); ++k) {
                const double g = p.grad.data[k];
                m.data[k] = static_cast<T>(cfg_.beta1 * m.data[k] + (1 - cfg_.beta1) * g);
                v.data[k] = static_cast<T>(cfg_.beta2 * v.data[k] + (1 - cfg_.beta2) * g * g);
                const double mhat = m.data[k] / bc1;
                const double vhat = v.data[k] / bc2;
                double w = p.value.data[k];
                w -= cfg_.lr * cfg_.weight_decay * w;
                w -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                p.value.data[k] = static_cast<T>(w);
            }
        }
    }

    const AdamWConfig& config() const { return cfg_; }

  private:
    std::vector<Parameter<T>*> params_;
    AdamWConfig cfg_;
    std::vector<Matrix<T>> m_;
    std::vector<Matrix<T>> v_;
    long t_ = 0;
};

}  // namespace eegtext
