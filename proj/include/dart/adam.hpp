#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dart/tape.hpp"
#include "dart/tensor.hpp"

namespace dart {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

// Bias-corrected Adam with decoupled weight decay. Moments are kept in the
// parameter dtype; step order follows ParamSet registration order, so two
// runs with identical grads stay bit-identical.
template <typename T>
class Adam {
 public:
  Adam(ParamSet<T>& params, AdamConfig cfg) : params_(&params), cfg_(cfg) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (auto* p : params) {
      m_.push_back(Tensor<T>::zeros(p->value.shape));
      v_.push_back(Tensor<T>::zeros(p->value.shape));
    }
  }

  // Global-norm clip over every registered grad; returns the pre-clip norm.
  double clip_grad_norm(double max_norm) {
    double sq = 0.0;
    for (auto* p : *params_)
      for (auto g : p->grad.data) sq += static_cast<double>(g) * static_cast<double>(g);
    if (!std::isfinite(sq)) throw NumericError("gradient norm is non-finite");
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
      const T s = static_cast<T>(max_norm / norm);
      for (auto* p : *params_)
        for (auto& g : p->grad.data) g *= s;
    }
    return norm;
  }

  // Clip, update every parameter, advance t, zero grads.
  double step() {
    const double norm = clip_grad_norm(cfg_.clip_norm);
    ++t_;
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T corr1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
    const T corr2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
    const T lr = static_cast<T>(cfg_.lr), eps = static_cast<T>(cfg_.eps);
    const T wd = static_cast<T>(cfg_.weight_decay);
    for (std::size_t i = 0; i < params_->size(); ++i) {
      Param<T>& p = (*params_)[i];
      Tensor<T>& m = m_[i];
      Tensor<T>& v = v_[i];
      require_same_shape("adam_step", p.value, p.grad);
      const T plr = lr * static_cast<T>(p.lr_scale);
      for (std::int64_t j = 0; j < p.value.size(); ++j) {
        const T g = p.grad[j];
        m[j] = b1 * m[j] + (T{1} - b1) * g;
        v[j] = b2 * v[j] + (T{1} - b2) * g * g;
        const T mhat = m[j] / corr1;
        const T vhat = v[j] / corr2;
        p.value[j] -= plr * (mhat / (std::sqrt(vhat) + eps) + wd * p.value[j]);
      }
      if (!p.value.all_finite()) throw NumericError("non-finite parameter after adam step: " + p.name);
    }
    params_->zero_grad();
    return norm;
  }

  std::int64_t t() const { return t_; }
  void set_t(std::int64_t t) { t_ = t; }
  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  std::size_t slots() const { return m_.size(); }
  Tensor<T>& moment1(std::size_t i) { return m_[i]; }
  Tensor<T>& moment2(std::size_t i) { return v_[i]; }

 private:
  ParamSet<T>* params_;
  AdamConfig cfg_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  std::int64_t t_ = 0;
};

}  // namespace dart
