#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "preprl/layers.hpp"

namespace preprl {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double l2 = 1e-3;  // added to gradients of weights, never of biases
};

// Adam with the L2 penalty folded into the gradient (g + l2 * w).
template <typename T>
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  long step_count() const { return step_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }

  void step(std::span<Param<T>* const> params) {
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
      }
    }
    if (m_.size() != params.size()) {
      throw ShapeError("adam: parameter list changed between steps");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto* p = params[i];
      if (p->grad.shape() != p->value.shape() ||
          m_[i].shape() != p->value.shape()) {
        throw ShapeError("adam: gradient of '" + p->name + "' " +
                         shape_str(p->grad.shape()) + " vs parameter " +
                         shape_str(p->value.shape()));
      }
      if (p->trainable() && !p->grad.all_finite()) {
        throw NumericError("adam: non-finite gradient in '" + p->name +
                           "' at step " + std::to_string(step_ + 1));
      }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto* p = params[i];
      if (!p->trainable()) continue;
      const bool decay = p->role == ParamRole::weight && cfg_.l2 != 0.0;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < p->value.size(); ++j) {
        double g = p->grad[j];
        if (decay) g += cfg_.l2 * p->value[j];
        const double mj = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
        const double vj = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        const double mhat = mj / bc1;
        const double vhat = vj / bc2;
        p->value[j] -= static_cast<T>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

  void step(std::vector<Param<T>*> params) {
    step(std::span<Param<T>* const>(params));
  }

 private:
  AdamConfig cfg_;
  long step_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace preprl
