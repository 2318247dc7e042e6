#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "efnet/common.hpp"
#include "efnet/tensor.hpp"

namespace efnet {

// Decoupled-decay AdamW: theta <- theta - lr * (mhat/(sqrt(vhat)+eps) + wd*theta).
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, T lr, T weight_decay, T beta1 = T(0.9),
        T beta2 = T(0.999), T eps = T(1e-8))
      : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto& p : params_) {
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  void step() {
    ++t_;
    const T bc1 = T(1) - std::pow(b1_, T(t_));
    const T bc2 = T(1) - std::pow(b2_, T(t_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      auto& p = params_[pi];
      const auto& g = p.grad();
      for (std::size_t i = 0; i < p.numel(); ++i) {
        m_[pi][i] = b1_ * m_[pi][i] + (T(1) - b1_) * g[i];
        v_[pi][i] = b2_ * v_[pi][i] + (T(1) - b2_) * g[i] * g[i];
        const T mhat = m_[pi][i] / bc1;
        const T vhat = v_[pi][i] / bc2;
        p[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p[i]);
      }
    }
  }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  T lr_, wd_, b1_, b2_, eps_;
  std::size_t t_ = 0;
};

template <typename T>
class Sgd {
 public:
  Sgd(std::vector<Tensor<T>> params, T lr, T weight_decay)
      : params_(std::move(params)), lr_(lr), wd_(weight_decay) {}

  void step() {
    for (auto& p : params_) {
      const auto& g = p.grad();
      for (std::size_t i = 0; i < p.numel(); ++i) p[i] -= lr_ * (g[i] + wd_ * p[i]);
    }
  }

 private:
  std::vector<Tensor<T>> params_;
  T lr_, wd_;
};

}  // namespace efnet
