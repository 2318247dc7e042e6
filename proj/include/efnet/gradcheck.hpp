#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "efnet/common.hpp"
#include "efnet/tensor.hpp"

namespace efnet {

// Compares reverse-mode gradients of a scalar-valued function against central
// differences. Returns the worst relative error over every element of every
// input, with |numeric| clamped below by 1 in the denominator.
template <typename T>
T grad_check(const std::function<Tensor<T>(std::vector<Tensor<T>>&)>& fn,
             std::vector<Tensor<T>> inputs, T step = T(1e-5)) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }

  std::vector<std::vector<T>> analytic;
  {
    Graph<T> g;
    typename Graph<T>::Scope scope(g);
    Tensor<T> out = fn(inputs);
    if (out.numel() != 1) {
      throw ContractError("grad_check: function output must be scalar, got shape " +
                          shape_to_string(out.shape()));
    }
    g.backward(out);
  }
  for (auto& t : inputs) analytic.push_back(t.grad());

  T worst = T(0);
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const T keep = t[i];
      t[i] = keep + step;
      const T hi = fn(inputs).scalar();
      t[i] = keep - step;
      const T lo = fn(inputs).scalar();
      t[i] = keep;
      const T numeric = (hi - lo) / (T(2) * step);
      const T denom = std::max(T(1), std::abs(numeric));
      const T rel = std::abs(analytic[ti][i] - numeric) / denom;
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace efnet
