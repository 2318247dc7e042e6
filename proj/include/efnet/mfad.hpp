#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "efnet/common.hpp"
#include "efnet/tensor.hpp"

namespace efnet {

// One learnable anchor vector per semantic class.
template <typename T>
struct ClassTokens {
  Tensor<T> tokens;  // [K x C_f]
};

template <typename T>
struct SegPrediction {
  Tensor<T> probs;      // [K x H' x W'] at decoder resolution
  Tensor<T> distances;  // [K x H' x W']
  Tensor<T> probs_full;  // [K x H x W] when upsampled for metrics; else empty
};

// X_f: channel concatenation of all stage maps bilinearly upsampled to the
// first map's resolution (H/4 x W/4).
template <typename T>
Tensor<T> aggregate_multiscale(const std::vector<Tensor<T>>& stage_maps) {
  if (stage_maps.size() != 4) {
    throw ContractError("aggregate_multiscale: expected 4 stage maps, got " +
                        std::to_string(stage_maps.size()));
  }
  for (const auto& f : stage_maps) detail::require_ndim(f, 3, "aggregate_multiscale");
  const std::size_t h = stage_maps[0].extent(1), w = stage_maps[0].extent(2);
  std::vector<Tensor<T>> parts;
  std::size_t cf = 0;
  for (const auto& f : stage_maps) {
    if (f.extent(1) > h || f.extent(2) > w) {
      throw ShapeError("aggregate_multiscale: stage map " + shape_to_string(f.shape()) +
                       " exceeds target " + std::to_string(h) + "x" + std::to_string(w));
    }
    Tensor<T> up = upsample_bilinear(f, h, w);
    cf += up.extent(0);
    parts.push_back(reshape(up, {up.extent(0), h * w}));
  }
  return reshape(concat_rows_list(parts), {cf, h, w});
}

// d^s_{k,j} = ||x^sc_k - x_j||_2 per pixel token j, smoothed as
// sqrt(eps + sum of squares) so the gradient exists at coincidence.
template <typename T>
Tensor<T> class_distance(const Tensor<T>& xf, const ClassTokens<T>& ct) {
  detail::require_ndim(xf, 3, "class_distance");
  detail::require_ndim(ct.tokens, 2, "class_distance");
  const std::size_t cf = xf.extent(0), h = xf.extent(1), w = xf.extent(2);
  const std::size_t klass = ct.tokens.extent(0);
  if (ct.tokens.extent(1) != cf) {
    throw ShapeError("class_distance: class tokens " + shape_to_string(ct.tokens.shape()) +
                     " do not match feature width " + std::to_string(cf));
  }
  constexpr T kEps = T(1e-12);
  const std::size_t pix = h * w;
  bool rec = detail::tracing<T>({&xf, &ct.tokens});
  Tensor<T> out = detail::traced_output<T>({klass, h, w}, rec);
  for (std::size_t ki = 0; ki < klass; ++ki)
    for (std::size_t j = 0; j < pix; ++j) {
      T s = kEps;
      for (std::size_t ch = 0; ch < cf; ++ch) {
        const T d = ct.tokens[ki * cf + ch] - xf[ch * pix + j];
        s += d * d;
      }
      out[ki * pix + j] = std::sqrt(s);
    }
  if (rec) {
    auto xh = xf.handle(), th = ct.tokens.handle(), oh = out.handle();
    Graph<T>::current()->record([xh, th, oh, cf, pix, klass] {
      for (std::size_t ki = 0; ki < klass; ++ki)
        for (std::size_t j = 0; j < pix; ++j) {
          const T g = oh->grad[ki * pix + j];
          if (g == T(0)) continue;
          const T scale = g / oh->value[ki * pix + j];
          for (std::size_t ch = 0; ch < cf; ++ch) {
            const T d = (th->value[ki * cf + ch] - xh->value[ch * pix + j]) * scale;
            if (th->needs_grad) th->grad[ki * cf + ch] += d;
            if (xh->needs_grad) xh->grad[ch * pix + j] -= d;
          }
        }
    });
  }
  return out;
}

// Per-pixel class probabilities: softmax over classes of the negated
// distances, so the nearest class token wins.
template <typename T>
SegPrediction<T> predict(const Tensor<T>& dists) {
  detail::require_ndim(dists, 3, "predict");
  const std::size_t klass = dists.extent(0), h = dists.extent(1), w = dists.extent(2);
  Tensor<T> cols = transpose(reshape(dists, {klass, h * w}));  // [P x K]
  Tensor<T> probs = transpose(softmax_rows(scale(cols, T(-1))));
  SegPrediction<T> pred;
  pred.distances = dists;
  pred.probs = reshape(probs, {klass, h, w});
  return pred;
}

}  // namespace efnet
