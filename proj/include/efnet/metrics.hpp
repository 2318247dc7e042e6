#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "efnet/common.hpp"
#include "efnet/mfad.hpp"
#include "efnet/tensor.hpp"

namespace efnet {

inline constexpr int kIgnoreLabel = 255;

struct MetricReport {
  std::vector<double> iou;        // per class; -1 marks a class absent everywhere
  std::vector<double> acc;        // per class; -1 marks a class absent from ground truth
  double miou = 0.0;
  double macc = 0.0;
  std::vector<double> loss_curve;
};

// Mean over non-ignore pixels of -log p[true class], with the probability
// clamped at 1e-12 before the log.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& probs, const std::vector<int>& labels) {
  detail::require_ndim(probs, 3, "cross_entropy");
  const std::size_t klass = probs.extent(0), pix = probs.extent(1) * probs.extent(2);
  if (labels.size() != pix) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(pix) + " pixels");
  }
  constexpr T kEps = T(1e-12);
  std::size_t count = 0;
  T sum = T(0);
  for (std::size_t j = 0; j < pix; ++j) {
    const int lab = labels[j];
    if (lab == kIgnoreLabel) continue;
    if (lab < 0 || static_cast<std::size_t>(lab) >= klass) {
      throw ContractError("cross_entropy: label " + std::to_string(lab) + " out of range [0, " +
                          std::to_string(klass) + ")");
    }
    const T p = probs[static_cast<std::size_t>(lab) * pix + j];
    sum += -std::log(p > kEps ? p : kEps);
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy: every pixel carries the ignore label");

  bool rec = detail::tracing<T>({&probs});
  Tensor<T> out = detail::traced_output<T>({1}, rec);
  out[0] = sum / T(count);
  if (rec) {
    auto ph = probs.handle(), oh = out.handle();
    Graph<T>::current()->record([ph, oh, labels, pix, count] {
      const T g = oh->grad[0] / T(count);
      for (std::size_t j = 0; j < pix; ++j) {
        const int lab = labels[j];
        if (lab == kIgnoreLabel) continue;
        const std::size_t at = static_cast<std::size_t>(lab) * pix + j;
        if (ph->value[at] > T(1e-12)) ph->grad[at] -= g / ph->value[at];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy(const SegPrediction<T>& pred, const std::vector<int>& labels) {
  const Tensor<T>& probs = pred.probs_full.defined() ? pred.probs_full : pred.probs;
  return cross_entropy(probs, labels);
}

// Per-pixel argmax class; the first maximal entry wins.
template <typename T>
std::vector<int> predicted_labels(const Tensor<T>& probs) {
  detail::require_ndim(probs, 3, "predicted_labels");
  const std::size_t klass = probs.extent(0), pix = probs.extent(1) * probs.extent(2);
  std::vector<int> out(pix, 0);
  for (std::size_t j = 0; j < pix; ++j) {
    T best = probs[j];
    int arg = 0;
    for (std::size_t k = 1; k < klass; ++k) {
      if (probs[k * pix + j] > best) {
        best = probs[k * pix + j];
        arg = static_cast<int>(k);
      }
    }
    out[j] = arg;
  }
  return out;
}

// Whole-set accumulation: IoU_c = TP/(TP+FP+FN); classes untouched by both
// prediction and ground truth are excluded from the mean; ignore pixels are
// excluded everywhere. An optional pixel mask restricts scoring further.
inline MetricReport eval_miou(const std::vector<std::vector<int>>& preds,
                              const std::vector<std::vector<int>>& labels, std::size_t k,
                              const std::vector<std::vector<std::uint8_t>>* mask = nullptr) {
  if (preds.size() != labels.size()) {
    throw ContractError("eval_miou: " + std::to_string(preds.size()) + " predictions vs " +
                        std::to_string(labels.size()) + " label grids");
  }
  std::vector<std::size_t> tp(k, 0), fp(k, 0), fn(k, 0);
  for (std::size_t s = 0; s < preds.size(); ++s) {
    if (preds[s].size() != labels[s].size()) {
      throw ContractError("eval_miou: extent mismatch in sample " + std::to_string(s));
    }
    for (std::size_t j = 0; j < preds[s].size(); ++j) {
      const int lab = labels[s][j];
      if (lab == kIgnoreLabel) continue;
      if (mask && !(*mask)[s][j]) continue;
      const int pred = preds[s][j];
      if (lab < 0 || static_cast<std::size_t>(lab) >= k || pred < 0 ||
          static_cast<std::size_t>(pred) >= k) {
        throw ContractError("eval_miou: class value out of range in sample " + std::to_string(s));
      }
      if (pred == lab) {
        ++tp[static_cast<std::size_t>(lab)];
      } else {
        ++fp[static_cast<std::size_t>(pred)];
        ++fn[static_cast<std::size_t>(lab)];
      }
    }
  }
  MetricReport rep;
  rep.iou.assign(k, -1.0);
  rep.acc.assign(k, -1.0);
  double iou_sum = 0.0, acc_sum = 0.0;
  std::size_t iou_n = 0, acc_n = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t denom = tp[c] + fp[c] + fn[c];
    if (denom > 0) {
      rep.iou[c] = static_cast<double>(tp[c]) / static_cast<double>(denom);
      iou_sum += rep.iou[c];
      ++iou_n;
    }
    const std::size_t gt = tp[c] + fn[c];
    if (gt > 0) {
      rep.acc[c] = static_cast<double>(tp[c]) / static_cast<double>(gt);
      acc_sum += rep.acc[c];
      ++acc_n;
    }
  }
  rep.miou = iou_n ? iou_sum / static_cast<double>(iou_n) : 0.0;
  rep.macc = acc_n ? acc_sum / static_cast<double>(acc_n) : 0.0;
  return rep;
}

}  // namespace efnet
