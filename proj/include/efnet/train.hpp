#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "efnet/common.hpp"
#include "efnet/metrics.hpp"
#include "efnet/model.hpp"
#include "efnet/optim.hpp"
#include "efnet/rng.hpp"
#include "efnet/synthetic.hpp"

namespace efnet {

struct TrainConfig {
  std::size_t steps = 300;
  std::size_t batch = 4;
  double lr = 6e-4;
  double weight_decay = 0.01;
  std::string optimizer = "adamw";  // adamw | sgd
  std::uint64_t seed = 7;

  void validate() const {
    if (steps == 0) throw ConfigError("steps: must be positive");
    if (batch == 0) throw ConfigError("batch: must be positive");
    if (lr < 0) throw ConfigError("lr: must be non-negative");
    if (weight_decay < 0) throw ConfigError("weight_decay: must be non-negative");
    if (optimizer != "adamw" && optimizer != "sgd") {
      throw ConfigError("optimizer: expected adamw|sgd, got '" + optimizer + "'");
    }
  }
};

// Parses a config file holding both model and trainer keys.
inline void parse_full_config(const std::string& text, ModelConfig& mc, TrainConfig& tc) {
  parse_config_text(text, mc, [&tc](const std::string& key, const std::string& value) {
    if (key == "steps") tc.steps = detail::parse_size(key, value);
    else if (key == "batch") tc.batch = detail::parse_size(key, value);
    else if (key == "lr") tc.lr = detail::parse_double(key, value);
    else if (key == "weight_decay") tc.weight_decay = detail::parse_double(key, value);
    else if (key == "optimizer") tc.optimizer = value;
    else if (key == "seed") tc.seed = detail::parse_size(key, value);
    else return false;
    return true;
  });
  mc.validate();
  tc.validate();
}

inline std::string train_config_to_text(const TrainConfig& tc) {
  std::string out;
  out += "steps = " + std::to_string(tc.steps) + "\n";
  out += "batch = " + std::to_string(tc.batch) + "\n";
  out += "lr = " + detail::fmt_double(tc.lr) + "\n";
  out += "weight_decay = " + detail::fmt_double(tc.weight_decay) + "\n";
  out += "optimizer = " + tc.optimizer + "\n";
  out += "seed = " + std::to_string(tc.seed) + "\n";
  return out;
}

template <typename T>
std::vector<Tensor<T>> param_tensors(Model<T>& m) {
  std::vector<Tensor<T>> out;
  out.reserve(m.params.size());
  for (auto& [name, t] : m.params) out.push_back(t);
  return out;
}

// Minibatch training loop over preloaded samples. Returns the loss curve plus
// whole-test-set metrics from the final parameters.
template <typename T>
MetricReport train_toy(Model<T>& model, const std::vector<Sample<T>>& train_set,
                       const std::vector<Sample<T>>& test_set, const TrainConfig& tc,
                       const std::function<void(std::size_t, double)>& on_step = {}) {
  tc.validate();
  if (train_set.empty()) throw ContractError("train_toy: empty training set");
  AdamW<T> adamw(param_tensors(model), static_cast<T>(tc.lr), static_cast<T>(tc.weight_decay));
  Sgd<T> sgd(param_tensors(model), static_cast<T>(tc.lr), static_cast<T>(tc.weight_decay));
  Rng rng(tc.seed);

  MetricReport report;
  report.loss_curve.reserve(tc.steps);
  for (std::size_t step = 0; step < tc.steps; ++step) {
    model.zero_grads();
    double loss_acc = 0;
    bool finite = true;
    for (std::size_t b = 0; b < tc.batch; ++b) {
      const Sample<T>& s = train_set[rng.range(train_set.size())];
      Graph<T> graph;
      typename Graph<T>::Scope scope(graph);
      SegPrediction<T> pred = forward(model, s.rgb, s.thermal);
      // The clamp inside cross_entropy turns NaN probabilities into finite
      // losses, so divergence has to be caught at the prediction itself.
      for (std::size_t i = 0; i < pred.probs.numel() && finite; ++i) {
        finite = std::isfinite(static_cast<double>(pred.probs[i]));
      }
      Tensor<T> loss = scale(cross_entropy(pred, s.labels), T(1) / T(tc.batch));
      loss_acc += static_cast<double>(loss.scalar());
      graph.backward(loss);
    }
    if (!finite || !std::isfinite(loss_acc)) {
      throw ContractError("train_toy: loss diverged at step " + std::to_string(step));
    }
    report.loss_curve.push_back(loss_acc);
    if (tc.optimizer == "adamw") adamw.step();
    else sgd.step();
    if (on_step) on_step(step, loss_acc);
  }

  if (!test_set.empty()) {
    std::vector<std::vector<int>> preds, labels;
    preds.reserve(test_set.size());
    labels.reserve(test_set.size());
    for (const Sample<T>& s : test_set) {
      SegPrediction<T> pred = forward(model, s.rgb, s.thermal);
      preds.push_back(predicted_labels(pred.probs_full));
      labels.push_back(s.labels);
    }
    MetricReport ev = eval_miou(preds, labels, model.cfg.classes);
    report.iou = ev.iou;
    report.acc = ev.acc;
    report.miou = ev.miou;
    report.macc = ev.macc;
  }
  return report;
}

}  // namespace efnet
