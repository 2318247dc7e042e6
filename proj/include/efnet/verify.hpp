#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "efnet/common.hpp"
#include "efnet/dbtc.hpp"
#include "efnet/gradcheck.hpp"
#include "efnet/metrics.hpp"
#include "efnet/mfad.hpp"
#include "efnet/mif.hpp"
#include "efnet/model.hpp"
#include "efnet/rng.hpp"
#include "efnet/tensor.hpp"

namespace efnet {

struct CheckSuite {
  std::string name;
  std::size_t cases = 0;
  std::size_t failures = 0;
  double max_err = 0.0;
  std::vector<std::string> notes;
};

struct SuiteResult {
  std::vector<CheckSuite> suites;

  bool ok() const {
    for (const auto& s : suites)
      if (s.failures) return false;
    return true;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << std::left << std::setw(28) << "suite" << std::right << std::setw(8) << "cases"
       << std::setw(10) << "failures" << std::setw(14) << "max_err" << '\n';
    std::size_t failures = 0;
    for (const auto& s : suites) {
      failures += s.failures;
      os << std::left << std::setw(28) << s.name << std::right << std::setw(8) << s.cases
         << std::setw(10) << s.failures << std::setw(14) << std::scientific
         << std::setprecision(2) << s.max_err << std::defaultfloat << '\n';
      for (const auto& n : s.notes) os << "    - " << n << '\n';
    }
    os << (failures == 0 ? "VERIFY PASS" : "VERIFY FAIL") << " (" << suites.size() << " suites, "
       << failures << " failures)\n";
    return os.str();
  }
};

// ---------------------------------------------------------------------------
// Clustering pipeline vs the brute-force oracle

struct EquivalenceStats {
  double max_real_err = 0.0;
  bool integers_match = true;
};

template <typename T>
TokenSet<T> random_token_set(std::size_t n, std::size_t c, Rng& rng) {
  TokenSet<T> ts;
  ts.tokens = Tensor<T>({n, c});
  ts.coords = Tensor<T>({n, 2});
  ts.importance = Tensor<T>({n});
  for (std::size_t i = 0; i < n * c; ++i) ts.tokens[i] = static_cast<T>(rng.normal());
  for (std::size_t i = 0; i < n * 2; ++i) ts.coords[i] = static_cast<T>(rng.uniform());
  for (std::size_t i = 0; i < n; ++i) ts.importance[i] = static_cast<T>(rng.normal()) * T(0.5);
  ts.grid_h = n;
  ts.grid_w = 1;
  return ts;
}

// Runs the production clustering path and the brute-force oracle on one random
// instance and reports the worst real-valued gap plus integer agreement.
// inject_distance_bug flips the sign of the spatial term (a seeded defect the
// suite must catch whenever tau < 1).
template <typename T>
EquivalenceStats clustering_equivalence_case(std::size_t n, std::size_t c, T tau, std::size_t k,
                                             T ratio, std::uint64_t seed, bool symmetric_tau,
                                             bool inject_distance_bug = false) {
  if (n < 2) throw ContractError("clustering_equivalence_case: n must be >= 2");
  Rng rng(seed);
  TokenSet<T> ts = random_token_set<T>(n, c, rng);
  const std::size_t k_eff = std::min(k, n - 1);
  std::size_t m = static_cast<std::size_t>(std::ceil(ratio * static_cast<T>(n)));
  m = std::min(std::max<std::size_t>(m, 1), n);

  Tensor<T> d = dual_distance(ts, tau, symmetric_tau);
  if (inject_distance_bug) {
    const T sem_w = symmetric_tau ? tau : T(1);
    const T spa_w = T(1) - tau;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        T sem2 = T(0);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T dv = ts.tokens[i * c + ch] - ts.tokens[j * c + ch];
          sem2 += dv * dv;
        }
        const T dr = ts.coords[i * 2] - ts.coords[j * 2];
        const T dc = ts.coords[i * 2 + 1] - ts.coords[j * 2 + 1];
        const T v = sem_w * std::sqrt(sem2) - spa_w * std::sqrt(dr * dr + dc * dc);
        d[i * n + j] = v;
        d[j * n + i] = v;
      }
    }
  }
  Tensor<T> rho = local_density(d, k_eff);
  Tensor<T> delta = separation_delta(d, rho);
  Tensor<T> score({n});
  for (std::size_t i = 0; i < n; ++i) score[i] = rho[i] * delta[i];
  std::vector<std::size_t> centers = select_centers(score, m);
  std::vector<std::size_t> assignment = assign_clusters(d, centers);
  Tensor<T> merged = merge_tokens(ts.tokens, assignment, ts.importance);

  ClusterResult<T> oracle = brute_force_oracle(ts, tau, k_eff, m, symmetric_tau);

  EquivalenceStats st;
  auto track = [&st](const Tensor<T>& a, const Tensor<T>& b) {
    for (std::size_t i = 0; i < a.numel(); ++i) {
      st.max_real_err = std::max(st.max_real_err,
                                 static_cast<double>(std::abs(a[i] - b[i])));
    }
  };
  track(d, oracle.distance);
  track(rho, oracle.density);
  track(delta, oracle.separation);
  track(score, oracle.score);
  if (merged.shape() != oracle.merged.shape()) st.integers_match = false;
  else track(merged, oracle.merged);
  st.integers_match = st.integers_match && centers == oracle.centers &&
                      assignment == oracle.assignment;
  return st;
}

// ---------------------------------------------------------------------------
// Gradient-check registry (double precision; seeded per run)

struct GradCase {
  std::string name;
  std::function<double(std::uint64_t)> run;  // returns worst relative error
};

namespace detail {

inline Tensor<double> randn_t(Rng& rng, std::vector<std::size_t> shape, double s = 1.0) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * s;
  return t;
}

inline Tensor<double> randu_t(Rng& rng, std::vector<std::size_t> shape, double lo, double hi) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = lo + (hi - lo) * rng.uniform();
  return t;
}

// Values kept away from zero so relu-style kinks sit outside the probe step.
inline Tensor<double> rand_offzero(Rng& rng, std::vector<std::size_t> shape, double margin) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const double v = rng.normal();
    t[i] = v + (v >= 0 ? margin : -margin);
  }
  return t;
}

// Pairwise-distinct values so max-statistics stay locally smooth.
inline Tensor<double> rand_distinct(Rng& rng, std::vector<std::size_t> shape) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() + 1e-3 * static_cast<double>(i);
  return t;
}

inline Tensor<double> wsum(const Tensor<double>& out, const Tensor<double>& w) {
  return sum_all(mul(out, w));
}

}  // namespace detail

inline std::vector<GradCase> gradcheck_cases() {
  using detail::randn_t;
  using detail::randu_t;
  using detail::rand_distinct;
  using detail::rand_offzero;
  using detail::wsum;
  using V = std::vector<Tensor<double>>;
  std::vector<GradCase> cases;
  auto add_case = [&cases](const std::string& name, std::function<double(std::uint64_t)> fn) {
    cases.push_back({name, std::move(fn)});
  };

  add_case("arith-chain", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{randn_t(rng, {3, 4}), randn_t(rng, {3, 4})};
    Tensor<double> w = randn_t(rng, {3, 4});
    return grad_check<double>(
        [w](V& v) { return wsum(mul(add(v[0], v[1]), sub(v[0], v[1])), w); }, in);
  });
  add_case("relu-scale", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{rand_offzero(rng, {4, 5}, 0.2)};
    Tensor<double> w = randn_t(rng, {4, 5});
    return grad_check<double>([w](V& v) { return wsum(relu(scale(v[0], 1.7)), w); }, in);
  });
  add_case("sigmoid-exp-log", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{randn_t(rng, {3, 3}), randn_t(rng, {3, 3})};
    Tensor<double> w = randn_t(rng, {3, 3});
    return grad_check<double>(
        [w](V& v) { return wsum(log(add(sigmoid(v[0]), exp(scale(v[1], 0.1)))), w); }, in);
  });
  add_case("matmul-affine", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{randn_t(rng, {3, 4}), randn_t(rng, {4, 5}), randn_t(rng, {5, 2}), randn_t(rng, {2})};
    Tensor<double> w = randn_t(rng, {3, 2});
    return grad_check<double>(
        [w](V& v) { return wsum(affine(matmul(v[0], v[1]), v[2], v[3]), w); }, in);
  });
  add_case("softmax-rows", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{randn_t(rng, {4, 6})};
    Tensor<double> w = randn_t(rng, {4, 6});
    return grad_check<double>([w](V& v) { return wsum(softmax_rows(v[0]), w); }, in);
  });
  add_case("layer-norm", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{randn_t(rng, {4, 6}), randu_t(rng, {6}, 0.5, 1.5), randn_t(rng, {6})};
    Tensor<double> w = randn_t(rng, {4, 6});
    return grad_check<double>([w](V& v) { return wsum(layer_norm(v[0], v[1], v[2]), w); }, in);
  });
  add_case("shape-ops", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{randn_t(rng, {4, 6})};
    Tensor<double> w = randn_t(rng, {3, 2});
    return grad_check<double>(
        [w](V& v) {
          Tensor<double> t = transpose(v[0]);                      // [6 x 4]
          Tensor<double> s = slice_rows(slice_cols(t, 1, 3), 2, 5);  // [3 x 2]
          return wsum(reshape(s, {3, 2}), w);
        },
        in);
  });
  add_case("concat", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{randn_t(rng, {2, 3}), randn_t(rng, {3, 3}), randn_t(rng, {5, 2})};
    Tensor<double> w = randn_t(rng, {5, 5});
    return grad_check<double>(
        [w](V& v) { return wsum(concat_cols(concat_rows(v[0], v[1]), v[2]), w); }, in);
  });
  add_case("gather-rows", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{randn_t(rng, {4, 3})};
    Tensor<double> w = randn_t(rng, {6, 3});
    const std::vector<std::size_t> idx{0, 2, 2, 1, 3, 0};
    return grad_check<double>([w, idx](V& v) { return wsum(gather_rows(v[0], idx), w); }, in);
  });
  add_case("col-vector-channels", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{randn_t(rng, {3, 4, 5}), randn_t(rng, {3}), randn_t(rng, {5}), randn_t(rng, {4, 5})};
    Tensor<double> w1 = randn_t(rng, {3, 4, 5});
    Tensor<double> w2 = randn_t(rng, {4, 5});
    return grad_check<double>(
        [w1, w2](V& v) {
          Tensor<double> a = mul_channels(v[0], v[1]);
          Tensor<double> b = add_col_vector(v[3], v[2]);
          return add(wsum(a, w1), wsum(b, w2));
        },
        in);
  });
  add_case("div-by-colsum", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{randu_t(rng, {3, 7}, 0.5, 1.5)};
    Tensor<double> w = randn_t(rng, {3, 7});
    return grad_check<double>([w](V& v) { return wsum(div_by_colsum(v[0]), w); }, in);
  });
  add_case("mean-pool", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{randn_t(rng, {2, 4, 6})};
    Tensor<double> w = randn_t(rng, {2, 2, 3});
    return grad_check<double>([w](V& v) { return wsum(mean_pool2x2(v[0]), w); }, in);
  });
  add_case("upsample-bilinear", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{randn_t(rng, {2, 3, 4})};
    Tensor<double> w = randn_t(rng, {2, 5, 7});
    return grad_check<double>([w](V& v) { return wsum(upsample_bilinear(v[0], 5, 7), w); }, in);
  });
  add_case("upsample-centers", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{randn_t(rng, {2, 3, 4})};
    Tensor<double> w = randn_t(rng, {2, 6, 8});
    return grad_check<double>(
        [w](V& v) { return wsum(upsample_bilinear_centers(v[0], 6, 8), w); }, in);
  });
  add_case("channel-stats", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{rand_distinct(rng, {3, 4, 4})};
    Tensor<double> w = randn_t(rng, {3, 3});
    return grad_check<double>([w](V& v) { return wsum(channel_stats(v[0]), w); }, in);
  });
  add_case("im2patch", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{randn_t(rng, {3, 8, 8})};
    Tensor<double> w = randn_t(rng, {4, 48});
    return grad_check<double>([w](V& v) { return wsum(im2patch(v[0], 4), w); }, in);
  });
  add_case("window-partition", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{randn_t(rng, {3, 5, 6})};
    Tensor<double> w = randn_t(rng, {4, 16, 3});
    return grad_check<double>(
        [w](V& v) { return wsum(window_partition(v[0], 4).windows, w); }, in);
  });
  add_case("window-merge", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{randn_t(rng, {4, 16, 3})};
    Tensor<double> w = randn_t(rng, {3, 5, 6});
    return grad_check<double>(
        [w](V& v) {
          WindowGrid<double> g;
          g.windows = v[0];
          g.src_h = 5;
          g.src_w = 6;
          g.window = 4;
          return wsum(window_merge(g), w);
        },
        in);
  });
  add_case("merge-tokens", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{randn_t(rng, {6, 3}), randn_t(rng, {6}, 0.5)};
    Tensor<double> w = randn_t(rng, {3, 3});
    const std::vector<std::size_t> assign{0, 1, 0, 2, 1, 0};
    return grad_check<double>(
        [w, assign](V& v) { return wsum(merge_tokens(v[0], assign, v[1]), w); }, in);
  });
  add_case("importance-attention", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{randn_t(rng, {4, 3}), randn_t(rng, {5, 3}), randn_t(rng, {5, 3}), randn_t(rng, {5}, 0.5)};
    Tensor<double> w = randn_t(rng, {4, 3});
    return grad_check<double>(
        [w](V& v) { return wsum(importance_attention(v[0], v[1], v[2], v[3]), w); }, in);
  });
  add_case("mif-fuse", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{randn_t(rng, {3, 5, 6}), randn_t(rng, {3, 5, 6}), randn_t(rng, {9, 2}, 0.5),
         randn_t(rng, {2}, 0.5), randn_t(rng, {2, 3}, 0.5), randn_t(rng, {3}, 0.5)};
    Tensor<double> w = randn_t(rng, {3, 5, 6});
    return grad_check<double>(
        [w](V& v) {
          ChannelGate<double> gate{v[2], v[3], v[4], v[5]};
          return wsum(mif_fuse(v[0], v[1], std::size_t(4), gate), w);
        },
        in);
  });
  add_case("decoder-cross-entropy", [](std::uint64_t seed) {
    Rng rng(seed);
    V in{randn_t(rng, {2, 4, 4}), randn_t(rng, {3, 4, 4}), randn_t(rng, {2, 2, 2}),
         randn_t(rng, {2, 1, 1}), randn_t(rng, {3, 9}, 0.5)};
    std::vector<int> labels(16);
    for (std::size_t i = 0; i < 16; ++i) labels[i] = static_cast<int>(i % 3);
    labels[5] = kIgnoreLabel;
    return grad_check<double>(
        [labels](V& v) {
          Tensor<double> xf = aggregate_multiscale<double>({v[0], v[1], v[2], v[3]});
          ClassTokens<double> ct{v[4]};
          SegPrediction<double> pred = predict(class_distance(xf, ct));
          return cross_entropy(pred.probs, labels);
        },
        in);
  });
  add_case("pipeline-pool", [](std::uint64_t seed) {
    ModelConfig cfg;
    cfg.channels = {4, 4, 4, 4};
    cfg.heads = 2;
    cfg.window = 4;
    cfg.downsample = DownsampleMode::kPool;
    cfg.position = PositionMode::kPe;
    Model<double> model = build_model<double>(cfg, seed);
    Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
    Tensor<double> rgb = randu_t(rng, {3, 32, 32}, 0.0, 1.0);
    Tensor<double> thermal = randu_t(rng, {1, 32, 32}, 0.0, 1.0);
    std::vector<int> labels(32 * 32);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i / 512);
    model.zero_grads();
    V in{model.p("embed.rgb.w"), model.p("mif.gate.w2"), model.p("bridge3.w"),
         model.p("stage4.b0.attn.wv"), model.p("decoder.class_tokens")};
    return grad_check<double>(
        [&model, rgb, thermal, labels](V&) {
          SegPrediction<double> pred = forward(model, rgb, thermal);
          return cross_entropy(pred, labels);
        },
        in);
  });
  return cases;
}

// ---------------------------------------------------------------------------
// Self-verification suites

struct VerifyOptions {
  std::uint64_t seed = 2024;
  std::size_t equivalence_cases = 36;
  std::size_t gradcheck_seeds = 2;
  bool inject_distance_bug = false;  // test fixture: suite must then fail
};

inline SuiteResult run_verification(const VerifyOptions& opts = {}) {
  SuiteResult result;
  constexpr double kRealTol = 1e-10;
  constexpr double kGradTol = 1e-4;

  {
    CheckSuite s;
    s.name = "clustering-equivalence";
    const double taus[5] = {0.0, 0.3, 0.5, 0.7, 1.0};
    const std::size_t ks[3] = {1, 3, 5};
    const double ratios[4] = {0.1, 0.25, 0.5, 1.0};
    Rng rng(opts.seed);
    for (std::size_t i = 0; i < opts.equivalence_cases; ++i) {
      const std::size_t n = 2 + rng.range(95);
      const std::size_t c = 1 + rng.range(8);
      EquivalenceStats st = clustering_equivalence_case<double>(
          n, c, taus[i % 5], ks[i % 3], ratios[i % 4], opts.seed + 77 * i + 1, i % 2 == 1,
          opts.inject_distance_bug);
      ++s.cases;
      s.max_err = std::max(s.max_err, st.max_real_err);
      if (!st.integers_match || st.max_real_err > kRealTol) ++s.failures;
    }
    result.suites.push_back(std::move(s));
  }

  {
    CheckSuite s;
    s.name = "gradient-checks";
    for (const GradCase& gc : gradcheck_cases()) {
      for (std::size_t r = 0; r < opts.gradcheck_seeds; ++r) {
        const double err = gc.run(opts.seed + 1000 * r + 13);
        ++s.cases;
        s.max_err = std::max(s.max_err, err);
        if (!(err < kGradTol)) {
          ++s.failures;
          s.notes.push_back(gc.name + ": rel err " + std::to_string(err));
        }
      }
    }
    result.suites.push_back(std::move(s));
  }

  {
    CheckSuite s;
    s.name = "window-roundtrip";
    Rng rng(opts.seed + 5);
    const std::size_t shapes[5][4] = {{1, 1, 1, 1}, {3, 5, 5, 4}, {2, 8, 8, 8},
                                      {4, 7, 9, 3}, {1, 16, 12, 8}};
    for (const auto& sh : shapes) {
      Tensor<double> f = detail::randn_t(rng, {sh[0], sh[1], sh[2]});
      WindowGrid<double> g = window_partition(f, sh[3]);
      Tensor<double> back = window_merge(g);
      ++s.cases;
      bool exact = back.shape() == f.shape();
      for (std::size_t i = 0; exact && i < f.numel(); ++i) exact = back[i] == f[i];
      // padded cells must stay zero
      const std::size_t w = sh[3], pw = (sh[2] + w - 1) / w * w, tw = pw / w;
      for (std::size_t wi = 0; exact && wi < g.windows.extent(0); ++wi) {
        for (std::size_t px = 0; px < w * w; ++px) {
          const std::size_t gy = (wi / tw) * w + px / w, gx = (wi % tw) * w + px % w;
          if (gy >= sh[1] || gx >= sh[2]) {
            for (std::size_t ch = 0; ch < sh[0]; ++ch) {
              if (g.windows[(wi * w * w + px) * sh[0] + ch] != 0.0) exact = false;
            }
          }
        }
      }
      if (!exact) ++s.failures;
    }
    result.suites.push_back(std::move(s));
  }

  {
    CheckSuite s;
    s.name = "decoder-consistency";
    Rng rng(opts.seed + 9);
    for (int rep = 0; rep < 6; ++rep) {
      const std::size_t k = 2 + rng.range(5), h = 1 + rng.range(6), w = 1 + rng.range(6);
      Tensor<double> dists = detail::randu_t(rng, {k, h, w}, 0.0, 3.0);
      SegPrediction<double> pred = predict(dists);
      ++s.cases;
      bool ok = true;
      for (std::size_t p = 0; p < h * w; ++p) {
        std::size_t am = 0, an = 0;
        for (std::size_t cc = 1; cc < k; ++cc) {
          if (pred.probs[cc * h * w + p] > pred.probs[am * h * w + p]) am = cc;
          if (dists[cc * h * w + p] < dists[an * h * w + p]) an = cc;
        }
        if (am != an) ok = false;
        double colsum = 0;
        for (std::size_t cc = 0; cc < k; ++cc) colsum += pred.probs[cc * h * w + p];
        s.max_err = std::max(s.max_err, std::abs(colsum - 1.0));
      }
      if (!ok || s.max_err > 1e-9) ++s.failures;
    }
    result.suites.push_back(std::move(s));
  }

  {
    CheckSuite s;
    s.name = "dbtc-identities";
    Rng rng(opts.seed + 17);
    // uniform p -> merged cluster = member mean
    {
      Tensor<double> tokens = detail::randn_t(rng, {7, 3});
      Tensor<double> p({7}, 0.4);
      const std::vector<std::size_t> assign{0, 1, 1, 0, 2, 2, 0};
      Tensor<double> merged = merge_tokens(tokens, assign, p);
      ++s.cases;
      double err = 0;
      for (std::size_t cl = 0; cl < 3; ++cl) {
        for (std::size_t ch = 0; ch < 3; ++ch) {
          double sum = 0, cnt = 0;
          for (std::size_t i = 0; i < 7; ++i) {
            if (assign[i] == cl) {
              sum += tokens[i * 3 + ch];
              ++cnt;
            }
          }
          err = std::max(err, std::abs(merged[cl * 3 + ch] - sum / cnt));
        }
      }
      s.max_err = std::max(s.max_err, err);
      if (err > 1e-12) ++s.failures;
    }
    // zero importance bias -> plain scaled dot-product attention
    {
      Tensor<double> q = detail::randn_t(rng, {4, 3}), k = detail::randn_t(rng, {6, 3}),
                     v = detail::randn_t(rng, {6, 3});
      Tensor<double> p({6}, 0.0);
      Tensor<double> with_p = importance_attention(q, k, v, p);
      Tensor<double> plain = matmul(softmax_rows(scale(matmul(q, transpose(k)),
                                                       1.0 / std::sqrt(3.0))), v);
      ++s.cases;
      double err = 0;
      for (std::size_t i = 0; i < with_p.numel(); ++i)
        err = std::max(err, std::abs(with_p[i] - plain[i]));
      s.max_err = std::max(s.max_err, err);
      if (err > 1e-12) ++s.failures;
    }
    // single-token set degenerates to the identity cluster
    {
      TokenSet<double> one = random_token_set<double>(1, 4, rng);
      DbtcParams<double> dp{Tensor<double>({4, 1}, 0.0), Tensor<double>({1}, 0.0)};
      auto [out, cr] = cluster_downsample(one, 0.5, 3, 0.25, PixelCoordEncoding<double>::identity(),
                                          dp);
      ++s.cases;
      if (cr.centers != std::vector<std::size_t>{0} ||
          cr.assignment != std::vector<std::size_t>{0} || out.tokens.extent(0) != 1) {
        ++s.failures;
      }
    }
    result.suites.push_back(std::move(s));
  }

  {
    CheckSuite s;
    s.name = "mif-symmetry";
    Rng rng(opts.seed + 23);
    for (int rep = 0; rep < 4; ++rep) {
      const std::size_t c = 2 + rng.range(3), h = 3 + rng.range(6), w = 3 + rng.range(6);
      const std::size_t hidden = 2;
      Tensor<double> fr = detail::randn_t(rng, {c, h, w}), ft = detail::randn_t(rng, {c, h, w});
      ChannelGate<double> gate{detail::randn_t(rng, {3 * c, hidden}, 0.5),
                               detail::randn_t(rng, {hidden}, 0.5),
                               detail::randn_t(rng, {hidden, c}, 0.5),
                               detail::randn_t(rng, {c}, 0.5)};
      Tensor<double> ab = mif_fuse(fr, ft, 4, gate);
      Tensor<double> ba = mif_fuse(ft, fr, 4, gate);
      ++s.cases;
      bool exact = true;
      for (std::size_t i = 0; i < ab.numel(); ++i) {
        if (ab[i] != ba[i]) exact = false;
        s.max_err = std::max(s.max_err, std::abs(ab[i] - ba[i]));
      }
      if (!exact) ++s.failures;
    }
    result.suites.push_back(std::move(s));
  }

  {
    CheckSuite s;
    s.name = "pipeline-forward";
    struct Cell {
      DownsampleMode down;
      FusionMode fuse;
      PositionMode pos;
      DecoderMode dec;
    };
    const Cell cells[3] = {
        {DownsampleMode::kDbtc, FusionMode::kMif, PositionMode::kPce, DecoderMode::kEuclid},
        {DownsampleMode::kPool, FusionMode::kAdd, PositionMode::kPe, DecoderMode::kMlp},
        {DownsampleMode::kDbtc, FusionMode::kCat, PositionMode::kNone, DecoderMode::kEuclid}};
    Rng rng(opts.seed + 31);
    for (const Cell& cell : cells) {
      ModelConfig cfg;
      cfg.channels = {4, 4, 4, 4};
      cfg.heads = 2;
      cfg.window = 4;
      cfg.downsample = cell.down;
      cfg.fusion = cell.fuse;
      cfg.position = cell.pos;
      cfg.decoder = cell.dec;
      Model<double> model = build_model<double>(cfg, opts.seed);
      Tensor<double> rgb = detail::randu_t(rng, {3, 32, 32}, 0.0, 1.0);
      Tensor<double> thermal = detail::randu_t(rng, {1, 32, 32}, 0.0, 1.0);
      ForwardTrace<double> trace;
      SegPrediction<double> pred = forward(model, rgb, thermal, &trace);
      ++s.cases;
      bool ok = trace.stage_tokens == std::vector<std::size_t>{64, 16, 4, 1};
      for (std::size_t i = 0; ok && i < pred.probs_full.numel(); ++i) {
        if (!std::isfinite(pred.probs_full[i])) ok = false;
      }
      const std::size_t pix = cfg.resolution * cfg.resolution;
      for (std::size_t p = 0; p < pix && ok; ++p) {
        double colsum = 0;
        for (std::size_t cc = 0; cc < cfg.classes; ++cc)
          colsum += pred.probs_full[cc * pix + p];
        s.max_err = std::max(s.max_err, std::abs(colsum - 1.0));
      }
      if (!ok || s.max_err > 1e-9) ++s.failures;
    }
    result.suites.push_back(std::move(s));
  }

  return result;
}

// ---------------------------------------------------------------------------
// Benchmark: clustering vs pooling downsample

struct BenchRow {
  std::string mode;
  std::size_t n = 0;
  std::uint64_t ops = 0;  // counted multiply-adds/compares, deterministic
  double wall_ms = 0.0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::string text;
};

// Deterministic multiply-add/compare tallies for one clustering downsample.
inline std::uint64_t dbtc_op_count(std::size_t n, std::size_t c, std::size_t k, std::size_t m) {
  const std::uint64_t N = n, C = c, K = k, M = m;
  const std::uint64_t lg =
      static_cast<std::uint64_t>(std::ceil(std::log2(static_cast<double>(std::max<std::size_t>(2, n)))));
  return N * N * (3 * C + 12)         // pairwise dual distances
         + N * N * (lg + 1) + N * (2 * K + 1)  // neighbor sort + density sums
         + 3 * N * N                  // separation scan
         + N * (lg + 2)               // scores and center selection
         + N * M                      // nearest-center assignment
         + N * (2 * C + 10) + M * C   // weighted merge
         + 4 * M * N * C + 6 * M * N; // importance-biased refinement attention
}

inline std::uint64_t pool_op_count(std::size_t g, std::size_t c) {
  return static_cast<std::uint64_t>(g / 2) * (g / 2) * c * 5;
}

inline BenchReport bench(const ModelConfig& cfg, const std::vector<std::size_t>& sizes) {
  for (std::size_t n : sizes) {
    if (n < 4) throw ContractError("bench: sizes must be >= 4 tokens");
  }
  BenchReport report;
  std::ostringstream os;
  os << "bench config: tau=" << cfg.tau[0] << ',' << cfg.tau[1] << ',' << cfg.tau[2]
     << " k=" << cfg.knn_k << " ratio=" << cfg.ratio << " channels=" << cfg.channels[0] << '\n';
  os << std::left << std::setw(8) << "mode" << std::right << std::setw(10) << "tokens"
     << std::setw(16) << "ops" << std::setw(12) << "wall_ms" << '\n';

  const std::size_t c = cfg.channels[0];
  Rng rng(99);
  for (std::size_t want : sizes) {
    std::size_t g = static_cast<std::size_t>(std::sqrt(static_cast<double>(want)));
    while (g * g < want) ++g;
    if (g % 2) ++g;
    const std::size_t n = g * g;
    const std::size_t k = std::min<std::size_t>(cfg.knn_k, n - 1);
    const std::size_t m = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(cfg.ratio * static_cast<double>(n))));

    Tensor<double> map({c, g, g});
    for (std::size_t i = 0; i < map.numel(); ++i) map[i] = rng.normal();
    TokenSet<double> ts;
    ts.tokens = Tensor<double>({n, c});
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) ts.tokens[p * c + ch] = map[ch * n + p];
    ts.coords = Tensor<double>({n, 2});
    for (std::size_t r = 0; r < g; ++r)
      for (std::size_t col = 0; col < g; ++col) {
        ts.coords[(r * g + col) * 2] = (r + 0.5) / g;
        ts.coords[(r * g + col) * 2 + 1] = (col + 0.5) / g;
      }
    ts.importance = Tensor<double>({n}, 0.0);
    ts.grid_h = g;
    ts.grid_w = g;
    DbtcParams<double> dp{Tensor<double>({c, 1}, 0.0), Tensor<double>({1}, 0.0)};

    const int dbtc_reps = n <= 300 ? 5 : n <= 1100 ? 2 : 1;
    double best = 1e300;
    for (int rep = 0; rep < dbtc_reps; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      auto out = cluster_downsample(ts, cfg.tau[0], k, cfg.ratio,
                                    PixelCoordEncoding<double>::identity(), dp,
                                    cfg.symmetric_tau);
      const auto t1 = std::chrono::steady_clock::now();
      (void)out;
      best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    BenchRow dr{"dbtc", n, dbtc_op_count(n, c, k, m), best};

    const int pool_reps = 50;
    double pbest = 1e300;
    for (int rep = 0; rep < pool_reps; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      Tensor<double> pooled = mean_pool2x2(map);
      const auto t1 = std::chrono::steady_clock::now();
      (void)pooled;
      pbest = std::min(pbest, std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    BenchRow pr{"pool", n, pool_op_count(g, c), pbest};

    for (const BenchRow& row : {dr, pr}) {
      os << std::left << std::setw(8) << row.mode << std::right << std::setw(10) << row.n
         << std::setw(16) << row.ops << std::setw(12) << std::fixed << std::setprecision(3)
         << row.wall_ms << std::defaultfloat << '\n';
      report.rows.push_back(row);
    }
  }
  for (const BenchRow& row : report.rows) {
    os << "BENCH,mode=" << row.mode << ",tokens=" << row.n << ",ops=" << row.ops
       << ",wall_ms=" << row.wall_ms << '\n';
  }
  report.text = os.str();
  return report;
}

}  // namespace efnet
