#pragma once

// Independent scalar-loop references the tests compare library output against.
// Everything here is deliberately naive: plain loops, no shared helpers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b,
                                  std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t t = 0; t < k; ++t) out[i * n + j] += a[i * k + t] * b[t * n + j];
  return out;
}

inline std::vector<double> softmax_row(const std::vector<double>& row) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  std::vector<double> out(row.size());
  double denom = 0;
  for (std::size_t i = 0; i < row.size(); ++i) {
    out[i] = std::exp(row[i] - mx);
    denom += out[i];
  }
  for (double& v : out) v /= denom;
  return out;
}

inline std::vector<double> layer_norm_row(const std::vector<double>& row,
                                          const std::vector<double>& gamma,
                                          const std::vector<double>& beta, double eps) {
  const std::size_t n = row.size();
  double mean = 0;
  for (double v : row) mean += v;
  mean /= n;
  double var = 0;
  for (double v : row) var += (v - mean) * (v - mean);
  var /= n;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = gamma[i] * (row[i] - mean) / std::sqrt(var + eps) + beta[i];
  return out;
}

// (mean, max, population variance) of one channel plane.
inline void channel_stats(const std::vector<double>& plane, double& mean, double& mx,
                          double& var) {
  mean = 0;
  mx = plane[0];
  for (double v : plane) {
    mean += v;
    mx = std::max(mx, v);
  }
  mean /= plane.size();
  var = 0;
  for (double v : plane) var += (v - mean) * (v - mean);
  var /= plane.size();
}

// Corner-aligned bilinear upsample of one plane.
inline std::vector<double> upsample_plane(const std::vector<double>& src, std::size_t h,
                                          std::size_t w, std::size_t h2, std::size_t w2) {
  std::vector<double> out(h2 * w2);
  for (std::size_t r = 0; r < h2; ++r) {
    const double fy = h2 == 1 || h == 1 ? 0.0
                                        : static_cast<double>(r) * (h - 1) / (h2 - 1);
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - y0;
    for (std::size_t c = 0; c < w2; ++c) {
      const double fx = w2 == 1 || w == 1 ? 0.0
                                          : static_cast<double>(c) * (w - 1) / (w2 - 1);
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - x0;
      const double top = src[y0 * w + x0] * (1 - wx) + src[y0 * w + x1] * wx;
      const double bot = src[y1 * w + x0] * (1 - wx) + src[y1 * w + x1] * wx;
      out[r * w2 + c] = top * (1 - wy) + bot * wy;
    }
  }
  return out;
}

// One window of cross attention: rows of a attend over rows of b ([p x c] each).
inline std::vector<double> window_cross_attention(const std::vector<double>& a,
                                                  const std::vector<double>& b, std::size_t p,
                                                  std::size_t c) {
  std::vector<double> out(p * c, 0.0);
  for (std::size_t i = 0; i < p; ++i) {
    std::vector<double> logits(p, 0.0);
    for (std::size_t j = 0; j < p; ++j) {
      for (std::size_t ch = 0; ch < c; ++ch) logits[j] += a[i * c + ch] * b[j * c + ch];
      logits[j] /= std::sqrt(static_cast<double>(c));
    }
    const std::vector<double> w = softmax_row(logits);
    for (std::size_t j = 0; j < p; ++j)
      for (std::size_t ch = 0; ch < c; ++ch) out[i * c + ch] += w[j] * b[j * c + ch];
  }
  return out;
}

// Euclidean distances of every pixel feature column to every class token.
inline std::vector<double> class_distances(const std::vector<double>& xf,
                                           const std::vector<double>& ct, std::size_t cf,
                                           std::size_t pix, std::size_t k, double eps) {
  std::vector<double> out(k * pix);
  for (std::size_t cls = 0; cls < k; ++cls)
    for (std::size_t p = 0; p < pix; ++p) {
      double s = eps;
      for (std::size_t ch = 0; ch < cf; ++ch) {
        const double d = ct[cls * cf + ch] - xf[ch * pix + p];
        s += d * d;
      }
      out[cls * pix + p] = std::sqrt(s);
    }
  return out;
}

inline double cross_entropy(const std::vector<double>& probs, const std::vector<int>& labels,
                            std::size_t k, std::size_t pix, int ignore) {
  double sum = 0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < pix; ++p) {
    if (labels[p] == ignore) continue;
    const double pv = std::max(probs[static_cast<std::size_t>(labels[p]) * pix + p], 1e-12);
    sum += -std::log(pv);
    ++count;
  }
  return sum / count;
}

struct IouCounts {
  std::vector<long long> tp, fp, fn, gt;
};

inline IouCounts iou_counts(const std::vector<std::vector<int>>& preds,
                            const std::vector<std::vector<int>>& labels, std::size_t k,
                            int ignore) {
  IouCounts c;
  c.tp.assign(k, 0);
  c.fp.assign(k, 0);
  c.fn.assign(k, 0);
  c.gt.assign(k, 0);
  for (std::size_t s = 0; s < preds.size(); ++s)
    for (std::size_t p = 0; p < preds[s].size(); ++p) {
      const int g = labels[s][p];
      if (g == ignore) continue;
      const int pr = preds[s][p];
      ++c.gt[g];
      if (pr == g) ++c.tp[g];
      else {
        ++c.fp[pr];
        ++c.fn[g];
      }
    }
  return c;
}

// One decoupled-AdamW update on a single scalar with bias correction.
inline double adamw_step(double theta, double g, double& m, double& v, long t, double lr,
                         double b1, double b2, double eps, double wd) {
  m = b1 * m + (1 - b1) * g;
  v = b2 * v + (1 - b2) * g * g;
  const double mh = m / (1 - std::pow(b1, t));
  const double vh = v / (1 - std::pow(b2, t));
  return theta - lr * (mh / (std::sqrt(vh) + eps) + wd * theta);
}

}  // namespace oracle
