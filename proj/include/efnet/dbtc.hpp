#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "efnet/common.hpp"
#include "efnet/tensor.hpp"

namespace efnet {

// Token set flowing between stages: semantic features x, spatial locations y
// (normalized grid units in [0,1]), and per-token importance scores.
template <typename T>
struct TokenSet {
  Tensor<T> tokens;      // [N x C]
  Tensor<T> coords;      // [N x 2] (row, col)
  Tensor<T> importance;  // [N]
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;

  std::size_t size() const { return tokens.extent(0); }
};

// Learnable per-axis transform of normalized coordinates; identity at init.
template <typename T>
struct PixelCoordEncoding {
  Tensor<T> scale;   // [2]
  Tensor<T> offset;  // [2]

  static PixelCoordEncoding identity() {
    PixelCoordEncoding e;
    e.scale = Tensor<T>({2}, T(1));
    e.offset = Tensor<T>({2}, T(0));
    return e;
  }
};

template <typename T>
struct ClusterResult {
  Tensor<T> distance;    // [N x N]
  Tensor<T> density;     // [N]
  Tensor<T> separation;  // [N]
  Tensor<T> score;       // [N]
  std::vector<std::size_t> centers;     // M token indices, ascending
  std::vector<std::size_t> assignment;  // N entries in [0, M)
  Tensor<T> merged;      // [M x C]
};

// Learnable linear map producing the scalar importance p per token.
template <typename T>
struct DbtcParams {
  Tensor<T> p_weight;  // [C x 1]
  Tensor<T> p_bias;    // [1]
};

namespace detail {

template <typename T>
inline void check_token_set(const TokenSet<T>& ts, const char* op) {
  if (ts.tokens.ndim() != 2 || ts.tokens.extent(0) < 1) {
    throw ShapeError(std::string(op) + ": tokens must be [N x C] with N >= 1, got " +
                     shape_to_string(ts.tokens.shape()));
  }
  if (ts.coords.ndim() != 2 || ts.coords.extent(0) != ts.tokens.extent(0) ||
      ts.coords.extent(1) != 2) {
    throw ShapeError(std::string(op) + ": coords must be [N x 2], got " +
                     shape_to_string(ts.coords.shape()));
  }
}

template <typename T>
inline void check_square(const Tensor<T>& d, const char* op) {
  if (d.ndim() != 2 || d.extent(0) != d.extent(1)) {
    throw ShapeError(std::string(op) + ": expected square distance matrix, got " +
                     shape_to_string(d.shape()));
  }
}

// Density tie rule: between equal densities the lower index counts as denser.
template <typename T>
inline bool denser(const T* rho, std::size_t j, std::size_t i) {
  return rho[j] > rho[i] || (rho[j] == rho[i] && j < i);
}

}  // namespace detail

// d_{i,j} = ||x_i - x_j|| + (1 - tau) * ||y_i - y_j||   (Eq. 1 as printed; tau
// weights only the spatial term). symmetric_tau additionally scales the
// semantic term by tau.
template <typename T>
Tensor<T> dual_distance(const TokenSet<T>& ts, T tau, bool symmetric_tau = false) {
  if (!(tau >= T(0) && tau <= T(1))) {
    throw ContractError("dual_distance: tau must lie in [0, 1]");
  }
  detail::check_token_set(ts, "dual_distance");
  const std::size_t n = ts.tokens.extent(0), c = ts.tokens.extent(1);
  const T sem_w = symmetric_tau ? tau : T(1);
  const T spa_w = T(1) - tau;
  Tensor<T> d({n, n});
  const auto& x = ts.tokens.values();
  const auto& y = ts.coords.values();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      T sem2 = T(0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T dv = x[i * c + ch] - x[j * c + ch];
        sem2 += dv * dv;
      }
      const T dr = y[i * 2] - y[j * 2];
      const T dc = y[i * 2 + 1] - y[j * 2 + 1];
      const T v = sem_w * std::sqrt(sem2) + spa_w * std::sqrt(dr * dr + dc * dc);
      d[i * n + j] = v;
      d[j * n + i] = v;
    }
  }
  return d;
}

// rho_i = exp(-(1/k) * sum of squared distances to the k nearest neighbors),
// self excluded, ties at the k-th distance broken toward the lower index.
template <typename T>
Tensor<T> local_density(const Tensor<T>& d, std::size_t k) {
  detail::check_square(d, "local_density");
  const std::size_t n = d.extent(0);
  if (k < 1) throw ContractError("local_density: k must be positive");
  if (k >= n) {
    throw ContractError("local_density: k = " + std::to_string(k) +
                        " must be at most N - 1 = " + std::to_string(n - 1));
  }
  Tensor<T> rho({n});
  std::vector<std::pair<T, std::size_t>> nb(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t m = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) nb[m++] = {d[i * n + j], j};
    }
    std::sort(nb.begin(), nb.end());
    T sum = T(0);
    for (std::size_t r = 0; r < k; ++r) sum += nb[r].first * nb[r].first;
    rho[i] = std::exp(-(sum / T(k)));
  }
  return rho;
}

// delta_i = distance to the nearest strictly-denser token; the densest token
// (unique under the index tie rule) takes max_j d_{i,j} instead.
template <typename T>
Tensor<T> separation_delta(const Tensor<T>& d, const Tensor<T>& rho) {
  detail::check_square(d, "separation_delta");
  const std::size_t n = d.extent(0);
  if (rho.numel() != n) {
    throw ShapeError("separation_delta: density length " + std::to_string(rho.numel()) +
                     " does not match distance matrix " + shape_to_string(d.shape()));
  }
  Tensor<T> delta({n});
  const T* r = rho.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    T best = std::numeric_limits<T>::infinity();
    bool found = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i || !detail::denser(r, j, i)) continue;
      if (d[i * n + j] < best) best = d[i * n + j];
      found = true;
    }
    if (!found) {
      best = T(0);
      for (std::size_t j = 0; j < n; ++j) {
        if (j != i && d[i * n + j] > best) best = d[i * n + j];
      }
    }
    delta[i] = best;
  }
  return delta;
}

// Indices of the m largest scores, ties toward the lower index, returned
// sorted ascending.
template <typename T>
std::vector<std::size_t> select_centers(const Tensor<T>& score, std::size_t m) {
  const std::size_t n = score.numel();
  if (m < 1 || m > n) {
    throw ContractError("select_centers: m = " + std::to_string(m) + " must lie in [1, " +
                        std::to_string(n) + "]");
  }
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (score[a] != score[b]) return score[a] > score[b];
    return a < b;
  });
  idx.resize(m);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Nearest-center assignment; ties toward the lower center index; centers
// always belong to their own cluster.
template <typename T>
std::vector<std::size_t> assign_clusters(const Tensor<T>& d,
                                         const std::vector<std::size_t>& centers) {
  detail::check_square(d, "assign_clusters");
  const std::size_t n = d.extent(0);
  if (centers.empty()) throw ContractError("assign_clusters: center list is empty");
  for (std::size_t c : centers) {
    if (c >= n) throw ContractError("assign_clusters: center index " + std::to_string(c) + " out of range");
  }
  std::vector<std::size_t> self(n, centers.size());
  for (std::size_t ci = 0; ci < centers.size(); ++ci) {
    if (self[centers[ci]] == centers.size()) self[centers[ci]] = ci;
  }
  std::vector<std::size_t> assignment(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (self[i] < centers.size()) {
      assignment[i] = self[i];
      continue;
    }
    std::size_t best = 0;
    T best_d = d[i * n + centers[0]];
    for (std::size_t ci = 1; ci < centers.size(); ++ci) {
      const T dv = d[i * n + centers[ci]];
      if (dv < best_d) {
        best_d = dv;
        best = ci;
      }
    }
    assignment[i] = best;
  }
  return assignment;
}

// X*_c = sum_j x_j e^{p_j} / sum_j e^{p_j} over cluster members (Eq. 4),
// evaluated with per-cluster max subtraction. Differentiable in tokens and p.
template <typename T>
Tensor<T> merge_tokens(const Tensor<T>& tokens, const std::vector<std::size_t>& assignment,
                       const Tensor<T>& p) {
  detail::require_ndim(tokens, 2, "merge_tokens");
  const std::size_t n = tokens.extent(0), c = tokens.extent(1);
  if (assignment.size() != n) {
    throw ShapeError("merge_tokens: assignment length " + std::to_string(assignment.size()) +
                     " does not match " + std::to_string(n) + " tokens");
  }
  if (p.numel() != n) {
    throw ShapeError("merge_tokens: importance length " + std::to_string(p.numel()) +
                     " does not match " + std::to_string(n) + " tokens");
  }
  std::size_t m = 0;
  for (std::size_t a : assignment) m = std::max(m, a + 1);
  std::vector<std::vector<std::size_t>> members(m);
  for (std::size_t i = 0; i < n; ++i) members[assignment[i]].push_back(i);
  for (std::size_t ci = 0; ci < m; ++ci) {
    if (members[ci].empty()) {
      throw ContractError("merge_tokens: cluster " + std::to_string(ci) + " is empty");
    }
  }

  bool rec = detail::tracing<T>({&tokens, &p});
  Tensor<T> out = detail::traced_output<T>({m, c}, rec);
  std::vector<T> weight(n, T(0));  // softmax weight of each token within its cluster
  for (std::size_t ci = 0; ci < m; ++ci) {
    const auto& mem = members[ci];
    T mx = p[mem[0]];
    for (std::size_t j : mem) mx = std::max(mx, p[j]);
    T den = T(0);
    for (std::size_t j : mem) {
      weight[j] = std::exp(p[j] - mx);
      den += weight[j];
    }
    for (std::size_t j : mem) {
      const T e = weight[j];
      for (std::size_t ch = 0; ch < c; ++ch) out[ci * c + ch] += tokens[j * c + ch] * e;
      weight[j] = e / den;
    }
    for (std::size_t ch = 0; ch < c; ++ch) out[ci * c + ch] /= den;
  }

  if (rec) {
    auto th = tokens.handle(), ph = p.handle(), oh = out.handle();
    Graph<T>::current()->record([th, ph, oh, c, members = std::move(members),
                                 weight = std::move(weight)] {
      for (std::size_t ci = 0; ci < members.size(); ++ci) {
        T gdoty = T(0);
        for (std::size_t ch = 0; ch < c; ++ch) gdoty += oh->grad[ci * c + ch] * oh->value[ci * c + ch];
        for (std::size_t j : members[ci]) {
          const T w = weight[j];
          if (th->needs_grad) {
            for (std::size_t ch = 0; ch < c; ++ch) th->grad[j * c + ch] += w * oh->grad[ci * c + ch];
          }
          if (ph->needs_grad) {
            T gdotx = T(0);
            for (std::size_t ch = 0; ch < c; ++ch) gdotx += oh->grad[ci * c + ch] * th->value[j * c + ch];
            ph->grad[j] += w * (gdotx - gdoty);
          }
        }
      }
    });
  }
  return out;
}

// F = softmax(Q K^T / sqrt(d_c) + P) V where P adds p_j to every logit whose
// key is token j (Eq. 5).
template <typename T>
Tensor<T> importance_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const Tensor<T>& p) {
  detail::require_ndim(q, 2, "importance_attention");
  detail::require_ndim(k, 2, "importance_attention");
  detail::require_ndim(v, 2, "importance_attention");
  if (q.extent(1) != k.extent(1)) {
    throw ShapeError("importance_attention: query width " + shape_to_string(q.shape()) +
                     " does not match key width " + shape_to_string(k.shape()));
  }
  if (v.extent(0) != k.extent(0)) {
    throw ShapeError("importance_attention: value rows " + shape_to_string(v.shape()) +
                     " do not match key rows " + shape_to_string(k.shape()));
  }
  if (p.numel() != k.extent(0)) {
    throw ShapeError("importance_attention: importance length " + std::to_string(p.numel()) +
                     " does not match " + std::to_string(k.extent(0)) + " keys");
  }
  const T inv_sqrt = T(1) / std::sqrt(T(q.extent(1)));
  Tensor<T> logits = scale(matmul(q, transpose(k)), inv_sqrt);
  Tensor<T> flat_p = p.ndim() == 1 ? p : reshape(p, {p.numel()});
  return matmul(softmax_rows(add_col_vector(logits, flat_p)), v);
}

namespace detail {

// e^{p}-weighted member means of raw coordinates, same stabilization and
// accumulation order as merge_tokens; value-only (coordinates carry no
// gradient path through hard cluster decisions).
template <typename T>
inline Tensor<T> merge_coords(const Tensor<T>& coords, const std::vector<std::size_t>& assignment,
                              const Tensor<T>& p, std::size_t m) {
  Tensor<T> out({m, 2});
  std::vector<std::vector<std::size_t>> members(m);
  for (std::size_t i = 0; i < assignment.size(); ++i) members[assignment[i]].push_back(i);
  for (std::size_t ci = 0; ci < m; ++ci) {
    const auto& mem = members[ci];
    T mx = p[mem[0]];
    for (std::size_t j : mem) mx = std::max(mx, p[j]);
    T den = T(0), r = T(0), c = T(0);
    for (std::size_t j : mem) {
      const T e = std::exp(p[j] - mx);
      den += e;
      r += coords[j * 2] * e;
      c += coords[j * 2 + 1] * e;
    }
    out[ci * 2] = r / den;
    out[ci * 2 + 1] = c / den;
  }
  return out;
}

}  // namespace detail

// Full DBTC downsampling step: encode coordinates, run density-peaks center
// selection with m = ceil(ratio * N), merge clusters with learned importance,
// add the center-token residual, then refine against the original tokens with
// importance-biased attention.
template <typename T>
std::pair<TokenSet<T>, ClusterResult<T>> cluster_downsample(const TokenSet<T>& ts, T tau,
                                                            std::size_t k, T ratio,
                                                            const PixelCoordEncoding<T>& pce,
                                                            const DbtcParams<T>& params,
                                                            bool symmetric_tau = false) {
  detail::check_token_set(ts, "cluster_downsample");
  if (!(ratio > T(0) && ratio <= T(1))) {
    throw ContractError("cluster_downsample: ratio must lie in (0, 1]");
  }
  const std::size_t n = ts.tokens.extent(0);
  const std::size_t m = static_cast<std::size_t>(std::ceil(ratio * static_cast<T>(n)));

  TokenSet<T> enc = ts;
  enc.coords = Tensor<T>({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    enc.coords[i * 2] = ts.coords[i * 2] * pce.scale[0] + pce.offset[0];
    enc.coords[i * 2 + 1] = ts.coords[i * 2 + 1] * pce.scale[1] + pce.offset[1];
  }

  ClusterResult<T> cr;
  if (n == 1) {
    cr.distance = Tensor<T>({1, 1});
    cr.density = Tensor<T>({1}, T(1));
    cr.separation = Tensor<T>({1});
    cr.score = Tensor<T>({1});
    cr.centers = {0};
    cr.assignment = {0};
  } else {
    cr.distance = dual_distance(enc, tau, symmetric_tau);
    const std::size_t k_eff = std::min(k, n - 1);
    cr.density = local_density(cr.distance, k_eff);
    cr.separation = separation_delta(cr.distance, cr.density);
    cr.score = Tensor<T>({n});
    for (std::size_t i = 0; i < n; ++i) cr.score[i] = cr.density[i] * cr.separation[i];
    cr.centers = select_centers(cr.score, m);
    cr.assignment = assign_clusters(cr.distance, cr.centers);
  }

  Tensor<T> p = reshape(affine(ts.tokens, params.p_weight, params.p_bias),
                        std::vector<std::size_t>{n});
  cr.merged = merge_tokens(ts.tokens, cr.assignment, p);

  Tensor<T> residual = add(cr.merged, gather_rows(ts.tokens, cr.centers));
  Tensor<T> refined = add(residual, importance_attention(residual, ts.tokens, ts.tokens, p));

  TokenSet<T> out;
  out.tokens = refined;
  out.coords = detail::merge_coords(ts.coords, cr.assignment, p, cr.centers.size());
  out.importance = Tensor<T>({cr.centers.size()});
  for (std::size_t ci = 0; ci < cr.centers.size(); ++ci) out.importance[ci] = p[cr.centers[ci]];
  out.grid_h = (ts.grid_h + 1) / 2;
  out.grid_w = (ts.grid_w + 1) / 2;
  return {std::move(out), std::move(cr)};
}

// Verification twin of the clustering path: naive quadratic loops and explicit
// insertion/selection sorts throughout, no shared helpers.
template <typename T>
ClusterResult<T> brute_force_oracle(const TokenSet<T>& ts, T tau, std::size_t k, std::size_t m,
                                    bool symmetric_tau = false) {
  detail::check_token_set(ts, "brute_force_oracle");
  const std::size_t n = ts.tokens.extent(0), c = ts.tokens.extent(1);
  if (n > 1024) throw ContractError("brute_force_oracle: N must be at most 1024");
  if (!(tau >= T(0) && tau <= T(1))) {
    throw ContractError("brute_force_oracle: tau must lie in [0, 1]");
  }
  if (m < 1 || m > n) throw ContractError("brute_force_oracle: invalid m");

  ClusterResult<T> cr;
  cr.distance = Tensor<T>({n, n});
  const auto& x = ts.tokens.values();
  const auto& y = ts.coords.values();
  const T sem_w = symmetric_tau ? tau : T(1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      T sem2 = T(0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T dv = x[i * c + ch] - x[j * c + ch];
        sem2 += dv * dv;
      }
      const T dr = y[i * 2] - y[j * 2];
      const T dc = y[i * 2 + 1] - y[j * 2 + 1];
      cr.distance[i * n + j] = sem_w * std::sqrt(sem2) + (T(1) - tau) * std::sqrt(dr * dr + dc * dc);
    }
  }

  cr.density = Tensor<T>({n});
  if (n == 1) {
    cr.density[0] = T(1);
  } else {
    const std::size_t kk = std::min(k, n - 1);
    if (kk < 1) throw ContractError("brute_force_oracle: k must be positive");
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<T> dist;
      std::vector<std::size_t> who;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        // insertion sort by (distance, index)
        const T dv = cr.distance[i * n + j];
        std::size_t pos = dist.size();
        while (pos > 0 && (dist[pos - 1] > dv || (dist[pos - 1] == dv && who[pos - 1] > j))) --pos;
        dist.insert(dist.begin() + static_cast<std::ptrdiff_t>(pos), dv);
        who.insert(who.begin() + static_cast<std::ptrdiff_t>(pos), j);
      }
      T sum = T(0);
      for (std::size_t r = 0; r < kk; ++r) sum += dist[r] * dist[r];
      cr.density[i] = std::exp(-(sum / T(kk)));
    }
  }

  cr.separation = Tensor<T>({n});
  for (std::size_t i = 0; i < n; ++i) {
    bool any = false;
    T best = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const bool j_denser =
          cr.density[j] > cr.density[i] || (cr.density[j] == cr.density[i] && j < i);
      if (!j_denser) continue;
      if (!any || cr.distance[i * n + j] < best) best = cr.distance[i * n + j];
      any = true;
    }
    if (!any) {
      best = T(0);
      for (std::size_t j = 0; j < n; ++j) {
        if (j != i && cr.distance[i * n + j] > best) best = cr.distance[i * n + j];
      }
    }
    cr.separation[i] = best;
  }

  cr.score = Tensor<T>({n});
  for (std::size_t i = 0; i < n; ++i) cr.score[i] = cr.density[i] * cr.separation[i];

  // repeated selection of the best unchosen (score, lower index wins ties)
  std::vector<bool> taken(n, false);
  for (std::size_t r = 0; r < m; ++r) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      if (best == n || cr.score[i] > cr.score[best]) best = i;
    }
    taken[best] = true;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (taken[i]) cr.centers.push_back(i);
  }

  cr.assignment.assign(n, m);
  for (std::size_t ci = 0; ci < m; ++ci) {
    if (cr.assignment[cr.centers[ci]] == m) cr.assignment[cr.centers[ci]] = ci;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (cr.assignment[i] != m) continue;
    std::size_t best = 0;
    for (std::size_t ci = 1; ci < m; ++ci) {
      if (cr.distance[i * n + cr.centers[ci]] < cr.distance[i * n + cr.centers[best]]) best = ci;
    }
    cr.assignment[i] = best;
  }

  cr.merged = Tensor<T>({m, c});
  for (std::size_t ci = 0; ci < m; ++ci) {
    bool first = true;
    T mx = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      if (cr.assignment[j] != ci) continue;
      if (first || ts.importance[j] > mx) mx = ts.importance[j];
      first = false;
    }
    T den = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      if (cr.assignment[j] != ci) continue;
      const T e = std::exp(ts.importance[j] - mx);
      den += e;
      for (std::size_t ch = 0; ch < c; ++ch) cr.merged[ci * c + ch] += ts.tokens[j * c + ch] * e;
    }
    for (std::size_t ch = 0; ch < c; ++ch) cr.merged[ci * c + ch] /= den;
  }
  return cr;
}

}  // namespace efnet
