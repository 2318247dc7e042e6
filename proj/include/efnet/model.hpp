#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "efnet/common.hpp"
#include "efnet/dbtc.hpp"
#include "efnet/mfad.hpp"
#include "efnet/mif.hpp"
#include "efnet/rng.hpp"
#include "efnet/serialize.hpp"
#include "efnet/tensor.hpp"

namespace efnet {

enum class FusionMode { kMif, kAdd, kCat };
enum class PositionMode { kNone, kPe, kPce };
enum class DecoderMode { kEuclid, kMlp };
enum class DownsampleMode { kDbtc, kPool };

struct ModelConfig {
  std::array<std::size_t, 4> channels{16, 32, 64, 128};
  std::array<std::size_t, 4> depth{1, 1, 1, 1};
  std::size_t heads = 2;
  std::size_t window = 8;
  std::array<double, 3> tau{0.3, 0.7, 1.0};
  std::size_t knn_k = 5;
  double ratio = 0.25;
  FusionMode fusion = FusionMode::kMif;
  PositionMode position = PositionMode::kPce;
  DecoderMode decoder = DecoderMode::kEuclid;
  DownsampleMode downsample = DownsampleMode::kDbtc;
  std::size_t classes = 3;
  std::size_t resolution = 32;
  bool symmetric_tau = false;

  void validate() const {
    for (std::size_t i = 0; i < 4; ++i) {
      if (channels[i] < 2) throw ConfigError("channels: stage " + std::to_string(i + 1) + " must be >= 2");
      if (heads == 0 || channels[i] % heads != 0) {
        throw ConfigError("heads: must be >= 1 and divide every stage width (stage " +
                          std::to_string(i + 1) + " has " + std::to_string(channels[i]) + ")");
      }
      if (depth[i] < 1) throw ConfigError("depth: stage " + std::to_string(i + 1) + " must be >= 1");
    }
    if (window < 1) throw ConfigError("window: must be >= 1");
    for (double t : tau) {
      if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("tau: values must lie in [0, 1]");
    }
    if (knn_k < 1) throw ConfigError("knn_k: must be >= 1");
    if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("ratio: must lie in (0, 1]");
    if (classes < 2) throw ConfigError("classes: must be >= 2");
    if (resolution < 32 || resolution % 32 != 0) {
      throw ConfigError("resolution: must be a positive multiple of 32 so every stage grid is even");
    }
  }
};

template <typename T>
struct Model {
  ModelConfig cfg;
  std::vector<std::pair<std::string, Tensor<T>>> params;  // registration order
  std::map<std::string, Tensor<T>> index;

  Tensor<T>& p(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw ContractError("model: no parameter named '" + name + "'");
    return it->second;
  }
  const Tensor<T>& p(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw ContractError("model: no parameter named '" + name + "'");
    return it->second;
  }

  void zero_grads() {
    for (auto& [name, t] : params) t.zero_grad();
  }
};

namespace detail {

template <typename T>
class ParamBuilder {
 public:
  ParamBuilder(Model<T>& m, Rng& rng) : m_(m), rng_(rng) {}

  Tensor<T> normal(const std::string& name, std::vector<std::size_t> shape, T std_dev) {
    Tensor<T> t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng_.normal()) * std_dev;
    return reg(name, std::move(t));
  }

  Tensor<T> constant(const std::string& name, std::vector<std::size_t> shape, T v) {
    return reg(name, Tensor<T>(std::move(shape), v));
  }

  // Identity on the leading square block, zeros elsewhere; optional noise.
  Tensor<T> identity(const std::string& name, std::size_t rows, std::size_t cols, T noise_std) {
    Tensor<T> t({rows, cols});
    if (noise_std != T(0)) {
      for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng_.normal()) * noise_std;
    }
    for (std::size_t i = 0; i < std::min(rows, cols); ++i) t[i * cols + i] += T(1);
    return reg(name, std::move(t));
  }

 private:
  Tensor<T> reg(const std::string& name, Tensor<T> t) {
    t.set_requires_grad(true);
    m_.params.emplace_back(name, t);
    m_.index.emplace(name, t);
    return t;
  }

  Model<T>& m_;
  Rng& rng_;
};

// Small-scale init (std 0.02) everywhere: with AdamW's normalized updates the
// near-linear early regime trains measurably faster here than fan-in scaling.
// Residual branches keep nonzero init so every block parameter receives
// gradient from step one.
template <typename T>
void build_block(ParamBuilder<T>& b, const std::string& prefix, std::size_t c) {
  const T s = T(0.02);
  b.constant(prefix + ".ln1.g", {c}, T(1));
  b.constant(prefix + ".ln1.b", {c}, T(0));
  b.normal(prefix + ".attn.wq", {c, c}, s);
  b.constant(prefix + ".attn.bq", {c}, T(0));
  b.normal(prefix + ".attn.wk", {c, c}, s);  // no key bias: softmax ignores per-query shifts
  b.normal(prefix + ".attn.wv", {c, c}, s);
  b.constant(prefix + ".attn.bv", {c}, T(0));
  b.normal(prefix + ".attn.wo", {c, c}, s);
  b.constant(prefix + ".attn.bo", {c}, T(0));
  b.constant(prefix + ".ln2.g", {c}, T(1));
  b.constant(prefix + ".ln2.b", {c}, T(0));
  b.normal(prefix + ".mlp.w1", {c, 2 * c}, s);
  b.constant(prefix + ".mlp.b1", {2 * c}, T(0));
  b.normal(prefix + ".mlp.w2", {2 * c, c}, s);
  b.constant(prefix + ".mlp.b2", {c}, T(0));
}

}  // namespace detail

template <typename T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model<T> m;
  m.cfg = cfg;
  Rng rng(seed);
  detail::ParamBuilder<T> b(m, rng);
  const T s = T(0.02);
  const auto& ch = cfg.channels;

  b.normal("embed.rgb.w", {48, ch[0]}, s);
  b.constant("embed.rgb.b", {ch[0]}, T(0));
  b.normal("embed.thm.w", {48, ch[0]}, s);
  b.constant("embed.thm.b", {ch[0]}, T(0));

  for (std::size_t i = 0; i < cfg.depth[0]; ++i) {
    detail::build_block(b, "stage1.rgb.b" + std::to_string(i), ch[0]);
    detail::build_block(b, "stage1.thm.b" + std::to_string(i), ch[0]);
  }

  if (cfg.fusion == FusionMode::kMif) {
    const std::size_t hidden = std::max<std::size_t>(1, ch[0] / 2);
    b.normal("mif.gate.w1", {3 * ch[0], hidden}, s);
    b.constant("mif.gate.b1", {hidden}, T(0));
    b.constant("mif.gate.w2", {hidden, ch[0]}, T(0));
    b.constant("mif.gate.b2", {ch[0]}, T(0));
  } else if (cfg.fusion == FusionMode::kCat) {
    Tensor<T> w({2 * ch[0], ch[0]});
    for (std::size_t j = 0; j < ch[0]; ++j) {
      w[j * ch[0] + j] = T(0.5);
      w[(ch[0] + j) * ch[0] + j] = T(0.5);
    }
    w.set_requires_grad(true);
    m.params.emplace_back("fuse.cat.w", w);
    m.index.emplace("fuse.cat.w", w);
    b.constant("fuse.cat.b", {ch[0]}, T(0));
  }

  for (std::size_t stage = 2; stage <= 4; ++stage) {
    const std::size_t si = stage - 2;  // downsample step index 0..2
    const std::size_t c_in = ch[stage - 2], c_out = ch[stage - 1];
    const std::string ds = "dbtc" + std::to_string(si + 1);
    if (stage >= 3) {
      const std::size_t c_prev = ch[stage - 3], c_cur = ch[stage - 2];
      b.identity("bridge" + std::to_string(stage) + ".w", c_prev, c_cur, T(0));
      b.constant("bridge" + std::to_string(stage) + ".b", {c_cur}, T(0));
    }
    if (cfg.downsample == DownsampleMode::kDbtc) {
      b.constant(ds + ".p.w", {c_in, 1}, T(0));
      b.constant(ds + ".p.b", {1}, T(0));
      if (cfg.position == PositionMode::kPce) {
        b.constant(ds + ".pce.scale", {2}, T(1));
        b.constant(ds + ".pce.offset", {2}, T(0));
      }
    }
    b.identity("proj" + std::to_string(si + 1) + ".w", c_in, c_out, s);
    b.constant("proj" + std::to_string(si + 1) + ".b", {c_out}, T(0));
    for (std::size_t i = 0; i < cfg.depth[stage - 1]; ++i) {
      detail::build_block(b, "stage" + std::to_string(stage) + ".b" + std::to_string(i), c_out);
    }
  }

  const std::size_t cf = ch[0] + ch[1] + ch[2] + ch[3];
  if (cfg.decoder == DecoderMode::kEuclid) {
    b.normal("decoder.class_tokens", {cfg.classes, cf}, s);
  } else {
    const std::size_t hidden = std::max<std::size_t>(cfg.classes, cf / 2);
    b.normal("decoder.mlp.w1", {cf, hidden}, s);
    b.constant("decoder.mlp.b1", {hidden}, T(0));
    b.normal("decoder.mlp.w2", {hidden, cfg.classes}, s);
    b.constant("decoder.mlp.b2", {cfg.classes}, T(0));
  }
  return m;
}

template <typename T>
std::size_t count_params(const Model<T>& m) {
  std::size_t n = 0;
  for (const auto& [name, t] : m.params) n += t.numel();
  return n;
}

// Parameters expected to carry an all-zero gradient after one backward pass,
// with the structural reason.
template <typename T>
std::vector<std::pair<std::string, std::string>> expected_zero_grad_params(const Model<T>& m) {
  std::vector<std::pair<std::string, std::string>> out;
  if (m.cfg.downsample == DownsampleMode::kDbtc && m.cfg.position == PositionMode::kPce) {
    for (std::size_t sidx = 1; sidx <= 3; ++sidx) {
      const std::string ds = "dbtc" + std::to_string(sidx);
      const std::string why =
          "coordinates only influence discrete cluster decisions; no continuous gradient path";
      out.emplace_back(ds + ".pce.scale", why);
      out.emplace_back(ds + ".pce.offset", why);
    }
  }
  if (m.cfg.fusion == FusionMode::kMif) {
    const std::string why =
        "blocked at initialization by the zero-initialized gate output layer; live after the "
        "first optimizer step";
    out.emplace_back("mif.gate.w1", why);
    out.emplace_back("mif.gate.b1", why);
  }
  if (m.cfg.resolution / 32 == 1) {
    const std::string why = "stage 4 holds a single token; one-logit softmax is constant";
    for (std::size_t i = 0; i < m.cfg.depth[3]; ++i) {
      const std::string prefix = "stage4.b" + std::to_string(i) + ".attn.";
      out.emplace_back(prefix + "wq", why);
      out.emplace_back(prefix + "bq", why);
      out.emplace_back(prefix + "wk", why);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward pass

template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, std::size_t h, std::size_t w) {
  return reshape(transpose(tokens), {tokens.extent(1), h, w});
}

template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& f) {
  return transpose(reshape(f, {f.extent(0), f.extent(1) * f.extent(2)}));
}

// prev pooled 2x2, projected to cur's width, added elementwise.
template <typename T>
Tensor<T> stage_bridge(const Tensor<T>& prev, const Tensor<T>& cur, const Tensor<T>& proj_w,
                       const Tensor<T>& proj_b) {
  detail::require_ndim(prev, 3, "stage_bridge");
  detail::require_ndim(cur, 3, "stage_bridge");
  if (prev.extent(1) != 2 * cur.extent(1) || prev.extent(2) != 2 * cur.extent(2)) {
    throw ShapeError("stage_bridge: prev " + shape_to_string(prev.shape()) +
                     " must be exactly twice cur " + shape_to_string(cur.shape()));
  }
  if (proj_w.ndim() != 2 || proj_w.extent(0) != prev.extent(0) ||
      proj_w.extent(1) != cur.extent(0)) {
    throw ShapeError("stage_bridge: projection " + shape_to_string(proj_w.shape()) +
                     " must map " + std::to_string(prev.extent(0)) + " -> " +
                     std::to_string(cur.extent(0)) + " channels");
  }
  Tensor<T> pooled = mean_pool2x2(prev);
  Tensor<T> proj = affine(map_to_tokens(pooled), proj_w, proj_b);
  return add(cur, tokens_to_map(proj, cur.extent(1), cur.extent(2)));
}

namespace detail {

// Cell-center coordinates of a g x g grid, normalized to [0, 1].
template <typename T>
Tensor<T> grid_coords(std::size_t g) {
  Tensor<T> c({g * g, 2});
  for (std::size_t r = 0; r < g; ++r)
    for (std::size_t col = 0; col < g; ++col) {
      c[(r * g + col) * 2] = (T(r) + T(0.5)) / T(g);
      c[(r * g + col) * 2 + 1] = (T(col) + T(0.5)) / T(g);
    }
  return c;
}

// Fixed 2-D sinusoidal table: first half of the channels encodes the row
// index, the second half the column index.
template <typename T>
Tensor<T> sin_pos_table(std::size_t g, std::size_t c) {
  Tensor<T> pe({g * g, c});
  const std::size_t half = c / 2;
  for (std::size_t r = 0; r < g; ++r)
    for (std::size_t col = 0; col < g; ++col) {
      const std::size_t row_i = r * g + col;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const bool row_axis = ch < half;
        const std::size_t local = row_axis ? ch : ch - half;
        const std::size_t span = row_axis ? half : c - half;
        const T pos = T(row_axis ? r : col);
        const T freq = std::pow(T(10000), -T(2 * (local / 2)) / T(span));
        pe[row_i * c + ch] = (local % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
      }
    }
  return pe;
}

template <typename T>
Tensor<T> block_forward(Model<T>& m, const std::string& prefix, const Tensor<T>& x) {
  const std::size_t c = x.extent(1), heads = m.cfg.heads, hd = c / heads;
  Tensor<T> h1 = layer_norm(x, m.p(prefix + ".ln1.g"), m.p(prefix + ".ln1.b"));
  Tensor<T> q = affine(h1, m.p(prefix + ".attn.wq"), m.p(prefix + ".attn.bq"));
  Tensor<T> k = matmul(h1, m.p(prefix + ".attn.wk"));
  Tensor<T> v = affine(h1, m.p(prefix + ".attn.wv"), m.p(prefix + ".attn.bv"));
  const T inv_sqrt = T(1) / std::sqrt(T(hd));
  Tensor<T> heads_out;
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor<T> qh = slice_cols(q, h * hd, (h + 1) * hd);
    Tensor<T> kh = slice_cols(k, h * hd, (h + 1) * hd);
    Tensor<T> vh = slice_cols(v, h * hd, (h + 1) * hd);
    Tensor<T> oh = matmul(softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt)), vh);
    heads_out = h == 0 ? oh : concat_cols(heads_out, oh);
  }
  Tensor<T> attn = affine(heads_out, m.p(prefix + ".attn.wo"), m.p(prefix + ".attn.bo"));
  Tensor<T> x1 = add(x, attn);
  Tensor<T> h2 = layer_norm(x1, m.p(prefix + ".ln2.g"), m.p(prefix + ".ln2.b"));
  Tensor<T> mlp = affine(relu(affine(h2, m.p(prefix + ".mlp.w1"), m.p(prefix + ".mlp.b1"))),
                         m.p(prefix + ".mlp.w2"), m.p(prefix + ".mlp.b2"));
  return add(x1, mlp);
}

// One downsampling step on a g x g token grid; returns tokens re-gridded to
// the ceil-half grid, where each cell takes the token of the cluster that
// absorbed the cell's top-left source cell.
template <typename T>
Tensor<T> downsample_step(Model<T>& m, std::size_t sidx, const Tensor<T>& tokens, std::size_t g,
                          T tau, ClusterResult<T>* cluster_out) {
  if (m.cfg.downsample == DownsampleMode::kPool) {
    return map_to_tokens(mean_pool2x2(tokens_to_map(tokens, g, g)));
  }
  const std::string ds = "dbtc" + std::to_string(sidx);
  TokenSet<T> ts;
  ts.tokens = tokens;
  ts.coords = grid_coords<T>(g);
  ts.importance = Tensor<T>({tokens.extent(0)});
  ts.grid_h = g;
  ts.grid_w = g;
  PixelCoordEncoding<T> pce;
  if (m.cfg.position == PositionMode::kPce) {
    pce.scale = m.p(ds + ".pce.scale");
    pce.offset = m.p(ds + ".pce.offset");
  } else {
    pce = PixelCoordEncoding<T>::identity();
  }
  DbtcParams<T> dp{m.p(ds + ".p.w"), m.p(ds + ".p.b")};
  auto [out, cr] = cluster_downsample(ts, tau, m.cfg.knn_k, static_cast<T>(m.cfg.ratio), pce, dp,
                                      m.cfg.symmetric_tau);
  const std::size_t g2 = (g + 1) / 2;
  std::vector<std::size_t> idx(g2 * g2);
  for (std::size_t r = 0; r < g2; ++r)
    for (std::size_t c = 0; c < g2; ++c) {
      const std::size_t fr = std::min(2 * r, g - 1), fc = std::min(2 * c, g - 1);
      idx[r * g2 + c] = cr.assignment[fr * g + fc];
    }
  if (cluster_out) *cluster_out = std::move(cr);
  return gather_rows(out.tokens, idx);
}

}  // namespace detail

template <typename T>
struct ForwardTrace {
  std::vector<ClusterResult<T>> clusters;  // one per DBTC step (empty for pool)
  std::vector<std::size_t> stage_tokens;   // token count entering each stage
};

template <typename T>
SegPrediction<T> forward(Model<T>& m, const Tensor<T>& rgb, const Tensor<T>& thermal,
                         ForwardTrace<T>* trace = nullptr) {
  const std::size_t res = m.cfg.resolution;
  if (rgb.ndim() != 3 || rgb.extent(0) != 3 || rgb.extent(1) != res || rgb.extent(2) != res) {
    throw ShapeError("forward: rgb must be [3x" + std::to_string(res) + "x" +
                     std::to_string(res) + "], got " + shape_to_string(rgb.shape()));
  }
  if (thermal.ndim() != 3 || thermal.extent(0) != 1 || thermal.extent(1) != res ||
      thermal.extent(2) != res) {
    throw ShapeError("forward: thermal must be [1x" + std::to_string(res) + "x" +
                     std::to_string(res) + "], got " + shape_to_string(thermal.shape()));
  }
  const auto& ch = m.cfg.channels;
  const std::size_t g1 = res / 4;

  Tensor<T> thm_flat = reshape(thermal, {std::size_t(1), res * res});
  Tensor<T> thm3 = reshape(concat_rows_list<T>({thm_flat, thm_flat, thm_flat}), {3, res, res});

  Tensor<T> xr = affine(im2patch(rgb, 4), m.p("embed.rgb.w"), m.p("embed.rgb.b"));
  Tensor<T> xt = affine(im2patch(thm3, 4), m.p("embed.thm.w"), m.p("embed.thm.b"));
  if (m.cfg.position == PositionMode::kPe) {
    Tensor<T> pe = detail::sin_pos_table<T>(g1, ch[0]);
    xr = add(xr, pe);
    xt = add(xt, pe);
  }
  for (std::size_t i = 0; i < m.cfg.depth[0]; ++i) {
    xr = detail::block_forward(m, "stage1.rgb.b" + std::to_string(i), xr);
    xt = detail::block_forward(m, "stage1.thm.b" + std::to_string(i), xt);
  }

  Tensor<T> fused;
  if (m.cfg.fusion == FusionMode::kMif) {
    ChannelGate<T> gate{m.p("mif.gate.w1"), m.p("mif.gate.b1"), m.p("mif.gate.w2"),
                        m.p("mif.gate.b2")};
    fused = map_to_tokens(
        mif_fuse(tokens_to_map(xr, g1, g1), tokens_to_map(xt, g1, g1), m.cfg.window, gate));
  } else if (m.cfg.fusion == FusionMode::kAdd) {
    fused = add(xr, xt);
  } else {
    fused = affine(concat_cols(xr, xt), m.p("fuse.cat.w"), m.p("fuse.cat.b"));
  }

  if (trace) trace->stage_tokens.push_back(fused.extent(0));

  std::vector<Tensor<T>> maps(4);
  maps[0] = tokens_to_map(fused, g1, g1);

  Tensor<T> cur = fused;
  std::size_t g = g1;
  for (std::size_t stage = 2; stage <= 4; ++stage) {
    const std::size_t sidx = stage - 1;  // stage index 1..3 into tau/proj names
    Tensor<T> bridged = cur;
    if (stage >= 3) {
      Tensor<T> bmap = stage_bridge(maps[stage - 3], tokens_to_map(cur, g, g),
                                    m.p("bridge" + std::to_string(stage) + ".w"),
                                    m.p("bridge" + std::to_string(stage) + ".b"));
      bridged = map_to_tokens(bmap);
    }
    ClusterResult<T> cr;
    Tensor<T> down = detail::downsample_step(m, sidx, bridged, g,
                                             static_cast<T>(m.cfg.tau[sidx - 1]),
                                             trace ? &cr : nullptr);
    if (trace) trace->clusters.push_back(std::move(cr));
    g = (g + 1) / 2;
    Tensor<T> x = affine(down, m.p("proj" + std::to_string(sidx) + ".w"),
                         m.p("proj" + std::to_string(sidx) + ".b"));
    for (std::size_t i = 0; i < m.cfg.depth[stage - 1]; ++i) {
      x = detail::block_forward(m, "stage" + std::to_string(stage) + ".b" + std::to_string(i), x);
    }
    if (trace) trace->stage_tokens.push_back(x.extent(0));
    maps[stage - 1] = tokens_to_map(x, g, g);
    cur = x;
  }

  Tensor<T> xf = aggregate_multiscale(maps);
  SegPrediction<T> pred;
  if (m.cfg.decoder == DecoderMode::kEuclid) {
    ClassTokens<T> ct{m.p("decoder.class_tokens")};
    pred = predict(class_distance(xf, ct));
  } else {
    Tensor<T> tok = map_to_tokens(xf);
    Tensor<T> logits = affine(relu(affine(tok, m.p("decoder.mlp.w1"), m.p("decoder.mlp.b1"))),
                              m.p("decoder.mlp.w2"), m.p("decoder.mlp.b2"));
    pred.probs = reshape(transpose(softmax_rows(logits)), {m.cfg.classes, g1, g1});
    pred.distances = reshape(transpose(scale(logits, T(-1))), {m.cfg.classes, g1, g1});
  }

  // half-pixel sampling keeps each prediction cell over its own footprint
  Tensor<T> up = upsample_bilinear_centers(pred.probs, res, res);
  Tensor<T> renorm = div_by_colsum(reshape(up, {m.cfg.classes, res * res}));
  pred.probs_full = reshape(renorm, {m.cfg.classes, res, res});
  return pred;
}

// ---------------------------------------------------------------------------
// Config text round-trip

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <typename A>
std::string join_list(const A& arr) {
  std::ostringstream os;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    if (i) os << ',';
    os << arr[i];
  }
  return os.str();
}

}  // namespace detail

inline std::string config_to_text(const ModelConfig& cfg) {
  std::ostringstream os;
  os << "channels = " << detail::join_list(cfg.channels) << '\n';
  os << "depth = " << detail::join_list(cfg.depth) << '\n';
  os << "heads = " << cfg.heads << '\n';
  os << "window = " << cfg.window << '\n';
  os << "tau = " << detail::fmt_double(cfg.tau[0]) << ',' << detail::fmt_double(cfg.tau[1]) << ','
     << detail::fmt_double(cfg.tau[2]) << '\n';
  os << "knn_k = " << cfg.knn_k << '\n';
  os << "ratio = " << detail::fmt_double(cfg.ratio) << '\n';
  os << "fusion = "
     << (cfg.fusion == FusionMode::kMif ? "mif" : cfg.fusion == FusionMode::kAdd ? "add" : "cat")
     << '\n';
  os << "position = "
     << (cfg.position == PositionMode::kNone ? "none"
                                             : cfg.position == PositionMode::kPe ? "pe" : "pce")
     << '\n';
  os << "decoder = " << (cfg.decoder == DecoderMode::kEuclid ? "euclid" : "mlp") << '\n';
  os << "downsample = " << (cfg.downsample == DownsampleMode::kDbtc ? "dbtc" : "pool") << '\n';
  os << "classes = " << cfg.classes << '\n';
  os << "resolution = " << cfg.resolution << '\n';
  os << "symmetric_tau = " << (cfg.symmetric_tau ? "true" : "false") << '\n';
  return os.str();
}

namespace detail {

inline std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::size_t parse_size(const std::string& key, const std::string& s) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(s, &pos);
    if (pos != s.size() || v < 0) throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& s) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + s + "'");
  }
}

}  // namespace detail

// Applies one `key = value` pair; returns false for keys this module does not
// own (the caller decides whether that is an error).
inline bool apply_model_config_kv(ModelConfig& cfg, const std::string& key,
                                  const std::string& value) {
  using detail::parse_double;
  using detail::parse_size;
  if (key == "channels" || key == "depth") {
    auto parts = detail::split_csv(value);
    if (parts.size() != 4) throw ConfigError(key + ": expected 4 comma-separated values");
    for (std::size_t i = 0; i < 4; ++i) {
      (key == "channels" ? cfg.channels[i] : cfg.depth[i]) = parse_size(key, parts[i]);
    }
  } else if (key == "heads") {
    cfg.heads = parse_size(key, value);
  } else if (key == "window") {
    cfg.window = parse_size(key, value);
  } else if (key == "tau") {
    auto parts = detail::split_csv(value);
    if (parts.size() != 3) throw ConfigError("tau: expected 3 comma-separated values");
    for (std::size_t i = 0; i < 3; ++i) cfg.tau[i] = parse_double(key, parts[i]);
  } else if (key == "knn_k") {
    cfg.knn_k = parse_size(key, value);
  } else if (key == "ratio") {
    cfg.ratio = parse_double(key, value);
  } else if (key == "fusion") {
    if (value == "mif") cfg.fusion = FusionMode::kMif;
    else if (value == "add") cfg.fusion = FusionMode::kAdd;
    else if (value == "cat") cfg.fusion = FusionMode::kCat;
    else throw ConfigError("fusion: expected mif|add|cat, got '" + value + "'");
  } else if (key == "position") {
    if (value == "none") cfg.position = PositionMode::kNone;
    else if (value == "pe") cfg.position = PositionMode::kPe;
    else if (value == "pce") cfg.position = PositionMode::kPce;
    else throw ConfigError("position: expected none|pe|pce, got '" + value + "'");
  } else if (key == "decoder") {
    if (value == "euclid") cfg.decoder = DecoderMode::kEuclid;
    else if (value == "mlp") cfg.decoder = DecoderMode::kMlp;
    else throw ConfigError("decoder: expected euclid|mlp, got '" + value + "'");
  } else if (key == "downsample") {
    if (value == "dbtc") cfg.downsample = DownsampleMode::kDbtc;
    else if (value == "pool") cfg.downsample = DownsampleMode::kPool;
    else throw ConfigError("downsample: expected dbtc|pool, got '" + value + "'");
  } else if (key == "classes") {
    cfg.classes = parse_size(key, value);
  } else if (key == "resolution") {
    cfg.resolution = parse_size(key, value);
  } else if (key == "symmetric_tau") {
    if (value == "true") cfg.symmetric_tau = true;
    else if (value == "false") cfg.symmetric_tau = false;
    else throw ConfigError("symmetric_tau: expected true|false, got '" + value + "'");
  } else {
    return false;
  }
  return true;
}

// Parses `key = value` lines with '#' comments. extra_kv handles keys beyond
// the model's own; returning false there rejects the key.
inline void parse_config_text(
    const std::string& text, ModelConfig& cfg,
    const std::function<bool(const std::string&, const std::string&)>& extra_kv = {}) {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const char* ws = " \t\r\n";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
  };
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected `key = value`, got '" +
                        line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (apply_model_config_kv(cfg, key, value)) continue;
    if (extra_kv && extra_kv(key, value)) continue;
    throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

template <typename T>
void save_checkpoint(const Model<T>& m, const std::string& path) {
  std::vector<NamedTensor> out;
  const std::string cfg_text = config_to_text(m.cfg);
  NamedTensor cfg_t;
  cfg_t.name = "__config__";
  cfg_t.shape = {cfg_text.size()};
  cfg_t.data.reserve(cfg_text.size());
  for (unsigned char byte : cfg_text) cfg_t.data.push_back(static_cast<float>(byte));
  out.push_back(std::move(cfg_t));
  for (const auto& [name, t] : m.params) {
    NamedTensor nt;
    nt.name = name;
    nt.shape = t.shape();
    nt.data.reserve(t.numel());
    for (std::size_t i = 0; i < t.numel(); ++i) nt.data.push_back(static_cast<float>(t[i]));
    out.push_back(std::move(nt));
  }
  write_container(path, out);
}

// Copies parameters by name into an existing model; any name or shape
// disagreement rejects the file.
template <typename T>
void load_params(Model<T>& m, const std::vector<NamedTensor>& tensors, const std::string& path) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) {
    if (t.name == "__config__") continue;
    by_name.emplace(t.name, &t);
  }
  if (by_name.size() != m.params.size()) {
    throw FormatError(path + ": checkpoint holds " + std::to_string(by_name.size()) +
                      " tensors but the model has " + std::to_string(m.params.size()));
  }
  for (auto& [name, t] : m.params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw FormatError(path + ": checkpoint is missing tensor '" + name + "'");
    }
    if (it->second->shape != t.shape()) {
      throw FormatError(path + ": tensor '" + name + "' has shape " +
                        shape_to_string(it->second->shape) + ", model expects " +
                        shape_to_string(t.shape()));
    }
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(it->second->data[i]);
  }
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
  const std::vector<NamedTensor> tensors = read_container(path);
  const NamedTensor* cfg_t = nullptr;
  for (const auto& t : tensors) {
    if (t.name == "__config__") cfg_t = &t;
  }
  if (!cfg_t) throw FormatError(path + ": checkpoint lacks the embedded __config__ record");
  std::string text;
  text.reserve(cfg_t->data.size());
  for (float v : cfg_t->data) text.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  ModelConfig cfg;
  parse_config_text(text, cfg);
  Model<T> m = build_model<T>(cfg, 0);
  load_params(m, tensors, path);
  return m;
}

}  // namespace efnet
