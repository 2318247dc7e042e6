#pragma once

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "efnet/common.hpp"
#include "efnet/tensor.hpp"

namespace efnet {

// A feature map cut into non-overlapping w x w tiles, zero-padded on the
// bottom/right edges to make the extents divisible by w.
template <typename T>
struct WindowGrid {
  Tensor<T> windows;  // [n x w^2 x C]
  std::size_t src_h = 0, src_w = 0;  // original (unpadded) extents
  std::size_t window = 0;
};

// Statistics-to-gate perceptron: flattened per-channel (mean, max, variance)
// through 3C -> hidden -> C with a sigmoid squash.
template <typename T>
struct ChannelGate {
  Tensor<T> w1;  // [3C x hidden]
  Tensor<T> b1;  // [hidden]
  Tensor<T> w2;  // [hidden x C]  (zero-initialized)
  Tensor<T> b2;  // [C]           (zero-initialized)
};

template <typename T>
WindowGrid<T> window_partition(const Tensor<T>& f, std::size_t w) {
  detail::require_ndim(f, 3, "window_partition");
  if (w < 1) throw ContractError("window_partition: window size must be >= 1");
  const std::size_t c = f.extent(0), h = f.extent(1), wid = f.extent(2);
  const std::size_t ph = (h + w - 1) / w * w, pw = (wid + w - 1) / w * w;
  const std::size_t th = ph / w, tw = pw / w, n = th * tw, pix = w * w;

  bool rec = detail::tracing<T>({&f});
  WindowGrid<T> g;
  g.windows = detail::traced_output<T>({n, pix, c}, rec);
  g.src_h = h;
  g.src_w = wid;
  g.window = w;
  for (std::size_t ty = 0; ty < th; ++ty)
    for (std::size_t tx = 0; tx < tw; ++tx) {
      const std::size_t win = ty * tw + tx;
      for (std::size_t dy = 0; dy < w; ++dy)
        for (std::size_t dx = 0; dx < w; ++dx) {
          const std::size_t y = ty * w + dy, x = tx * w + dx;
          if (y >= h || x >= wid) continue;  // padded cells stay zero
          for (std::size_t ci = 0; ci < c; ++ci)
            g.windows[(win * pix + dy * w + dx) * c + ci] = f.at(ci, y, x);
        }
    }
  if (rec) {
    auto fh = f.handle(), oh = g.windows.handle();
    Graph<T>::current()->record([fh, oh, c, h, wid, w, th, tw, pix] {
      for (std::size_t ty = 0; ty < th; ++ty)
        for (std::size_t tx = 0; tx < tw; ++tx) {
          const std::size_t win = ty * tw + tx;
          for (std::size_t dy = 0; dy < w; ++dy)
            for (std::size_t dx = 0; dx < w; ++dx) {
              const std::size_t y = ty * w + dy, x = tx * w + dx;
              if (y >= h || x >= wid) continue;
              for (std::size_t ci = 0; ci < c; ++ci)
                fh->grad[(ci * h + y) * wid + x] += oh->grad[(win * pix + dy * w + dx) * c + ci];
            }
        }
    });
  }
  return g;
}

template <typename T>
Tensor<T> window_merge(const WindowGrid<T>& g) {
  detail::require_ndim(g.windows, 3, "window_merge");
  const std::size_t w = g.window;
  if (w < 1) throw ContractError("window_merge: window size metadata missing");
  const std::size_t h = g.src_h, wid = g.src_w;
  const std::size_t ph = (h + w - 1) / w * w, pw = (wid + w - 1) / w * w;
  const std::size_t th = ph / w, tw = pw / w, pix = w * w;
  const std::size_t c = g.windows.extent(2);
  if (g.windows.extent(0) != th * tw || g.windows.extent(1) != pix) {
    throw ContractError("window_merge: grid " + shape_to_string(g.windows.shape()) +
                        " inconsistent with extents " + std::to_string(h) + "x" +
                        std::to_string(wid) + ", window " + std::to_string(w));
  }
  bool rec = detail::tracing<T>({&g.windows});
  Tensor<T> out = detail::traced_output<T>({c, h, wid}, rec);
  for (std::size_t ty = 0; ty < th; ++ty)
    for (std::size_t tx = 0; tx < tw; ++tx) {
      const std::size_t win = ty * tw + tx;
      for (std::size_t dy = 0; dy < w; ++dy)
        for (std::size_t dx = 0; dx < w; ++dx) {
          const std::size_t y = ty * w + dy, x = tx * w + dx;
          if (y >= h || x >= wid) continue;
          for (std::size_t ci = 0; ci < c; ++ci)
            out.at(ci, y, x) = g.windows[(win * pix + dy * w + dx) * c + ci];
        }
    }
  if (rec) {
    auto gh = g.windows.handle(), oh = out.handle();
    Graph<T>::current()->record([gh, oh, c, h, wid, w, th, tw, pix] {
      for (std::size_t ty = 0; ty < th; ++ty)
        for (std::size_t tx = 0; tx < tw; ++tx) {
          const std::size_t win = ty * tw + tx;
          for (std::size_t dy = 0; dy < w; ++dy)
            for (std::size_t dx = 0; dx < w; ++dx) {
              const std::size_t y = ty * w + dy, x = tx * w + dx;
              if (y >= h || x >= wid) continue;
              for (std::size_t ci = 0; ci < c; ++ci)
                gh->grad[(win * pix + dy * w + dx) * c + ci] += oh->grad[(ci * h + y) * wid + x];
            }
        }
    });
  }
  return out;
}

// Per window: I_R = softmax(W_R W_T^T / sqrt(C)) W_T, and symmetrically for
// I_T. Each modality's pixels become convex mixtures of the other modality's.
template <typename T>
std::pair<WindowGrid<T>, WindowGrid<T>> cross_window_interaction(const WindowGrid<T>& wr,
                                                                 const WindowGrid<T>& wt) {
  if (wr.windows.shape() != wt.windows.shape() || wr.src_h != wt.src_h || wr.src_w != wt.src_w ||
      wr.window != wt.window) {
    throw ShapeError("cross_window_interaction: grids disagree, " +
                     shape_to_string(wr.windows.shape()) + " vs " +
                     shape_to_string(wt.windows.shape()));
  }
  const std::size_t n = wr.windows.extent(0), pix = wr.windows.extent(1),
                    c = wr.windows.extent(2);
  const T inv_sqrt = T(1) / std::sqrt(T(c));
  Tensor<T> flat_r = reshape(wr.windows, {n * pix, c});
  Tensor<T> flat_t = reshape(wt.windows, {n * pix, c});
  std::vector<Tensor<T>> ir_parts, it_parts;
  ir_parts.reserve(n);
  it_parts.reserve(n);
  for (std::size_t win = 0; win < n; ++win) {
    Tensor<T> r = slice_rows(flat_r, win * pix, (win + 1) * pix);
    Tensor<T> t = slice_rows(flat_t, win * pix, (win + 1) * pix);
    ir_parts.push_back(matmul(softmax_rows(scale(matmul(r, transpose(t)), inv_sqrt)), t));
    it_parts.push_back(matmul(softmax_rows(scale(matmul(t, transpose(r)), inv_sqrt)), r));
  }
  WindowGrid<T> ir{reshape(concat_rows_list(ir_parts), {n, pix, c}), wr.src_h, wr.src_w, wr.window};
  WindowGrid<T> it{reshape(concat_rows_list(it_parts), {n, pix, c}), wr.src_h, wr.src_w, wr.window};
  return {std::move(ir), std::move(it)};
}

// One sigmoid gate per channel from the (mean, max, variance) statistics of
// the summed modalities.
template <typename T>
Tensor<T> channel_gate(const Tensor<T>& f_r, const Tensor<T>& f_t, const ChannelGate<T>& gate) {
  detail::require_same_shape(f_r, f_t, "channel_gate");
  detail::require_ndim(f_r, 3, "channel_gate");
  const std::size_t c = f_r.extent(0);
  Tensor<T> stats = channel_stats(add(f_r, f_t));           // [C x 3]
  Tensor<T> flat = reshape(stats, {std::size_t(1), c * 3});  // [1 x 3C]
  Tensor<T> hidden = relu(affine(flat, gate.w1, gate.b1));
  Tensor<T> logits = affine(hidden, gate.w2, gate.b2);       // [1 x C]
  return reshape(sigmoid(logits), {c});
}

// Fused map: (F_R + F_T) + s (.) (I_R + I_T). The grouped summation order makes
// the output bitwise symmetric under swapping the modalities.
template <typename T>
Tensor<T> mif_fuse(const Tensor<T>& f_r, const Tensor<T>& f_t, std::size_t w,
                   const ChannelGate<T>& gate) {
  detail::require_same_shape(f_r, f_t, "mif_fuse");
  detail::require_ndim(f_r, 3, "mif_fuse");
  WindowGrid<T> wr = window_partition(f_r, w);
  WindowGrid<T> wt = window_partition(f_t, w);
  auto [ir_g, it_g] = cross_window_interaction(wr, wt);
  Tensor<T> ir = window_merge(ir_g);
  Tensor<T> it = window_merge(it_g);
  Tensor<T> s = channel_gate(f_r, f_t, gate);
  return add(add(f_r, f_t), mul_channels(add(ir, it), s));
}

}  // namespace efnet
