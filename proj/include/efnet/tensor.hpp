#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "efnet/common.hpp"

namespace efnet {

template <typename T>
struct TensorData {
  std::vector<std::size_t> shape;
  std::vector<T> value;
  std::vector<T> grad;          // allocated iff needs_grad
  bool requires_grad = false;   // leaf marker set by the caller
  bool needs_grad = false;      // requires_grad, or derived from such a leaf
};

// Dense n-dimensional array in row-major order. Value semantics over shared
// storage: copying a Tensor aliases the same buffer, which is what the tape
// closures rely on.
template <typename T>
class Tensor {
 public:
  Tensor() : d_(std::make_shared<TensorData<T>>()) {}

  explicit Tensor(std::vector<std::size_t> shape, T fill = T(0))
      : d_(std::make_shared<TensorData<T>>()) {
    d_->shape = std::move(shape);
    for (std::size_t e : d_->shape) {
      if (e == 0) throw ShapeError("tensor extent must be >= 1, got shape " + shape_to_string(d_->shape));
    }
    d_->value.assign(count(d_->shape), fill);
  }

  static Tensor from(std::vector<std::size_t> shape, std::vector<T> values) {
    Tensor t;
    t.d_->shape = std::move(shape);
    if (count(t.d_->shape) != values.size()) {
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_to_string(t.d_->shape));
    }
    t.d_->value = std::move(values);
    return t;
  }

  bool defined() const { return !d_->shape.empty() || !d_->value.empty(); }
  const std::vector<std::size_t>& shape() const { return d_->shape; }
  std::size_t ndim() const { return d_->shape.size(); }
  std::size_t extent(std::size_t i) const { return d_->shape.at(i); }
  std::size_t numel() const { return d_->value.size(); }

  std::vector<T>& values() { return d_->value; }
  const std::vector<T>& values() const { return d_->value; }

  T& operator[](std::size_t i) { return d_->value[i]; }
  const T& operator[](std::size_t i) const { return d_->value[i]; }

  T& at(std::size_t i, std::size_t j) { return d_->value[i * d_->shape[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return d_->value[i * d_->shape[1] + j]; }
  T& at(std::size_t c, std::size_t h, std::size_t w) {
    return d_->value[(c * d_->shape[1] + h) * d_->shape[2] + w];
  }
  const T& at(std::size_t c, std::size_t h, std::size_t w) const {
    return d_->value[(c * d_->shape[1] + h) * d_->shape[2] + w];
  }

  T scalar() const {
    if (numel() != 1) throw ContractError("scalar() on tensor of shape " + shape_to_string(d_->shape));
    return d_->value[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  bool needs_grad() const { return d_->needs_grad; }

  void set_requires_grad(bool on) {
    d_->requires_grad = on;
    d_->needs_grad = on;
    if (on) ensure_grad();
  }

  void ensure_grad() {
    if (d_->grad.size() != d_->value.size()) d_->grad.assign(d_->value.size(), T(0));
  }

  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), T(0));
  }

  std::vector<T>& grad() {
    ensure_grad();
    return d_->grad;
  }
  const std::vector<T>& grad() const { return d_->grad; }

  std::shared_ptr<TensorData<T>> handle() const { return d_; }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
  }

 private:
  std::shared_ptr<TensorData<T>> d_;
};

// Tape of executed operations. Replaying in exact reverse execution order
// accumulates gradients into every requires_grad leaf reachable from the loss.
template <typename T>
class Graph {
 public:
  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }
  std::size_t size() const { return steps_.size(); }
  void clear() { steps_.clear(); }

  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + shape_to_string(loss.shape()));
    }
    auto h = loss.handle();
    if (h->grad.size() != h->value.size()) h->grad.assign(h->value.size(), T(0));
    h->grad[0] += T(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

  static Graph*& current() {
    thread_local Graph* cur = nullptr;
    return cur;
  }

  // RAII activation; ops record onto the innermost active graph.
  class Scope {
   public:
    explicit Scope(Graph& g) : prev_(current()) { current() = &g; }
    ~Scope() { current() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Graph* prev_;
  };

 private:
  std::vector<std::function<void()>> steps_;
};

template <typename T>
inline void backward(const Tensor<T>& loss, Graph<T>& graph) {
  graph.backward(loss);
}

namespace detail {

template <typename T>
inline bool tracing(std::initializer_list<const Tensor<T>*> inputs) {
  if (Graph<T>::current() == nullptr) return false;
  for (const Tensor<T>* t : inputs) {
    if (t->needs_grad()) return true;
  }
  return false;
}

template <typename T>
inline Tensor<T> traced_output(std::vector<std::size_t> shape, bool tracing) {
  Tensor<T> out(std::move(shape));
  if (tracing) {
    out.handle()->needs_grad = true;
    out.ensure_grad();
  }
  return out;
}

// Inputs that participate in a recorded step get their grad buffers up front
// so closures can accumulate unconditionally.
template <typename T>
inline void prepare_inputs(std::initializer_list<Tensor<T>*> inputs) {
  for (Tensor<T>* t : inputs) {
    if (t->needs_grad()) t->ensure_grad();
  }
}

template <typename T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                     " vs " + shape_to_string(b.shape()));
  }
}

template <typename T>
inline void require_ndim(const Tensor<T>& a, std::size_t nd, const char* op) {
  if (a.ndim() != nd) {
    throw ShapeError(std::string(op) + ": expected " + std::to_string(nd) +
                     "-d tensor, got shape " + shape_to_string(a.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  bool rec = detail::tracing<T>({&a, &b});
  Tensor<T> out = detail::traced_output<T>(a.shape(), rec);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
  if (rec) {
    auto ah = a.handle(), bh = b.handle(), oh = out.handle();
    Graph<T>::current()->record([ah, bh, oh] {
      for (std::size_t i = 0; i < oh->grad.size(); ++i) {
        if (ah->needs_grad) ah->grad[i] += oh->grad[i];
        if (bh->needs_grad) bh->grad[i] += oh->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  bool rec = detail::tracing<T>({&a, &b});
  Tensor<T> out = detail::traced_output<T>(a.shape(), rec);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
  if (rec) {
    auto ah = a.handle(), bh = b.handle(), oh = out.handle();
    Graph<T>::current()->record([ah, bh, oh] {
      for (std::size_t i = 0; i < oh->grad.size(); ++i) {
        if (ah->needs_grad) ah->grad[i] += oh->grad[i];
        if (bh->needs_grad) bh->grad[i] -= oh->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  bool rec = detail::tracing<T>({&a, &b});
  Tensor<T> out = detail::traced_output<T>(a.shape(), rec);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
  if (rec) {
    auto ah = a.handle(), bh = b.handle(), oh = out.handle();
    Graph<T>::current()->record([ah, bh, oh] {
      for (std::size_t i = 0; i < oh->grad.size(); ++i) {
        if (ah->needs_grad) ah->grad[i] += oh->grad[i] * bh->value[i];
        if (bh->needs_grad) bh->grad[i] += oh->grad[i] * ah->value[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  bool rec = detail::tracing<T>({&a});
  Tensor<T> out = detail::traced_output<T>(a.shape(), rec);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * s;
  if (rec) {
    auto ah = a.handle(), oh = out.handle();
    Graph<T>::current()->record([ah, oh, s] {
      for (std::size_t i = 0; i < oh->grad.size(); ++i) ah->grad[i] += oh->grad[i] * s;
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  bool rec = detail::tracing<T>({&a});
  Tensor<T> out = detail::traced_output<T>(a.shape(), rec);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
  if (rec) {
    auto ah = a.handle(), oh = out.handle();
    Graph<T>::current()->record([ah, oh] {
      for (std::size_t i = 0; i < oh->grad.size(); ++i) {
        if (ah->value[i] > T(0)) ah->grad[i] += oh->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  bool rec = detail::tracing<T>({&a});
  Tensor<T> out = detail::traced_output<T>(a.shape(), rec);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = T(1) / (T(1) + std::exp(-a[i]));
  if (rec) {
    auto ah = a.handle(), oh = out.handle();
    Graph<T>::current()->record([ah, oh] {
      for (std::size_t i = 0; i < oh->grad.size(); ++i) {
        const T y = oh->value[i];
        ah->grad[i] += oh->grad[i] * y * (T(1) - y);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  bool rec = detail::tracing<T>({&a});
  Tensor<T> out = detail::traced_output<T>(a.shape(), rec);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(a[i]);
  if (rec) {
    auto ah = a.handle(), oh = out.handle();
    Graph<T>::current()->record([ah, oh] {
      for (std::size_t i = 0; i < oh->grad.size(); ++i) ah->grad[i] += oh->grad[i] * oh->value[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  bool rec = detail::tracing<T>({&a});
  Tensor<T> out = detail::traced_output<T>(a.shape(), rec);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = std::log(a[i]);
  if (rec) {
    auto ah = a.handle(), oh = out.handle();
    Graph<T>::current()->record([ah, oh] {
      for (std::size_t i = 0; i < oh->grad.size(); ++i) ah->grad[i] += oh->grad[i] / ah->value[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<std::size_t> shape) {
  if (Tensor<T>::count(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(a.shape()) + " as " +
                     shape_to_string(shape));
  }
  bool rec = detail::tracing<T>({&a});
  Tensor<T> out = detail::traced_output<T>(std::move(shape), rec);
  out.values() = a.values();
  if (rec) {
    auto ah = a.handle(), oh = out.handle();
    Graph<T>::current()->record([ah, oh] {
      for (std::size_t i = 0; i < oh->grad.size(); ++i) ah->grad[i] += oh->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_ndim(a, 2, "transpose");
  const std::size_t m = a.extent(0), n = a.extent(1);
  bool rec = detail::tracing<T>({&a});
  Tensor<T> out = detail::traced_output<T>({n, m}, rec);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  if (rec) {
    auto ah = a.handle(), oh = out.handle();
    Graph<T>::current()->record([ah, oh, m, n] {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ah->grad[i * n + j] += oh->grad[j * m + i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_ndim(a, 2, "concat_rows");
  detail::require_ndim(b, 2, "concat_rows");
  if (a.extent(1) != b.extent(1)) {
    throw ShapeError("concat_rows: column mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  const std::size_t ma = a.extent(0), mb = b.extent(0), n = a.extent(1);
  bool rec = detail::tracing<T>({&a, &b});
  Tensor<T> out = detail::traced_output<T>({ma + mb, n}, rec);
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  std::copy(b.values().begin(), b.values().end(), out.values().begin() + ma * n);
  if (rec) {
    auto ah = a.handle(), bh = b.handle(), oh = out.handle();
    Graph<T>::current()->record([ah, bh, oh, ma, n] {
      const std::size_t na = ah->value.size(), nb = bh->value.size();
      if (ah->needs_grad)
        for (std::size_t i = 0; i < na; ++i) ah->grad[i] += oh->grad[i];
      if (bh->needs_grad)
        for (std::size_t i = 0; i < nb; ++i) bh->grad[i] += oh->grad[ma * n + i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_ndim(a, 2, "concat_cols");
  detail::require_ndim(b, 2, "concat_cols");
  if (a.extent(0) != b.extent(0)) {
    throw ShapeError("concat_cols: row mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  const std::size_t m = a.extent(0), na = a.extent(1), nb = b.extent(1);
  bool rec = detail::tracing<T>({&a, &b});
  Tensor<T> out = detail::traced_output<T>({m, na + nb}, rec);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < na; ++j) out[i * (na + nb) + j] = a[i * na + j];
    for (std::size_t j = 0; j < nb; ++j) out[i * (na + nb) + na + j] = b[i * nb + j];
  }
  if (rec) {
    auto ah = a.handle(), bh = b.handle(), oh = out.handle();
    Graph<T>::current()->record([ah, bh, oh, m, na, nb] {
      for (std::size_t i = 0; i < m; ++i) {
        if (ah->needs_grad)
          for (std::size_t j = 0; j < na; ++j) ah->grad[i * na + j] += oh->grad[i * (na + nb) + j];
        if (bh->needs_grad)
          for (std::size_t j = 0; j < nb; ++j) bh->grad[i * nb + j] += oh->grad[i * (na + nb) + na + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_rows_list(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows_list: no tensors given");
  const std::size_t n = parts[0].extent(1);
  std::size_t rows = 0;
  bool rec = false;
  for (const auto& t : parts) {
    detail::require_ndim(t, 2, "concat_rows_list");
    if (t.extent(1) != n) {
      throw ShapeError("concat_rows_list: column mismatch " + shape_to_string(parts[0].shape()) +
                       " vs " + shape_to_string(t.shape()));
    }
    rows += t.extent(0);
    rec = rec || detail::tracing<T>({&t});
  }
  Tensor<T> out = detail::traced_output<T>({rows, n}, rec);
  std::size_t at = 0;
  for (const auto& t : parts) {
    std::copy(t.values().begin(), t.values().end(), out.values().begin() + at);
    at += t.numel();
  }
  if (rec) {
    std::vector<std::shared_ptr<TensorData<T>>> hs;
    for (const auto& t : parts) hs.push_back(t.handle());
    auto oh = out.handle();
    Graph<T>::current()->record([hs = std::move(hs), oh] {
      std::size_t at = 0;
      for (const auto& h : hs) {
        if (h->needs_grad)
          for (std::size_t i = 0; i < h->value.size(); ++i) h->grad[i] += oh->grad[at + i];
        at += h->value.size();
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t r0, std::size_t r1) {
  detail::require_ndim(a, 2, "slice_rows");
  if (r0 >= r1 || r1 > a.extent(0)) {
    throw ContractError("slice_rows: invalid range [" + std::to_string(r0) + ", " +
                        std::to_string(r1) + ") for " + shape_to_string(a.shape()));
  }
  const std::size_t n = a.extent(1);
  bool rec = detail::tracing<T>({&a});
  Tensor<T> out = detail::traced_output<T>({r1 - r0, n}, rec);
  std::copy(a.values().begin() + r0 * n, a.values().begin() + r1 * n, out.values().begin());
  if (rec) {
    auto ah = a.handle(), oh = out.handle();
    Graph<T>::current()->record([ah, oh, r0, n] {
      for (std::size_t i = 0; i < oh->grad.size(); ++i) ah->grad[r0 * n + i] += oh->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t c0, std::size_t c1) {
  detail::require_ndim(a, 2, "slice_cols");
  if (c0 >= c1 || c1 > a.extent(1)) {
    throw ContractError("slice_cols: invalid range [" + std::to_string(c0) + ", " +
                        std::to_string(c1) + ") for " + shape_to_string(a.shape()));
  }
  const std::size_t m = a.extent(0), n = a.extent(1), w = c1 - c0;
  bool rec = detail::tracing<T>({&a});
  Tensor<T> out = detail::traced_output<T>({m, w}, rec);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a[i * n + c0 + j];
  if (rec) {
    auto ah = a.handle(), oh = out.handle();
    Graph<T>::current()->record([ah, oh, m, n, w, c0] {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) ah->grad[i * n + c0 + j] += oh->grad[i * w + j];
    });
  }
  return out;
}

// Gradient scatter-adds, so duplicate indices accumulate.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<std::size_t>& idx) {
  detail::require_ndim(a, 2, "gather_rows");
  const std::size_t n = a.extent(1);
  for (std::size_t r : idx) {
    if (r >= a.extent(0)) throw ContractError("gather_rows: index " + std::to_string(r) + " out of range");
  }
  bool rec = detail::tracing<T>({&a});
  Tensor<T> out = detail::traced_output<T>({idx.size(), n}, rec);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(a.values().begin() + idx[i] * n, a.values().begin() + (idx[i] + 1) * n,
              out.values().begin() + i * n);
  if (rec) {
    auto ah = a.handle(), oh = out.handle();
    Graph<T>::current()->record([ah, oh, idx, n] {
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) ah->grad[idx[i] * n + j] += oh->grad[i * n + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_ndim(a, 2, "matmul");
  detail::require_ndim(b, 2, "matmul");
  if (a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul: inner extents disagree, " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  bool rec = detail::tracing<T>({&a, &b});
  Tensor<T> out = detail::traced_output<T>({m, n}, rec);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b[p * n + j];
    }
  }
  if (rec) {
    auto ah = a.handle(), bh = b.handle(), oh = out.handle();
    Graph<T>::current()->record([ah, bh, oh, m, k, n] {
      if (ah->needs_grad) {
        // dA = G * B^T
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            T acc = T(0);
            for (std::size_t j = 0; j < n; ++j) acc += oh->grad[i * n + j] * bh->value[p * n + j];
            ah->grad[i * k + p] += acc;
          }
      }
      if (bh->needs_grad) {
        // dB = A^T * G
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < n; ++j) {
            T acc = T(0);
            for (std::size_t i = 0; i < m; ++i) acc += ah->value[i * k + p] * oh->grad[i * n + j];
            bh->grad[p * n + j] += acc;
          }
      }
    });
  }
  return out;
}

// x [N x Ci] * W [Ci x Co] + b [Co] broadcast over rows.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_ndim(x, 2, "affine");
  detail::require_ndim(w, 2, "affine");
  if (x.extent(1) != w.extent(0)) {
    throw ShapeError("affine: input width " + shape_to_string(x.shape()) +
                     " does not match weight " + shape_to_string(w.shape()));
  }
  if (b.numel() != w.extent(1)) {
    throw ShapeError("affine: bias " + shape_to_string(b.shape()) + " does not match weight " +
                     shape_to_string(w.shape()));
  }
  const std::size_t m = x.extent(0), k = x.extent(1), n = w.extent(1);
  bool rec = detail::tracing<T>({&x, &w, &b});
  Tensor<T> out = detail::traced_output<T>({m, n}, rec);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = b[j];
    for (std::size_t p = 0; p < k; ++p) {
      const T xv = x[i * k + p];
      if (xv == T(0)) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += xv * w[p * n + j];
    }
  }
  if (rec) {
    auto xh = x.handle(), wh = w.handle(), bhh = b.handle(), oh = out.handle();
    Graph<T>::current()->record([xh, wh, bhh, oh, m, k, n] {
      if (xh->needs_grad) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            T acc = T(0);
            for (std::size_t j = 0; j < n; ++j) acc += oh->grad[i * n + j] * wh->value[p * n + j];
            xh->grad[i * k + p] += acc;
          }
      }
      if (wh->needs_grad) {
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < n; ++j) {
            T acc = T(0);
            for (std::size_t i = 0; i < m; ++i) acc += xh->value[i * k + p] * oh->grad[i * n + j];
            wh->grad[p * n + j] += acc;
          }
      }
      if (bhh->needs_grad) {
        for (std::size_t j = 0; j < n; ++j) {
          T acc = T(0);
          for (std::size_t i = 0; i < m; ++i) acc += oh->grad[i * n + j];
          bhh->grad[j] += acc;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Row softmax with per-row max subtraction.

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  detail::require_ndim(a, 2, "softmax_rows");
  const std::size_t m = a.extent(0), n = a.extent(1);
  bool rec = detail::tracing<T>({&a});
  Tensor<T> out = detail::traced_output<T>({m, n}, rec);
  for (std::size_t i = 0; i < m; ++i) {
    T mx = a[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a[i * n + j]);
    T sum = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      const T e = std::exp(a[i * n + j] - mx);
      out[i * n + j] = e;
      sum += e;
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= sum;
  }
  if (rec) {
    auto ah = a.handle(), oh = out.handle();
    Graph<T>::current()->record([ah, oh, m, n] {
      for (std::size_t i = 0; i < m; ++i) {
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) dot += oh->grad[i * n + j] * oh->value[i * n + j];
        for (std::size_t j = 0; j < n; ++j)
          ah->grad[i * n + j] += oh->value[i * n + j] * (oh->grad[i * n + j] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization over the last axis of an [N x C] matrix.

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  detail::require_ndim(x, 2, "layer_norm");
  const std::size_t m = x.extent(0), n = x.extent(1);
  if (gamma.numel() != n || beta.numel() != n) {
    throw ShapeError("layer_norm: gain/bias width must match feature width " + std::to_string(n));
  }
  bool rec = detail::tracing<T>({&x, &gamma, &beta});
  Tensor<T> out = detail::traced_output<T>({m, n}, rec);
  std::vector<T> inv_std(m), xhat(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    T mean = T(0);
    for (std::size_t j = 0; j < n; ++j) mean += x[i * n + j];
    mean /= T(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      const T d = x[i * n + j] - mean;
      var += d * d;
    }
    var /= T(n);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (x[i * n + j] - mean) * is;
      xhat[i * n + j] = h;
      out[i * n + j] = gamma[j] * h + beta[j];
    }
  }
  if (rec) {
    auto xh = x.handle(), gh = gamma.handle(), bh = beta.handle(), oh = out.handle();
    Graph<T>::current()->record([xh, gh, bh, oh, m, n, inv_std = std::move(inv_std),
                                 xhat = std::move(xhat)] {
      for (std::size_t i = 0; i < m; ++i) {
        T sum_dh = T(0), sum_dh_h = T(0);
        for (std::size_t j = 0; j < n; ++j) {
          const T dh = oh->grad[i * n + j] * gh->value[j];
          sum_dh += dh;
          sum_dh_h += dh * xhat[i * n + j];
        }
        if (xh->needs_grad) {
          for (std::size_t j = 0; j < n; ++j) {
            const T dh = oh->grad[i * n + j] * gh->value[j];
            xh->grad[i * n + j] +=
                inv_std[i] * (dh - sum_dh / T(n) - xhat[i * n + j] * sum_dh_h / T(n));
          }
        }
        if (gh->needs_grad)
          for (std::size_t j = 0; j < n; ++j) gh->grad[j] += oh->grad[i * n + j] * xhat[i * n + j];
        if (bh->needs_grad)
          for (std::size_t j = 0; j < n; ++j) bh->grad[j] += oh->grad[i * n + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  bool rec = detail::tracing<T>({&a});
  Tensor<T> out = detail::traced_output<T>({1}, rec);
  T acc = T(0);
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i];
  out[0] = acc;
  if (rec) {
    auto ah = a.handle(), oh = out.handle();
    Graph<T>::current()->record([ah, oh] {
      const T g = oh->grad[0];
      for (std::size_t i = 0; i < ah->grad.size(); ++i) ah->grad[i] += g;
    });
  }
  return out;
}

// a [M x N] + v broadcast down columns (v has N entries).
template <typename T>
Tensor<T> add_col_vector(const Tensor<T>& a, const Tensor<T>& v) {
  detail::require_ndim(a, 2, "add_col_vector");
  const std::size_t m = a.extent(0), n = a.extent(1);
  if (v.numel() != n) {
    throw ShapeError("add_col_vector: vector " + shape_to_string(v.shape()) +
                     " does not match columns of " + shape_to_string(a.shape()));
  }
  bool rec = detail::tracing<T>({&a, &v});
  Tensor<T> out = detail::traced_output<T>({m, n}, rec);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] + v[j];
  if (rec) {
    auto ah = a.handle(), vh = v.handle(), oh = out.handle();
    Graph<T>::current()->record([ah, vh, oh, m, n] {
      if (ah->needs_grad)
        for (std::size_t i = 0; i < m * n; ++i) ah->grad[i] += oh->grad[i];
      if (vh->needs_grad)
        for (std::size_t j = 0; j < n; ++j) {
          T acc = T(0);
          for (std::size_t i = 0; i < m; ++i) acc += oh->grad[i * n + j];
          vh->grad[j] += acc;
        }
    });
  }
  return out;
}

// f [C x H x W] scaled per channel by s [C].
template <typename T>
Tensor<T> mul_channels(const Tensor<T>& f, const Tensor<T>& s) {
  detail::require_ndim(f, 3, "mul_channels");
  const std::size_t c = f.extent(0), hw = f.extent(1) * f.extent(2);
  if (s.numel() != c) {
    throw ShapeError("mul_channels: gate " + shape_to_string(s.shape()) +
                     " does not match channels of " + shape_to_string(f.shape()));
  }
  bool rec = detail::tracing<T>({&f, &s});
  Tensor<T> out = detail::traced_output<T>(f.shape(), rec);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t i = 0; i < hw; ++i) out[ci * hw + i] = f[ci * hw + i] * s[ci];
  if (rec) {
    auto fh = f.handle(), sh = s.handle(), oh = out.handle();
    Graph<T>::current()->record([fh, sh, oh, c, hw] {
      for (std::size_t ci = 0; ci < c; ++ci) {
        if (fh->needs_grad)
          for (std::size_t i = 0; i < hw; ++i) fh->grad[ci * hw + i] += oh->grad[ci * hw + i] * sh->value[ci];
        if (sh->needs_grad) {
          T acc = T(0);
          for (std::size_t i = 0; i < hw; ++i) acc += oh->grad[ci * hw + i] * fh->value[ci * hw + i];
          sh->grad[ci] += acc;
        }
      }
    });
  }
  return out;
}

// Divide every column of a [K x P] matrix by its column sum.
template <typename T>
Tensor<T> div_by_colsum(const Tensor<T>& a) {
  detail::require_ndim(a, 2, "div_by_colsum");
  const std::size_t k = a.extent(0), p = a.extent(1);
  bool rec = detail::tracing<T>({&a});
  Tensor<T> out = detail::traced_output<T>({k, p}, rec);
  std::vector<T> colsum(p, T(0));
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < p; ++j) colsum[j] += a[i * p + j];
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < p; ++j) out[i * p + j] = a[i * p + j] / colsum[j];
  if (rec) {
    auto ah = a.handle(), oh = out.handle();
    Graph<T>::current()->record([ah, oh, k, p, colsum = std::move(colsum)] {
      for (std::size_t j = 0; j < p; ++j) {
        T dot = T(0);
        for (std::size_t i = 0; i < k; ++i) dot += oh->grad[i * p + j] * oh->value[i * p + j];
        for (std::size_t i = 0; i < k; ++i)
          ah->grad[i * p + j] += (oh->grad[i * p + j] - dot) / colsum[j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Spatial ops on [C x H x W] maps

template <typename T>
Tensor<T> mean_pool2x2(const Tensor<T>& f) {
  detail::require_ndim(f, 3, "mean_pool2x2");
  const std::size_t c = f.extent(0), h = f.extent(1), w = f.extent(2);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("mean_pool2x2: extents must be even, got " + shape_to_string(f.shape()));
  }
  const std::size_t h2 = h / 2, w2 = w / 2;
  bool rec = detail::tracing<T>({&f});
  Tensor<T> out = detail::traced_output<T>({c, h2, w2}, rec);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t i = 0; i < h2; ++i)
      for (std::size_t j = 0; j < w2; ++j) {
        const T s = f.at(ci, 2 * i, 2 * j) + f.at(ci, 2 * i, 2 * j + 1) +
                    f.at(ci, 2 * i + 1, 2 * j) + f.at(ci, 2 * i + 1, 2 * j + 1);
        out.at(ci, i, j) = s * T(0.25);
      }
  if (rec) {
    auto fh = f.handle(), oh = out.handle();
    Graph<T>::current()->record([fh, oh, c, h, w, h2, w2] {
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t i = 0; i < h2; ++i)
          for (std::size_t j = 0; j < w2; ++j) {
            const T g = oh->grad[(ci * h2 + i) * w2 + j] * T(0.25);
            fh->grad[(ci * h + 2 * i) * w + 2 * j] += g;
            fh->grad[(ci * h + 2 * i) * w + 2 * j + 1] += g;
            fh->grad[(ci * h + 2 * i + 1) * w + 2 * j] += g;
            fh->grad[(ci * h + 2 * i + 1) * w + 2 * j + 1] += g;
          }
    });
  }
  return out;
}

namespace detail {

// Corner-aligned sample positions: source coordinate for output index i.
template <typename T>
inline void bilinear_taps(std::size_t out_i, std::size_t in_n, std::size_t out_n,
                          std::size_t& lo, std::size_t& hi, T& frac) {
  if (out_n == 1 || in_n == 1) {
    lo = hi = 0;
    frac = T(0);
    return;
  }
  const T pos = T(out_i) * T(in_n - 1) / T(out_n - 1);
  lo = static_cast<std::size_t>(pos);
  if (lo >= in_n - 1) lo = in_n - 2;
  hi = lo + 1;
  frac = pos - T(lo);
}

// Pixel-center-aligned positions (half-pixel convention), edge-clamped.
template <typename T>
inline void bilinear_taps_centers(std::size_t out_i, std::size_t in_n, std::size_t out_n,
                                  std::size_t& lo, std::size_t& hi, T& frac) {
  if (in_n == 1) {
    lo = hi = 0;
    frac = T(0);
    return;
  }
  T pos = (T(out_i) + T(0.5)) * T(in_n) / T(out_n) - T(0.5);
  if (pos < T(0)) pos = T(0);
  if (pos > T(in_n - 1)) pos = T(in_n - 1);
  lo = static_cast<std::size_t>(pos);
  if (lo >= in_n - 1) lo = in_n - 2;
  hi = lo + 1;
  frac = pos - T(lo);
}

}  // namespace detail

namespace detail {

template <typename T>
Tensor<T> upsample_bilinear_impl(const Tensor<T>& f, std::size_t h2, std::size_t w2, bool centers,
                                 const char* name) {
  detail::require_ndim(f, 3, name);
  const std::size_t c = f.extent(0), h = f.extent(1), w = f.extent(2);
  if (h2 < h || w2 < w) {
    throw ShapeError(std::string(name) + ": target " + std::to_string(h2) + "x" +
                     std::to_string(w2) + " smaller than source " + shape_to_string(f.shape()));
  }
  const auto taps = [centers](std::size_t i, std::size_t n, std::size_t n2, std::size_t& lo,
                              std::size_t& hi, T& fr) {
    if (centers) bilinear_taps_centers<T>(i, n, n2, lo, hi, fr);
    else bilinear_taps<T>(i, n, n2, lo, hi, fr);
  };
  bool rec = detail::tracing<T>({&f});
  Tensor<T> out = detail::traced_output<T>({c, h2, w2}, rec);
  for (std::size_t i = 0; i < h2; ++i) {
    std::size_t r0, r1;
    T fr;
    taps(i, h, h2, r0, r1, fr);
    for (std::size_t j = 0; j < w2; ++j) {
      std::size_t c0, c1;
      T fc;
      taps(j, w, w2, c0, c1, fc);
      for (std::size_t ci = 0; ci < c; ++ci) {
        const T v00 = f.at(ci, r0, c0), v01 = f.at(ci, r0, c1);
        const T v10 = f.at(ci, r1, c0), v11 = f.at(ci, r1, c1);
        out.at(ci, i, j) = (T(1) - fr) * ((T(1) - fc) * v00 + fc * v01) +
                           fr * ((T(1) - fc) * v10 + fc * v11);
      }
    }
  }
  if (rec) {
    auto fh = f.handle(), oh = out.handle();
    Graph<T>::current()->record([fh, oh, taps, c, h, w, h2, w2] {
      for (std::size_t i = 0; i < h2; ++i) {
        std::size_t r0, r1;
        T fr;
        taps(i, h, h2, r0, r1, fr);
        for (std::size_t j = 0; j < w2; ++j) {
          std::size_t c0, c1;
          T fc;
          taps(j, w, w2, c0, c1, fc);
          for (std::size_t ci = 0; ci < c; ++ci) {
            const T g = oh->grad[(ci * h2 + i) * w2 + j];
            fh->grad[(ci * h + r0) * w + c0] += g * (T(1) - fr) * (T(1) - fc);
            fh->grad[(ci * h + r0) * w + c1] += g * (T(1) - fr) * fc;
            fh->grad[(ci * h + r1) * w + c0] += g * fr * (T(1) - fc);
            fh->grad[(ci * h + r1) * w + c1] += g * fr * fc;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& f, std::size_t h2, std::size_t w2) {
  return detail::upsample_bilinear_impl(f, h2, w2, false, "upsample_bilinear");
}

// Half-pixel (pixel-center) sampling variant, the standard choice when blowing
// probability maps up to image resolution: grid cells map onto their own
// footprint instead of being stretched corner-to-corner.
template <typename T>
Tensor<T> upsample_bilinear_centers(const Tensor<T>& f, std::size_t h2, std::size_t w2) {
  return detail::upsample_bilinear_impl(f, h2, w2, true, "upsample_bilinear_centers");
}

// Per-channel (mean, max, population variance) over the H x W plane -> [C x 3].
// The max subgradient routes to the first maximal element in scan order.
template <typename T>
Tensor<T> channel_stats(const Tensor<T>& f) {
  detail::require_ndim(f, 3, "channel_stats");
  const std::size_t c = f.extent(0), hw = f.extent(1) * f.extent(2);
  if (hw == 0) throw ShapeError("channel_stats: empty plane in " + shape_to_string(f.shape()));
  bool rec = detail::tracing<T>({&f});
  Tensor<T> out = detail::traced_output<T>({c, 3}, rec);
  std::vector<std::size_t> argmax(c, 0);
  for (std::size_t ci = 0; ci < c; ++ci) {
    T mean = T(0), mx = f[ci * hw];
    std::size_t mi = 0;
    for (std::size_t i = 0; i < hw; ++i) {
      const T v = f[ci * hw + i];
      mean += v;
      if (v > mx) {
        mx = v;
        mi = i;
      }
    }
    mean /= T(hw);
    T var = T(0);
    for (std::size_t i = 0; i < hw; ++i) {
      const T d = f[ci * hw + i] - mean;
      var += d * d;
    }
    var /= T(hw);
    out[ci * 3 + 0] = mean;
    out[ci * 3 + 1] = mx;
    out[ci * 3 + 2] = var;
    argmax[ci] = mi;
  }
  if (rec) {
    auto fh = f.handle(), oh = out.handle();
    Graph<T>::current()->record([fh, oh, c, hw, argmax = std::move(argmax)] {
      for (std::size_t ci = 0; ci < c; ++ci) {
        const T gm = oh->grad[ci * 3 + 0];
        const T gx = oh->grad[ci * 3 + 1];
        const T gv = oh->grad[ci * 3 + 2];
        const T mean = oh->value[ci * 3 + 0];
        for (std::size_t i = 0; i < hw; ++i) {
          T g = gm / T(hw);
          g += gv * T(2) * (fh->value[ci * hw + i] - mean) / T(hw);
          fh->grad[ci * hw + i] += g;
        }
        fh->grad[ci * hw + argmax[ci]] += gx;
      }
    });
  }
  return out;
}

// Non-overlapping p x p patches in row-major tile order. Output row t holds
// patch t flattened channel-major: column (c*p + dy)*p + dx.
template <typename T>
Tensor<T> im2patch(const Tensor<T>& f, std::size_t p) {
  detail::require_ndim(f, 3, "im2patch");
  const std::size_t c = f.extent(0), h = f.extent(1), w = f.extent(2);
  if (p == 0 || h % p != 0 || w % p != 0) {
    throw ShapeError("im2patch: extents " + shape_to_string(f.shape()) +
                     " not divisible by patch " + std::to_string(p));
  }
  const std::size_t th = h / p, tw = w / p, cols = c * p * p;
  bool rec = detail::tracing<T>({&f});
  Tensor<T> out = detail::traced_output<T>({th * tw, cols}, rec);
  for (std::size_t ty = 0; ty < th; ++ty)
    for (std::size_t tx = 0; tx < tw; ++tx) {
      const std::size_t row = ty * tw + tx;
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            out[row * cols + (ci * p + dy) * p + dx] = f.at(ci, ty * p + dy, tx * p + dx);
    }
  if (rec) {
    auto fh = f.handle(), oh = out.handle();
    Graph<T>::current()->record([fh, oh, c, h, w, p, th, tw, cols] {
      for (std::size_t ty = 0; ty < th; ++ty)
        for (std::size_t tx = 0; tx < tw; ++tx) {
          const std::size_t row = ty * tw + tx;
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t dy = 0; dy < p; ++dy)
              for (std::size_t dx = 0; dx < p; ++dx)
                fh->grad[(ci * h + ty * p + dy) * w + tx * p + dx] +=
                    oh->grad[row * cols + (ci * p + dy) * p + dx];
        }
    });
  }
  return out;
}

}  // namespace efnet
