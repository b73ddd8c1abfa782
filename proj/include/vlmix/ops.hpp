#pragma once

// Differentiable primitives over Tensor<T>. Rank-N inputs to row-wise ops are
// viewed as [rows x cols] with cols = last axis.

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "vlmix/tensor.hpp"

namespace vlmix {

// Additive bias for attention positions that must not be seen. Finite so that
// max-subtraction never forms inf - inf.
inline constexpr double kBlocked = -1e9;

namespace kernel {

// C[m x n] += A[m x k] * B[k x n]. Four rows of C share each row of B; the
// summation order per element is the same as the plain triple loop.
template <typename T>
void gemm_nn(const T* __restrict a, const T* __restrict b, T* __restrict c,
             std::size_t m, std::size_t k, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    T* c0 = c + i * n;
    T* c1 = c0 + n;
    T* c2 = c1 + n;
    T* c3 = c2 + n;
    const T* a0 = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T v0 = a0[p], v1 = a0[k + p], v2 = a0[2 * k + p], v3 = a0[3 * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T bv = brow[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T, via a transposed copy of B so the
// inner loop is the same contiguous update as gemm_nn.
template <typename T>
void gemm_nt(const T* __restrict a, const T* __restrict b, T* __restrict c,
             std::size_t m, std::size_t k, std::size_t n) {
  thread_local std::vector<T> bt;
  bt.resize(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(a, bt.data(), c, m, k, n);
}

// C[m x n] += A[k x m]^T * B[k x n]
template <typename T>
void gemm_tn(const T* __restrict a, const T* __restrict b, T* __restrict c,
             std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Softmax of one row of (logits + mask). Returns false and writes a uniform
// row when every position is blocked.
template <typename T>
bool softmax_row(const T* logits, const T* mask, T* out, std::size_t len) {
  const T blocked_cut = T(kBlocked / 2);
  bool any_visible = false;
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < len; ++j) {
    const T mj = mask ? mask[j] : T(0);
    if (mj > blocked_cut) any_visible = true;
    mx = std::max(mx, logits[j] + mj);
  }
  if (!any_visible) {
    for (std::size_t j = 0; j < len; ++j) out[j] = T(1) / T(len);
    return false;
  }
  T sum = 0;
  for (std::size_t j = 0; j < len; ++j) {
    const T mj = mask ? mask[j] : T(0);
    out[j] = std::exp(logits[j] + mj - mx);
    sum += out[j];
  }
  for (std::size_t j = 0; j < len; ++j) out[j] /= sum;
  return true;
}

// d logits for y = softmax(x): dx = y * (dy - <dy, y>)
template <typename T>
void softmax_row_backward(const T* y, const T* dy, T* dx, std::size_t len) {
  T dot = 0;
  for (std::size_t j = 0; j < len; ++j) dot += dy[j] * y[j];
  for (std::size_t j = 0; j < len; ++j) dx[j] += y[j] * (dy[j] - dot);
}

}  // namespace kernel

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  kernel::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result<T>({m, n}, std::move(out), {a, b}, [a, b, m, k, n](Node<T>& self) {
    if (a.requires_grad()) kernel::gemm_nt(self.grad.data(), b.data().data(), a.node()->grad_buffer(), m, n, k);
    if (b.requires_grad()) kernel::gemm_tn(a.data().data(), self.grad.data(), b.node()->grad_buffer(), k, m, n);
  });
}

// x[... x K] * W[K x N] (+ bias[N]) applied to every row of x.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {}) {
  if (w.rank() != 2 || x.cols() != w.dim(0)) {
    throw ShapeError("linear shape mismatch: " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  }
  const std::size_t m = x.rows(), k = w.dim(0), n = w.dim(1);
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != n) {
    throw ShapeError("linear bias " + shape_str(bias.shape()) + " does not match width " + std::to_string(n));
  }
  std::vector<T> out(m * n, T(0));
  if (has_bias) {
    for (std::size_t i = 0; i < m; ++i) std::copy_n(bias.data().data(), n, out.data() + i * n);
  }
  kernel::gemm_nn(x.data().data(), w.data().data(), out.data(), m, k, n);
  Shape shape = x.shape();
  shape.back() = n;
  if (has_bias) {
    return detail::make_result<T>(std::move(shape), std::move(out), {x, w, bias},
                                  [x, w, bias, m, k, n](Node<T>& self) {
      const T* g = self.grad.data();
      if (x.requires_grad()) kernel::gemm_nt(g, w.data().data(), x.node()->grad_buffer(), m, n, k);
      if (w.requires_grad()) kernel::gemm_tn(x.data().data(), g, w.node()->grad_buffer(), k, m, n);
      if (bias.requires_grad()) {
        T* gb = bias.node()->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    });
  }
  return detail::make_result<T>(std::move(shape), std::move(out), {x, w}, [x, w, m, k, n](Node<T>& self) {
    const T* g = self.grad.data();
    if (x.requires_grad()) kernel::gemm_nt(g, w.data().data(), x.node()->grad_buffer(), m, n, k);
    if (w.requires_grad()) kernel::gemm_tn(x.data().data(), g, w.node()->grad_buffer(), k, m, n);
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](Node<T>& self) {
    for (const auto* p : {&a, &b}) {
      if (!p->requires_grad()) continue;
      T* g = p->node()->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (a.requires_grad()) {
      T* g = a.node()->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * b[i];
    }
    if (b.requires_grad()) {
      T* g = b.node()->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * a[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [x, s](Node<T>& self) {
    T* g = x.node()->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  return detail::make_result<T>({1}, {acc}, {x}, [x](Node<T>& self) {
    T* g = x.node()->grad_buffer();
    for (std::size_t i = 0; i < x.numel(); ++i) g[i] += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.numel()));
}

// Sum of scalar tensors (skips undefined entries).
template <typename T>
Tensor<T> add_scalars(const std::vector<Tensor<T>>& terms) {
  Tensor<T> acc;
  for (const auto& t : terms) {
    if (!t.defined()) continue;
    acc = acc.defined() ? add(acc, t) : t;
  }
  if (!acc.defined()) acc = Tensor<T>::scalar(T(0));
  return acc;
}

// Exact GELU: x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x[i];
    out[i] = v * T(0.5) * (T(1) + std::erf(v * T(inv_sqrt2)));
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [x](Node<T>& self) {
    T* g = x.node()->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T v = x[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * T(inv_sqrt2)));
      const T pdf = T(inv_sqrt2pi) * std::exp(T(-0.5) * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  const std::size_t h = x.cols(), rows = x.rows();
  if (h == 0 || gain.numel() != h || bias.numel() != h) {
    throw ShapeError("layer_norm width mismatch: input " + shape_str(x.shape()) + ", gain " +
                     shape_str(gain.shape()) + ", bias " + shape_str(bias.shape()));
  }
  std::vector<T> out(x.numel()), xhat(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * h;
    T mu = 0;
    for (std::size_t j = 0; j < h; ++j) mu += xr[j];
    mu /= T(h);
    T var = 0;
    for (std::size_t j = 0; j < h; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= T(h);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < h; ++j) {
      xhat[r * h + j] = (xr[j] - mu) * inv_std[r];
      out[r * h + j] = xhat[r * h + j] * gain[j] + bias[j];
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x, gain, bias},
                                [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), h,
                                 rows](Node<T>& self) {
    const T* g = self.grad.data();
    if (gain.requires_grad()) {
      T* gg = gain.node()->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < h; ++j) gg[j] += g[r * h + j] * xhat[r * h + j];
    }
    if (bias.requires_grad()) {
      T* gb = bias.node()->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < h; ++j) gb[j] += g[r * h + j];
    }
    if (x.requires_grad()) {
      T* gx = x.node()->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        T mean_dy = 0, mean_dy_xhat = 0;
        for (std::size_t j = 0; j < h; ++j) {
          const T dy = g[r * h + j] * gain[j];
          mean_dy += dy;
          mean_dy_xhat += dy * xhat[r * h + j];
        }
        mean_dy /= T(h);
        mean_dy_xhat /= T(h);
        for (std::size_t j = 0; j < h; ++j) {
          const T dy = g[r * h + j] * gain[j];
          gx[r * h + j] += inv_std[r] * (dy - mean_dy - xhat[r * h + j] * mean_dy_xhat);
        }
      }
    }
  });
}

// Softmax over the last axis of logits + additive_mask. The mask is either
// one row (broadcast to every row) or the same size as logits.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& logits, const std::vector<T>& additive_mask = {}) {
  const std::size_t len = logits.cols(), rows = logits.rows();
  const bool per_row = additive_mask.size() == logits.numel();
  if (!additive_mask.empty() && !per_row && additive_mask.size() != len) {
    throw ShapeError("mask of " + std::to_string(additive_mask.size()) + " entries not broadcastable to " +
                     shape_str(logits.shape()));
  }
  std::vector<T> out(logits.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* m = additive_mask.empty() ? nullptr : additive_mask.data() + (per_row ? r * len : 0);
    if (!kernel::softmax_row(logits.data().data() + r * len, m, out.data() + r * len, len)) {
      ++diagnostics().degenerate_softmax_rows;
    }
  }
  std::vector<T> y = out;
  return detail::make_result<T>(logits.shape(), std::move(out), {logits},
                                [logits, y = std::move(y), len, rows, mask = additive_mask, per_row](Node<T>& self) {
    T* g = logits.node()->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* m = mask.empty() ? nullptr : mask.data() + (per_row ? r * len : 0);
      if (m) {
        bool any = false;
        for (std::size_t j = 0; j < len; ++j) any = any || m[j] > T(kBlocked / 2);
        if (!any) continue;  // uniform fallback is constant
      }
      kernel::softmax_row_backward(y.data() + r * len, self.grad.data() + r * len, g + r * len, len);
    }
  });
}

enum class Reduction { Mean, Sum };

// Cross-entropy of each row of logits against a class index.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets,
                        Reduction reduction = Reduction::Mean) {
  const std::size_t k = logits.cols(), rows = logits.rows();
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(rows) + " rows");
  }
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= k) {
      throw IndexError("cross_entropy target " + std::to_string(t) + " outside [0, " + std::to_string(k) + ")");
    }
  }
  std::vector<T> probs(logits.numel());
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = logits.data().data() + r * k;
    T mx = x[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x[j]);
    T s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(x[j] - mx);
    const T lse = mx + std::log(s);
    total += lse - x[targets[r]];
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = std::exp(x[j] - lse);
  }
  const T norm = (reduction == Reduction::Mean && rows > 0) ? T(1) / T(rows) : T(1);
  return detail::make_result<T>({1}, {total * norm}, {logits},
                                [logits, probs = std::move(probs), targets, k, rows, norm](Node<T>& self) {
    T* g = logits.node()->grad_buffer();
    const T up = self.grad[0] * norm;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < k; ++j) g[r * k + j] += up * probs[r * k + j];
      g[r * k + static_cast<std::size_t>(targets[r])] -= up;
    }
  });
}

// Rows of a 2-D (or row-viewed) tensor selected by index; rows may repeat.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& idx) {
  const std::size_t c = x.cols(), rows = x.rows();
  std::vector<T> out(idx.size() * c);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows) {
      throw IndexError("gather_rows index " + std::to_string(idx[i]) + " outside " + std::to_string(rows) + " rows");
    }
    std::copy_n(x.data().data() + idx[i] * c, c, out.data() + i * c);
  }
  return detail::make_result<T>({idx.size(), c}, std::move(out), {x}, [x, idx, c](Node<T>& self) {
    T* g = x.node()->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += self.grad[i * c + j];
  });
}

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("concat_rows width mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t c = a.cols(), na = a.numel();
  std::vector<T> out(a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  return detail::make_result<T>({a.rows() + b.rows(), c}, std::move(out), {a, b}, [a, b, na](Node<T>& self) {
    if (a.requires_grad()) {
      T* g = a.node()->grad_buffer();
      for (std::size_t i = 0; i < na; ++i) g[i] += self.grad[i];
    }
    if (b.requires_grad()) {
      T* g = b.node()->grad_buffer();
      for (std::size_t i = 0; i < b.numel(); ++i) g[i] += self.grad[na + i];
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose needs a matrix, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return detail::make_result<T>({n, m}, std::move(out), {x}, [x, m, n](Node<T>& self) {
    T* g = x.node()->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_result<T>(std::move(shape), std::move(out), {x}, [x](Node<T>& self) {
    T* g = x.node()->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-12)) {
  const std::size_t c = x.cols(), rows = x.rows();
  std::vector<T> out(x.numel()), norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += x[r * c + j] * x[r * c + j];
    norms[r] = std::max(std::sqrt(s), eps);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = x[r * c + j] / norms[r];
  }
  std::vector<T> y = out;
  return detail::make_result<T>(x.shape(), std::move(out), {x},
                                [x, y = std::move(y), norms = std::move(norms), c, rows](Node<T>& self) {
    T* g = x.node()->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += self.grad[r * c + j] * y[r * c + j];
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += (self.grad[r * c + j] - y[r * c + j] * dot) / norms[r];
    }
  });
}

// Multi-head scaled dot-product attention over a batch of independent
// sequences. q is [batch*lq x H]; k and v are [batch*lk x H]; mask holds
// batch*lq*lk additive entries (empty means fully visible).
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const std::vector<T>& mask,
                    std::size_t batch, std::size_t n_heads) {
  const std::size_t h = q.cols();
  if (k.cols() != h || v.cols() != h || k.shape() != v.shape()) {
    throw ShapeError("attention width mismatch: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                     ", v " + shape_str(v.shape()));
  }
  if (batch == 0 || n_heads == 0 || h % n_heads != 0 || q.rows() % batch != 0 || k.rows() % batch != 0) {
    throw ShapeError("attention: cannot split " + shape_str(q.shape()) + " / " + shape_str(k.shape()) + " into " +
                     std::to_string(batch) + " sequences and " + std::to_string(n_heads) + " heads");
  }
  const std::size_t lq = q.rows() / batch, lk = k.rows() / batch, d = h / n_heads;
  if (!mask.empty() && mask.size() != batch * lq * lk) {
    throw ShapeError("attention mask has " + std::to_string(mask.size()) + " entries, expected " +
                     std::to_string(batch * lq * lk));
  }
  const T sc = T(1) / std::sqrt(T(d));
  std::vector<T> out(q.rows() * h, T(0));
  std::vector<T> probs(batch * n_heads * lq * lk);
  std::vector<T> row(lk);
  const T* Q = q.data().data();
  const T* K = k.data().data();
  const T* V = v.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t hd = 0; hd < n_heads; ++hd) {
      T* P = probs.data() + (b * n_heads + hd) * lq * lk;
      for (std::size_t i = 0; i < lq; ++i) {
        const T* qi = Q + (b * lq + i) * h + hd * d;
        for (std::size_t j = 0; j < lk; ++j) {
          const T* kj = K + (b * lk + j) * h + hd * d;
          T s = 0;
          for (std::size_t c = 0; c < d; ++c) s += qi[c] * kj[c];
          row[j] = s * sc;
        }
        const T* m = mask.empty() ? nullptr : mask.data() + (b * lq + i) * lk;
        if (!kernel::softmax_row(row.data(), m, P + i * lk, lk)) ++diagnostics().degenerate_softmax_rows;
        T* oi = out.data() + (b * lq + i) * h + hd * d;
        for (std::size_t j = 0; j < lk; ++j) {
          const T p = P[i * lk + j];
          const T* vj = V + (b * lk + j) * h + hd * d;
          for (std::size_t c = 0; c < d; ++c) oi[c] += p * vj[c];
        }
      }
    }
  }
  return detail::make_result<T>({q.rows(), h}, std::move(out), {q, k, v},
                                [q, k, v, probs = std::move(probs), mask, batch, n_heads, lq, lk, d, h,
                                 sc](Node<T>& self) {
    const T* G = self.grad.data();
    const T* Q = q.data().data();
    const T* K = k.data().data();
    const T* V = v.data().data();
    T* gq = q.requires_grad() ? q.node()->grad_buffer() : nullptr;
    T* gk = k.requires_grad() ? k.node()->grad_buffer() : nullptr;
    T* gv = v.requires_grad() ? v.node()->grad_buffer() : nullptr;
    std::vector<T> dp(lk), ds(lk);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t hd = 0; hd < n_heads; ++hd) {
        const T* P = probs.data() + (b * n_heads + hd) * lq * lk;
        for (std::size_t i = 0; i < lq; ++i) {
          const T* gi = G + (b * lq + i) * h + hd * d;
          for (std::size_t j = 0; j < lk; ++j) {
            const T* vj = V + (b * lk + j) * h + hd * d;
            T s = 0;
            for (std::size_t c = 0; c < d; ++c) s += gi[c] * vj[c];
            dp[j] = s;
            if (gv) {
              T* gvj = gv + (b * lk + j) * h + hd * d;
              const T p = P[i * lk + j];
              for (std::size_t c = 0; c < d; ++c) gvj[c] += p * gi[c];
            }
          }
          const T* m = mask.empty() ? nullptr : mask.data() + (b * lq + i) * lk;
          bool visible = true;
          if (m) {
            visible = false;
            for (std::size_t j = 0; j < lk; ++j) visible = visible || m[j] > T(kBlocked / 2);
          }
          if (!visible) continue;
          std::fill(ds.begin(), ds.end(), T(0));
          kernel::softmax_row_backward(P + i * lk, dp.data(), ds.data(), lk);
          const T* qi = Q + (b * lq + i) * h + hd * d;
          for (std::size_t j = 0; j < lk; ++j) {
            const T dsj = ds[j] * sc;
            if (dsj == T(0)) continue;
            const T* kj = K + (b * lk + j) * h + hd * d;
            if (gq) {
              T* gqi = gq + (b * lq + i) * h + hd * d;
              for (std::size_t c = 0; c < d; ++c) gqi[c] += dsj * kj[c];
            }
            if (gk) {
              T* gkj = gk + (b * lk + j) * h + hd * d;
              for (std::size_t c = 0; c < d; ++c) gkj[c] += dsj * qi[c];
            }
          }
        }
      }
    }
  });
}

}  // namespace vlmix
