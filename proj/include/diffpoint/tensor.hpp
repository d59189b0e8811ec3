// SPDX-License-Identifier: Apache-2.0
// Dense row-major tensors (rank 1 or 2) with reverse-mode autodiff.
//
// Ops build a dynamic graph of shared nodes; backward() runs a topological
// sweep and accumulates gradients additively, so parameters shared across
// sub-graphs pick up contributions from every use. Callers zero gradients
// explicitly between steps.
//
// Reductions that a set-style model must not expose to input ordering
// (softmax denominators, attention-weighted sums, column means) sum their
// addends in sorted order, which makes permutation invariance bit-exact
// rather than approximate. Everything is single-threaded and deterministic.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "diffpoint/error.hpp"

namespace diffpoint {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

// Sums addends in ascending value order: a canonical order shared by every
// permutation of the same multiset, so the rounded result is bit-identical.
inline double ordered_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double total = 0.0;
  for (double t : terms) total += t;
  return total;
}

template <class Real>
struct TensorNode {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until first touched
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
  }
};

template <class Real>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(std::shared_ptr<TensorNode<Real>> node) : node_(std::move(node)) {}

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode<Real>>();
    n->data.assign(shape_numel(shape), Real(0));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT full(Shape shape, Real value, bool requires_grad = false) {
    TensorT t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static TensorT from_vector(std::vector<Real> values, Shape shape, bool requires_grad = false) {
    if (values.size() != shape_numel(shape))
      throw ShapeError("from_vector: " + std::to_string(values.size()) +
                       " values do not fill shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode<Real>>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT scalar(Real value) { return full({1, 1}, value); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->data.size(); }

  // Rank-1 tensors are treated as a single row.
  int rows() const { return node_->shape.size() == 1 ? 1 : node_->shape[0]; }
  int cols() const { return node_->shape.size() == 1 ? node_->shape[0] : node_->shape[1]; }

  Real* data() { return node_->data.data(); }
  const Real* data() const { return node_->data.data(); }
  std::vector<Real>& values() { return node_->data; }
  const std::vector<Real>& values() const { return node_->data; }

  Real at(int r, int c) const { return node_->data[static_cast<std::size_t>(r) * cols() + c]; }

  Real item() const {
    if (size() != 1) throw ContractError("item: tensor has shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  std::vector<Real>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<Real>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.assign(node_->data.size(), Real(0)); }

  TensorNode<Real>* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode<Real>>& ptr() const { return node_; }

 private:
  std::shared_ptr<TensorNode<Real>> node_;
};

using Tensor = TensorT<float>;

namespace detail {

template <class Real>
std::shared_ptr<TensorNode<Real>> make_out(Shape shape,
                                           std::vector<std::shared_ptr<TensorNode<Real>>> parents) {
  auto n = std::make_shared<TensorNode<Real>>();
  n->data.assign(shape_numel(shape), Real(0));
  n->shape = std::move(shape);
  for (auto& p : parents)
    if (p && p->requires_grad) n->requires_grad = true;
  n->parents = std::move(parents);
  return n;
}

template <class Real>
void require_rank2(const TensorT<Real>& t, const char* op) {
  if (t.shape().size() > 2)
    throw ShapeError(std::string(op) + ": expected rank <= 2, got " + shape_str(t.shape()));
}

template <class Real>
void require_same_shape(const TensorT<Real>& a, const TensorT<Real>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shapes disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

// C(m x p) += A(m x n) * B(n x p); accumulation order over k is fixed (ascending).
template <class Real>
void matmul_nn(const Real* a, const Real* b, Real* c, int m, int n, int p) {
  for (int i = 0; i < m; ++i) {
    Real* crow = c + static_cast<std::size_t>(i) * p;
    const Real* arow = a + static_cast<std::size_t>(i) * n;
    for (int k = 0; k < n; ++k) {
      const Real av = arow[k];
      if (av == Real(0)) continue;
      const Real* brow = b + static_cast<std::size_t>(k) * p;
      for (int j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(m x n) += A(m x p) * B(n x p)^T
template <class Real>
void matmul_nt(const Real* a, const Real* b, Real* c, int m, int p, int n) {
  for (int i = 0; i < m; ++i) {
    const Real* arow = a + static_cast<std::size_t>(i) * p;
    Real* crow = c + static_cast<std::size_t>(i) * n;
    for (int k = 0; k < n; ++k) {
      const Real* brow = b + static_cast<std::size_t>(k) * p;
      Real acc = 0;
      for (int j = 0; j < p; ++j) acc += arow[j] * brow[j];
      crow[k] += acc;
    }
  }
}

// C(n x p) += A(m x n)^T * B(m x p)
template <class Real>
void matmul_tn(const Real* a, const Real* b, Real* c, int m, int n, int p) {
  for (int i = 0; i < m; ++i) {
    const Real* arow = a + static_cast<std::size_t>(i) * n;
    const Real* brow = b + static_cast<std::size_t>(i) * p;
    for (int k = 0; k < n; ++k) {
      const Real av = arow[k];
      if (av == Real(0)) continue;
      Real* crow = c + static_cast<std::size_t>(k) * p;
      for (int j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and broadcast ops

template <class Real>
TensorT<Real> add(const TensorT<Real>& a, const TensorT<Real>& b) {
  detail::require_same_shape(a, b, "add");
  auto out = detail::make_out<Real>(a.shape(), {a.ptr(), b.ptr()});
  for (std::size_t i = 0; i < out->data.size(); ++i)
    out->data[i] = a.data()[i] + b.data()[i];
  if (out->requires_grad)
    out->backward_fn = [](TensorNode<Real>& self) {
      for (auto& p : self.parents) {
        if (!p->requires_grad) continue;
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
      }
    };
  return TensorT<Real>(out);
}

template <class Real>
TensorT<Real> sub(const TensorT<Real>& a, const TensorT<Real>& b) {
  detail::require_same_shape(a, b, "sub");
  auto out = detail::make_out<Real>(a.shape(), {a.ptr(), b.ptr()});
  for (std::size_t i = 0; i < out->data.size(); ++i)
    out->data[i] = a.data()[i] - b.data()[i];
  if (out->requires_grad)
    out->backward_fn = [](TensorNode<Real>& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
      }
    };
  return TensorT<Real>(out);
}

template <class Real>
TensorT<Real> mul(const TensorT<Real>& a, const TensorT<Real>& b) {
  detail::require_same_shape(a, b, "mul");
  auto out = detail::make_out<Real>(a.shape(), {a.ptr(), b.ptr()});
  for (std::size_t i = 0; i < out->data.size(); ++i)
    out->data[i] = a.data()[i] * b.data()[i];
  if (out->requires_grad)
    out->backward_fn = [](TensorNode<Real>& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i] * pb->data[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pb->grad[i] += self.grad[i] * pa->data[i];
      }
    };
  return TensorT<Real>(out);
}

template <class Real>
TensorT<Real> scale(const TensorT<Real>& a, Real factor) {
  auto out = detail::make_out<Real>(a.shape(), {a.ptr()});
  for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a.data()[i] * factor;
  if (out->requires_grad)
    out->backward_fn = [factor](TensorNode<Real>& self) {
      auto& pa = self.parents[0];
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * factor;
    };
  return TensorT<Real>(out);
}

// X (m x n) + row vector b (1 x n), broadcast over rows.
template <class Real>
TensorT<Real> add_rowvec(const TensorT<Real>& x, const TensorT<Real>& b) {
  const int m = x.rows(), n = x.cols();
  if (b.rows() != 1 || b.cols() != n)
    throw ShapeError("add_rowvec: bias " + shape_str(b.shape()) + " does not broadcast over " +
                     shape_str(x.shape()));
  auto out = detail::make_out<Real>(x.shape(), {x.ptr(), b.ptr()});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out->data[static_cast<std::size_t>(i) * n + j] =
          x.data()[static_cast<std::size_t>(i) * n + j] + b.data()[j];
  if (out->requires_grad)
    out->backward_fn = [m, n](TensorNode<Real>& self) {
      auto& px = self.parents[0];
      auto& pb = self.parents[1];
      if (px->requires_grad) {
        px->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            pb->grad[j] += self.grad[static_cast<std::size_t>(i) * n + j];
      }
    };
  return TensorT<Real>(out);
}

// ---------------------------------------------------------------------------
// matmul / transpose / reshape

template <class Real>
TensorT<Real> matmul(const TensorT<Real>& a, const TensorT<Real>& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const int m = a.rows(), n = a.cols(), n2 = b.rows(), p = b.cols();
  if (n != n2)
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " * " +
                     shape_str(b.shape()));
  auto out = detail::make_out<Real>({m, p}, {a.ptr(), b.ptr()});
  detail::matmul_nn(a.data(), b.data(), out->data.data(), m, n, p);
  if (out->requires_grad)
    out->backward_fn = [m, n, p](TensorNode<Real>& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      if (pa->requires_grad) {
        pa->ensure_grad();
        detail::matmul_nt(self.grad.data(), pb->data.data(), pa->grad.data(), m, p, n);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        detail::matmul_tn(pa->data.data(), self.grad.data(), pb->grad.data(), m, n, p);
      }
    };
  return TensorT<Real>(out);
}

template <class Real>
TensorT<Real> transpose(const TensorT<Real>& x) {
  detail::require_rank2(x, "transpose");
  const int m = x.rows(), n = x.cols();
  auto out = detail::make_out<Real>({n, m}, {x.ptr()});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out->data[static_cast<std::size_t>(j) * m + i] = x.data()[static_cast<std::size_t>(i) * n + j];
  if (out->requires_grad)
    out->backward_fn = [m, n](TensorNode<Real>& self) {
      auto& px = self.parents[0];
      px->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          px->grad[static_cast<std::size_t>(i) * n + j] +=
              self.grad[static_cast<std::size_t>(j) * m + i];
    };
  return TensorT<Real>(out);
}

template <class Real>
TensorT<Real> reshape(const TensorT<Real>& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  auto out = detail::make_out<Real>(std::move(shape), {x.ptr()});
  out->data = x.values();
  if (out->requires_grad)
    out->backward_fn = [](TensorNode<Real>& self) {
      auto& px = self.parents[0];
      px->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
    };
  return TensorT<Real>(out);
}

// ---------------------------------------------------------------------------
// nonlinearities and normalization

// Exact-erf GELU: x * Phi(x).
template <class Real>
TensorT<Real> gelu(const TensorT<Real>& x) {
  auto out = detail::make_out<Real>(x.shape(), {x.ptr()});
  for (std::size_t i = 0; i < out->data.size(); ++i) {
    const double v = static_cast<double>(x.data()[i]);
    out->data[i] = static_cast<Real>(v * 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)));
  }
  if (out->requires_grad)
    out->backward_fn = [](TensorNode<Real>& self) {
      auto& px = self.parents[0];
      px->ensure_grad();
      constexpr double inv_sqrt_2pi = 0.3989422804014327;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double v = static_cast<double>(px->data[i]);
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        px->grad[i] += self.grad[i] * static_cast<Real>(cdf + v * pdf);
      }
    };
  return TensorT<Real>(out);
}

// Row softmax with max-shift; the denominator is summed in canonical order so
// permuting rows (or the entries feeding equal rows) cannot change the bits.
template <class Real>
TensorT<Real> softmax_rows(const TensorT<Real>& x) {
  detail::require_rank2(x, "softmax_rows");
  const int m = x.rows(), n = x.cols();
  auto out = detail::make_out<Real>(x.shape(), {x.ptr()});
  std::vector<double> exps(static_cast<std::size_t>(n));
  std::vector<double> terms;
  for (int i = 0; i < m; ++i) {
    const Real* row = x.data() + static_cast<std::size_t>(i) * n;
    Real* orow = out->data.data() + static_cast<std::size_t>(i) * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    for (int j = 0; j < n; ++j) exps[j] = std::exp(static_cast<double>(row[j]) - mx);
    terms.assign(exps.begin(), exps.end());
    const double denom = ordered_sum(terms);
    for (int j = 0; j < n; ++j) orow[j] = static_cast<Real>(exps[j] / denom);
  }
  if (out->requires_grad)
    out->backward_fn = [m, n](TensorNode<Real>& self) {
      auto& px = self.parents[0];
      px->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const Real* y = self.data.data() + static_cast<std::size_t>(i) * n;
        const Real* dy = self.grad.data() + static_cast<std::size_t>(i) * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += static_cast<double>(dy[j]) * y[j];
        Real* dx = px->grad.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j)
          dx[j] += static_cast<Real>(static_cast<double>(y[j]) * (static_cast<double>(dy[j]) - dot));
      }
    };
  return TensorT<Real>(out);
}

template <class Real>
TensorT<Real> softmax(const TensorT<Real>& x, int axis) {
  detail::require_rank2(x, "softmax");
  if (axis == 1 || (x.shape().size() == 1 && axis == 0)) return softmax_rows(x);
  if (axis == 0) return transpose(softmax_rows(transpose(x)));
  throw ContractError("softmax: axis must be 0 or 1, got " + std::to_string(axis));
}

// Row-wise layer norm (biased variance), y = gamma * (x - mean) / sqrt(var + eps) + beta.
template <class Real>
TensorT<Real> layer_norm_rows(const TensorT<Real>& x, const TensorT<Real>& gamma,
                              const TensorT<Real>& beta, Real eps = Real(1e-5)) {
  detail::require_rank2(x, "layer_norm_rows");
  const int m = x.rows(), n = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != n || beta.rows() != 1 || beta.cols() != n)
    throw ShapeError("layer_norm_rows: gamma/beta must be (1x" + std::to_string(n) + "), got " +
                     shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  auto out = detail::make_out<Real>(x.shape(), {x.ptr(), gamma.ptr(), beta.ptr()});
  auto stats = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m) * 2);
  for (int i = 0; i < m; ++i) {
    const Real* row = x.data() + static_cast<std::size_t>(i) * n;
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += static_cast<double>(row[j]);
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double d = static_cast<double>(row[j]) - mean;
      var += d * d;
    }
    var /= n;
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
    (*stats)[2 * i] = mean;
    (*stats)[2 * i + 1] = inv;
    Real* orow = out->data.data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j)
      orow[j] = static_cast<Real>((static_cast<double>(row[j]) - mean) * inv *
                                      static_cast<double>(gamma.data()[j]) +
                                  static_cast<double>(beta.data()[j]));
  }
  if (out->requires_grad)
    out->backward_fn = [m, n, stats](TensorNode<Real>& self) {
      auto& px = self.parents[0];
      auto& pg = self.parents[1];
      auto& pb = self.parents[2];
      if (px->requires_grad) px->ensure_grad();
      if (pg->requires_grad) pg->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const double mean = (*stats)[2 * i];
        const double inv = (*stats)[2 * i + 1];
        const Real* xrow = px->data.data() + static_cast<std::size_t>(i) * n;
        const Real* dy = self.grad.data() + static_cast<std::size_t>(i) * n;
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int j = 0; j < n; ++j) {
          const double xhat = (static_cast<double>(xrow[j]) - mean) * inv;
          const double dxhat = static_cast<double>(dy[j]) * pg->data[j];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
          if (pg->requires_grad) pg->grad[j] += static_cast<Real>(dy[j] * xhat);
          if (pb->requires_grad) pb->grad[j] += dy[j];
        }
        if (px->requires_grad) {
          Real* dx = px->grad.data() + static_cast<std::size_t>(i) * n;
          for (int j = 0; j < n; ++j) {
            const double xhat = (static_cast<double>(xrow[j]) - mean) * inv;
            const double dxhat = static_cast<double>(dy[j]) * pg->data[j];
            dx[j] += static_cast<Real>((dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n) * inv);
          }
        }
      }
    };
  return TensorT<Real>(out);
}

// ---------------------------------------------------------------------------
// structural ops

// X ((s*k) x c) -> (s x c): per-channel max over each contiguous block of k
// rows. Ties pick the lowest row, and the max itself is order-independent, so
// permuting rows within a block cannot change the pooled values.
template <class Real>
TensorT<Real> segment_max_rows(const TensorT<Real>& x, int segment) {
  detail::require_rank2(x, "segment_max_rows");
  const int total = x.rows(), c = x.cols();
  if (segment <= 0 || total % segment != 0)
    throw ContractError("segment_max_rows: " + std::to_string(total) +
                        " rows are not divisible into segments of " + std::to_string(segment));
  const int s = total / segment;
  auto out = detail::make_out<Real>({s, c}, {x.ptr()});
  auto argmax = std::make_shared<std::vector<int>>(static_cast<std::size_t>(s) * c);
  for (int seg = 0; seg < s; ++seg) {
    for (int j = 0; j < c; ++j) {
      int best = seg * segment;
      Real bestv = x.data()[static_cast<std::size_t>(best) * c + j];
      for (int r = seg * segment + 1; r < (seg + 1) * segment; ++r) {
        const Real v = x.data()[static_cast<std::size_t>(r) * c + j];
        if (v > bestv) {
          bestv = v;
          best = r;
        }
      }
      out->data[static_cast<std::size_t>(seg) * c + j] = bestv;
      (*argmax)[static_cast<std::size_t>(seg) * c + j] = best;
    }
  }
  if (out->requires_grad)
    out->backward_fn = [s, c, argmax](TensorNode<Real>& self) {
      auto& px = self.parents[0];
      px->ensure_grad();
      for (int seg = 0; seg < s; ++seg)
        for (int j = 0; j < c; ++j) {
          const int r = (*argmax)[static_cast<std::size_t>(seg) * c + j];
          px->grad[static_cast<std::size_t>(r) * c + j] +=
              self.grad[static_cast<std::size_t>(seg) * c + j];
        }
    };
  return TensorT<Real>(out);
}

// X (s x c) -> ((s*times) x c), each row repeated `times` consecutively.
template <class Real>
TensorT<Real> repeat_rows(const TensorT<Real>& x, int times) {
  detail::require_rank2(x, "repeat_rows");
  if (times <= 0) throw ContractError("repeat_rows: times must be positive");
  const int s = x.rows(), c = x.cols();
  auto out = detail::make_out<Real>({s * times, c}, {x.ptr()});
  for (int i = 0; i < s; ++i)
    for (int t = 0; t < times; ++t)
      std::copy_n(x.data() + static_cast<std::size_t>(i) * c, c,
                  out->data.data() + (static_cast<std::size_t>(i) * times + t) * c);
  if (out->requires_grad)
    out->backward_fn = [s, c, times](TensorNode<Real>& self) {
      auto& px = self.parents[0];
      px->ensure_grad();
      for (int i = 0; i < s; ++i)
        for (int t = 0; t < times; ++t) {
          const Real* g = self.grad.data() + (static_cast<std::size_t>(i) * times + t) * c;
          Real* dst = px->grad.data() + static_cast<std::size_t>(i) * c;
          for (int j = 0; j < c; ++j) dst[j] += g[j];
        }
    };
  return TensorT<Real>(out);
}

template <class Real>
TensorT<Real> concat_cols(const TensorT<Real>& a, const TensorT<Real>& b) {
  detail::require_rank2(a, "concat_cols");
  detail::require_rank2(b, "concat_cols");
  if (a.rows() != b.rows())
    throw ShapeError("concat_cols: row counts disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const int m = a.rows(), ca = a.cols(), cb = b.cols();
  auto out = detail::make_out<Real>({m, ca + cb}, {a.ptr(), b.ptr()});
  for (int i = 0; i < m; ++i) {
    std::copy_n(a.data() + static_cast<std::size_t>(i) * ca, ca,
                out->data.data() + static_cast<std::size_t>(i) * (ca + cb));
    std::copy_n(b.data() + static_cast<std::size_t>(i) * cb, cb,
                out->data.data() + static_cast<std::size_t>(i) * (ca + cb) + ca);
  }
  if (out->requires_grad)
    out->backward_fn = [m, ca, cb](TensorNode<Real>& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < ca; ++j)
            pa->grad[static_cast<std::size_t>(i) * ca + j] +=
                self.grad[static_cast<std::size_t>(i) * (ca + cb) + j];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < cb; ++j)
            pb->grad[static_cast<std::size_t>(i) * cb + j] +=
                self.grad[static_cast<std::size_t>(i) * (ca + cb) + ca + j];
      }
    };
  return TensorT<Real>(out);
}

template <class Real>
TensorT<Real> concat_rows(const std::vector<TensorT<Real>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no tensors given");
  const int c = parts[0].cols();
  int m = 0;
  std::vector<std::shared_ptr<TensorNode<Real>>> parents;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_rows");
    if (p.cols() != c)
      throw ShapeError("concat_rows: column counts disagree: " + shape_str(parts[0].shape()) +
                       " vs " + shape_str(p.shape()));
    m += p.rows();
    parents.push_back(p.ptr());
  }
  auto out = detail::make_out<Real>({m, c}, std::move(parents));
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.data(), p.size(), out->data.data() + off);
    off += p.size();
  }
  if (out->requires_grad)
    out->backward_fn = [](TensorNode<Real>& self) {
      std::size_t off = 0;
      for (auto& p : self.parents) {
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::size_t i = 0; i < p->data.size(); ++i) p->grad[i] += self.grad[off + i];
        }
        off += p->data.size();
      }
    };
  return TensorT<Real>(out);
}

template <class Real>
TensorT<Real> slice_rows(const TensorT<Real>& x, int offset, int count) {
  detail::require_rank2(x, "slice_rows");
  const int m = x.rows(), c = x.cols();
  if (offset < 0 || count <= 0 || offset + count > m)
    throw ShapeError("slice_rows: rows [" + std::to_string(offset) + ", " +
                     std::to_string(offset + count) + ") out of range for " +
                     shape_str(x.shape()));
  auto out = detail::make_out<Real>({count, c}, {x.ptr()});
  std::copy_n(x.data() + static_cast<std::size_t>(offset) * c,
              static_cast<std::size_t>(count) * c, out->data.data());
  if (out->requires_grad)
    out->backward_fn = [offset, c](TensorNode<Real>& self) {
      auto& px = self.parents[0];
      px->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        px->grad[static_cast<std::size_t>(offset) * c + i] += self.grad[i];
    };
  return TensorT<Real>(out);
}

template <class Real>
TensorT<Real> slice_cols(const TensorT<Real>& x, int offset, int count) {
  detail::require_rank2(x, "slice_cols");
  const int m = x.rows(), c = x.cols();
  if (offset < 0 || count <= 0 || offset + count > c)
    throw ShapeError("slice_cols: cols [" + std::to_string(offset) + ", " +
                     std::to_string(offset + count) + ") out of range for " +
                     shape_str(x.shape()));
  auto out = detail::make_out<Real>({m, count}, {x.ptr()});
  for (int i = 0; i < m; ++i)
    std::copy_n(x.data() + static_cast<std::size_t>(i) * c + offset, count,
                out->data.data() + static_cast<std::size_t>(i) * count);
  if (out->requires_grad)
    out->backward_fn = [m, c, offset, count](TensorNode<Real>& self) {
      auto& px = self.parents[0];
      px->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < count; ++j)
          px->grad[static_cast<std::size_t>(i) * c + offset + j] +=
              self.grad[static_cast<std::size_t>(i) * count + j];
    };
  return TensorT<Real>(out);
}

// ---------------------------------------------------------------------------
// reductions

template <class Real>
TensorT<Real> sum_all(const TensorT<Real>& x) {
  auto out = detail::make_out<Real>({1, 1}, {x.ptr()});
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += static_cast<double>(x.data()[i]);
  out->data[0] = static_cast<Real>(acc);
  if (out->requires_grad)
    out->backward_fn = [](TensorNode<Real>& self) {
      auto& px = self.parents[0];
      px->ensure_grad();
      for (auto& g : px->grad) g += self.grad[0];
    };
  return TensorT<Real>(out);
}

template <class Real>
TensorT<Real> mean_all(const TensorT<Real>& x) {
  return scale(sum_all(x), Real(1) / static_cast<Real>(x.size()));
}

// Column means over rows, summed in canonical order: the pooled vector is
// bit-identical under any permutation of the input rows.
template <class Real>
TensorT<Real> mean_over_rows(const TensorT<Real>& x) {
  detail::require_rank2(x, "mean_over_rows");
  const int m = x.rows(), c = x.cols();
  auto out = detail::make_out<Real>({1, c}, {x.ptr()});
  std::vector<double> terms(static_cast<std::size_t>(m));
  for (int j = 0; j < c; ++j) {
    for (int i = 0; i < m; ++i)
      terms[static_cast<std::size_t>(i)] =
          static_cast<double>(x.data()[static_cast<std::size_t>(i) * c + j]);
    out->data[j] = static_cast<Real>(ordered_sum(terms) / m);
  }
  if (out->requires_grad)
    out->backward_fn = [m, c](TensorNode<Real>& self) {
      auto& px = self.parents[0];
      px->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j)
          px->grad[static_cast<std::size_t>(i) * c + j] += self.grad[j] / static_cast<Real>(m);
    };
  return TensorT<Real>(out);
}

// out(i, d) = sum_j W(i, j) * V(j, d), with each sum taken in canonical order.
// This is the attention aggregation: permuting the j rows of V together with
// the j columns of W leaves every output bit unchanged.
template <class Real>
TensorT<Real> weighted_sum_rows(const TensorT<Real>& w, const TensorT<Real>& v) {
  detail::require_rank2(w, "weighted_sum_rows");
  detail::require_rank2(v, "weighted_sum_rows");
  const int q = w.rows(), n = w.cols(), d = v.cols();
  if (v.rows() != n)
    throw ShapeError("weighted_sum_rows: weights " + shape_str(w.shape()) +
                     " do not match values " + shape_str(v.shape()));
  auto out = detail::make_out<Real>({q, d}, {w.ptr(), v.ptr()});
  std::vector<double> terms(static_cast<std::size_t>(n));
  for (int i = 0; i < q; ++i) {
    const Real* wrow = w.data() + static_cast<std::size_t>(i) * n;
    for (int dd = 0; dd < d; ++dd) {
      for (int j = 0; j < n; ++j)
        terms[static_cast<std::size_t>(j)] =
            static_cast<double>(wrow[j]) *
            static_cast<double>(v.data()[static_cast<std::size_t>(j) * d + dd]);
      out->data[static_cast<std::size_t>(i) * d + dd] = static_cast<Real>(ordered_sum(terms));
    }
  }
  if (out->requires_grad)
    out->backward_fn = [q, n, d](TensorNode<Real>& self) {
      auto& pw = self.parents[0];
      auto& pv = self.parents[1];
      if (pw->requires_grad) {
        pw->ensure_grad();
        // dW = dY * V^T
        detail::matmul_nt(self.grad.data(), pv->data.data(), pw->grad.data(), q, d, n);
      }
      if (pv->requires_grad) {
        pv->ensure_grad();
        // dV = W^T * dY
        detail::matmul_tn(pw->data.data(), self.grad.data(), pv->grad.data(), q, n, d);
      }
    };
  return TensorT<Real>(out);
}

// ---------------------------------------------------------------------------
// backward

template <class Real>
void backward(const TensorT<Real>& loss, Real seed = Real(1)) {
  if (loss.size() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  std::vector<TensorNode<Real>*> order;
  std::unordered_set<const TensorNode<Real>*> visited;
  std::vector<std::pair<TensorNode<Real>*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->parents.size()) {
      TensorNode<Real>* parent = top.first->parents[top.second].get();
      ++top.second;
      if (parent && parent->requires_grad && !visited.contains(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(top.first);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

}  // namespace diffpoint
