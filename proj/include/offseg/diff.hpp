#pragma once

// Reverse-mode building blocks: each primitive exposes its value and its
// vector-Jacobian product. grad_check arbitrates every analytic gradient.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "offseg/linalg.hpp"

namespace offseg {

/// Two affine layers with a ReLU in between: in → hidden → out. Biases are
/// stored as 1×n matrices.
template <class T>
struct MLPParams {
  Matrix<T> w1;  // in × hidden
  Matrix<T> b1;  // 1 × hidden
  Matrix<T> w2;  // hidden × out
  Matrix<T> b2;  // 1 × out

  MLPParams() = default;
  MLPParams(std::size_t in, std::size_t hidden, std::size_t out)
      : w1(in, hidden), b1(1, hidden), w2(hidden, out), b2(1, out) {}

  std::size_t in_dim() const { return w1.rows(); }
  std::size_t hidden_dim() const { return w1.cols(); }
  std::size_t out_dim() const { return w2.cols(); }
  std::size_t count() const { return w1.size() + b1.size() + w2.size() + b2.size(); }

  void validate() const {
    if (b1.rows() != 1 || b1.cols() != w1.cols() || w2.rows() != w1.cols() || b2.rows() != 1 ||
        b2.cols() != w2.cols())
      throw ShapeError("MLPParams: inconsistent shapes w1 " + w1.shape() + ", b1 " + b1.shape() +
                       ", w2 " + w2.shape() + ", b2 " + b2.shape());
  }

  friend bool operator==(const MLPParams&, const MLPParams&) = default;
};

template <class T>
struct MlpCache {
  Matrix<T> x;       // input
  Matrix<T> pre;     // X·W1 + b1
  Matrix<T> hidden;  // relu(pre)
};

template <class T>
struct MlpOutput {
  Matrix<T> y;
  MlpCache<T> cache;
};

template <class T>
struct MlpBackward {
  Matrix<T> dx;
  MLPParams<T> grads;
};

namespace detail {
template <class T>
void add_row_bias(Matrix<T>& m, const Matrix<T>& bias) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias(0, j);
  }
}

template <class T>
Matrix<T> column_sums(const Matrix<T>& m) {
  Matrix<T> s(1, m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) s(0, j) += m(i, j);
  return s;
}
}  // namespace detail

/// Y = relu(X·W1 + b1)·W2 + b2, applied row-wise.
template <class T>
MlpOutput<T> mlp_forward(const MLPParams<T>& p, const Matrix<T>& x) {
  p.validate();
  if (x.cols() != p.in_dim())
    throw ShapeError("mlp_forward: input " + x.shape() + " does not match w1 " + p.w1.shape());
  MlpOutput<T> out;
  out.cache.x = x;
  out.cache.pre = matmul(x, p.w1);
  detail::add_row_bias(out.cache.pre, p.b1);
  out.cache.hidden = out.cache.pre;
  for (auto& v : out.cache.hidden.data()) v = v > T(0) ? v : T(0);
  out.y = matmul(out.cache.hidden, p.w2);
  detail::add_row_bias(out.y, p.b2);
  return out;
}

/// Exact reverse of mlp_forward. The ReLU subgradient at 0 is 0.
template <class T>
MlpBackward<T> mlp_backward(const MLPParams<T>& p, const MlpCache<T>& cache, const Matrix<T>& dy) {
  if (dy.rows() != cache.hidden.rows() || dy.cols() != p.out_dim())
    throw ShapeError("mlp_backward: upstream " + dy.shape() + " does not match cache " +
                     cache.hidden.shape() + " / w2 " + p.w2.shape());
  MlpBackward<T> g;
  g.grads.w2 = matmul_tn(cache.hidden, dy);
  g.grads.b2 = detail::column_sums(dy);
  Matrix<T> dh = matmul_nt(dy, p.w2);
  for (std::size_t i = 0; i < dh.size(); ++i)
    if (!(cache.pre.data()[i] > T(0))) dh.data()[i] = T(0);
  g.grads.w1 = matmul_tn(cache.x, dh);
  g.grads.b1 = detail::column_sums(dh);
  g.dx = matmul_nt(dh, p.w1);
  return g;
}

template <class T>
MLPParams<T>& operator+=(MLPParams<T>& a, const MLPParams<T>& b) {
  a.w1 += b.w1;
  a.b1 += b.b1;
  a.w2 += b.w2;
  a.b2 += b.b2;
  return a;
}

template <class T>
MLPParams<T> zeros_like(const MLPParams<T>& p) {
  return MLPParams<T>(p.in_dim(), p.hidden_dim(), p.out_dim());
}

template <class T>
struct MatmulGrads {
  Matrix<T> da;
  Matrix<T> db;
};

/// For C = A·B: dA = dC·Bᵀ, dB = Aᵀ·dC.
template <class T>
MatmulGrads<T> vjp_matmul(const Matrix<T>& a, const Matrix<T>& b, const Matrix<T>& dc) {
  if (a.cols() != b.rows() || dc.rows() != a.rows() || dc.cols() != b.cols())
    throw ShapeError("vjp_matmul: " + a.shape() + " · " + b.shape() + " with cotangent " +
                     dc.shape());
  return {matmul_nt(dc, b), matmul_tn(a, dc)};
}

/// For Y = softmax_rows(X): dX = Y ⊙ (dY − rowsum(dY ⊙ Y)).
template <class T>
Matrix<T> vjp_softmax_rows(const Matrix<T>& y, const Matrix<T>& dy) {
  require_same_shape(y, dy, "vjp_softmax_rows");
  Matrix<T> dx(y.rows(), y.cols());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto yr = y.row(i), dr = dy.row(i);
    T dot = 0;
    for (std::size_t j = 0; j < yr.size(); ++j) dot += dr[j] * yr[j];
    auto o = dx.row(i);
    for (std::size_t j = 0; j < yr.size(); ++j) o[j] = yr[j] * (dr[j] - dot);
  }
  return dx;
}

/// A value paired with its additively accumulated gradient.
template <class T>
struct GradSlot {
  Matrix<T> value;
  Matrix<T> grad;

  GradSlot() = default;
  explicit GradSlot(Matrix<T> v) : value(std::move(v)), grad(value.rows(), value.cols()) {}

  void zero_grad() { grad = Matrix<T>(value.rows(), value.cols()); }
  void accumulate(const Matrix<T>& g) {
    require_same_shape(value, g, "GradSlot::accumulate");
    grad += g;
  }
};

struct GradCheckReport {
  bool passed = false;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;  // offending coordinate
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool non_finite = false;  // f evaluated to NaN/Inf at worst_index
  std::size_t coords = 0;
};

/// Compares `analytic` against central differences of f around theta.
/// Relative error per coordinate is |a − n| / max(|a|, |n|, 1e-8).
inline GradCheckReport grad_check(const std::function<double(std::span<const double>)>& f,
                                  std::span<const double> theta, std::span<const double> analytic,
                                  double eps = 1e-5, double tol = 1e-5) {
  if (theta.size() != analytic.size())
    throw ShapeError("grad_check: " + std::to_string(theta.size()) + " parameters but " +
                     std::to_string(analytic.size()) + " gradient entries");
  GradCheckReport rep;
  rep.coords = theta.size();
  std::vector<double> work(theta.begin(), theta.end());
  for (std::size_t i = 0; i < work.size(); ++i) {
    const double orig = work[i];
    work[i] = orig + eps;
    const double fp = f(work);
    work[i] = orig - eps;
    const double fm = f(work);
    work[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      rep.passed = false;
      rep.non_finite = true;
      rep.worst_index = i;
      rep.max_rel_error = std::numeric_limits<double>::infinity();
      return rep;
    }
    const double num = (fp - fm) / (2.0 * eps);
    const double a = analytic[i];
    const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-8});
    if (i == 0 || rel > rep.max_rel_error) {
      rep.max_rel_error = rel;
      rep.worst_index = i;
      rep.analytic_at_worst = a;
      rep.numeric_at_worst = num;
    }
  }
  rep.passed = rep.max_rel_error < tol;
  return rep;
}

/// Fills a matrix with draws from normal(0, stddev).
template <class T, class Rng>
void fill_normal(Matrix<T>& m, Rng& rng, double stddev) {
  std::normal_distribution<double> nd(0.0, stddev);
  for (auto& v : m.data()) v = static_cast<T>(nd(rng));
}

}  // namespace offseg
