#pragma once

// Dense row-major matrices and the handful of kernels the segmentation heads
// and the prototype mining are assembled from.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/SVD>

#include "offseg/error.hpp"

namespace offseg {

/// Precision tags. Analysis paths (mining, gradient checks) run wide, training
/// runs narrow.
using Wide = double;
using Narrow = float;

template <class T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw ShapeError("Matrix: data length " + std::to_string(data_.size()) + " != " +
                       std::to_string(rows_) + "x" + std::to_string(cols_));
  }
  Matrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<T> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const T> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }

  std::string shape() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

  template <class U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    std::transform(data_.begin(), data_.end(), out.data().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <class T>
bool all_finite(const Matrix<T>& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](T v) { return std::isfinite(v); });
}

template <class T>
void require_finite(const Matrix<T>& a, const char* stage) {
  if (!all_finite(a)) throw NumericError(std::string("non-finite values in ") + stage);
}

template <class T>
void require_same_shape(const Matrix<T>& a, const Matrix<T>& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
}

template <class T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

/// C = A·B. Every entry accumulates its products in increasing inner index,
/// so results are bit-reproducible for a given build.
template <class T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions differ, " + a.shape() + " · " + b.shape());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Matrix<T> c(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c.row(i).data();
    const T* ai = a.row(i).data();
    for (std::size_t t = 0; t < k; ++t) {
      const T av = ai[t];
      const T* bt = b.row(t).data();
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  }
  require_finite(c, "matmul");
  return c;
}

/// A·Bᵀ
template <class T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  return matmul(a, transpose(b));
}

/// Aᵀ·B
template <class T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  return matmul(transpose(a), b);
}

template <class T>
Matrix<T>& operator+=(Matrix<T>& a, const Matrix<T>& b) {
  require_same_shape(a, b, "add");
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) ad[i] += bd[i];
  return a;
}

template <class T>
Matrix<T> operator+(Matrix<T> a, const Matrix<T>& b) {
  a += b;
  return a;
}

template <class T>
Matrix<T>& operator-=(Matrix<T>& a, const Matrix<T>& b) {
  require_same_shape(a, b, "sub");
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) ad[i] -= bd[i];
  return a;
}

template <class T>
Matrix<T> operator-(Matrix<T> a, const Matrix<T>& b) {
  a -= b;
  return a;
}

template <class T>
Matrix<T>& operator*=(Matrix<T>& a, T s) {
  for (auto& v : a.data()) v *= s;
  return a;
}

template <class T>
Matrix<T> operator*(Matrix<T> a, T s) {
  a *= s;
  return a;
}

template <class T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  require_same_shape(a, b, "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

template <class T>
T frobenius_norm(const Matrix<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v * v;
  return std::sqrt(s);
}

/// Row-wise softmax with per-row max subtraction. Softmax over columns is
/// transpose(softmax_rows(transpose(A))).
template <class T>
Matrix<T> softmax_rows(const Matrix<T>& a) {
  require_finite(a, "softmax input");
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto in = a.row(i);
    auto o = out.row(i);
    T mx = *std::max_element(in.begin(), in.end());
    T sum = 0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (auto& v : o) v /= sum;
  }
  return out;
}

template <class T>
Matrix<T> softmax_cols(const Matrix<T>& a) {
  return transpose(softmax_rows(transpose(a)));
}

/// Thin singular value decomposition A = U·diag(s)·Vᵀ with U m×r, V n×r,
/// r = min(m, n), singular values in descending order.
template <class T>
struct Svd {
  Matrix<T> u;
  std::vector<T> s;
  Matrix<T> v;
};

template <class T>
Svd<T> svd(const Matrix<T>& a) {
  require_finite(a, "svd input");
  using Dense = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
  using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto m = static_cast<Eigen::Index>(a.rows()), n = static_cast<Eigen::Index>(a.cols());
  const Dense dense = Eigen::Map<const RowMajor>(a.data().data(), m, n);
  Eigen::JacobiSVD<Dense> solver(dense, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (solver.info() != Eigen::Success) throw NumericError("svd: Jacobi iteration did not converge");

  const std::size_t r = std::min(a.rows(), a.cols());
  Svd<T> out{Matrix<T>(a.rows(), r), std::vector<T>(r), Matrix<T>(a.cols(), r)};
  for (std::size_t k = 0; k < r; ++k) {
    out.s[k] = solver.singularValues()(static_cast<Eigen::Index>(k));
    for (std::size_t i = 0; i < a.rows(); ++i)
      out.u(i, k) = solver.matrixU()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
    for (std::size_t i = 0; i < a.cols(); ++i)
      out.v(i, k) = solver.matrixV()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
  }
  require_finite(out.u, "svd");
  require_finite(out.v, "svd");
  return out;
}

/// Default relative cutoff for pinv: max(m, n)·machine epsilon.
template <class T>
T default_pinv_rtol(const Matrix<T>& a) {
  return static_cast<T>(std::max(a.rows(), a.cols())) * std::numeric_limits<T>::epsilon();
}

/// Moore–Penrose pseudoinverse via SVD. Singular values σ ≤ rtol·σ_max are
/// treated as zero.
template <class T>
Matrix<T> pinv(const Matrix<T>& a, std::optional<T> rtol = std::nullopt) {
  const T rel = rtol.value_or(default_pinv_rtol(a));
  Svd<T> d = svd(a);
  const std::size_t n = a.cols(), r = d.s.size();
  const T cutoff = r ? rel * d.s.front() : T(0);
  // A⁺ = V·diag(1/σ)·Uᵀ
  Matrix<T> vs(n, r);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < r; ++k)
      vs(i, k) = d.s[k] > cutoff ? d.v(i, k) / d.s[k] : T(0);
  return matmul_nt(vs, d.u);
}

/// Pairwise cosine similarity of the rows of V.
template <class T>
Matrix<T> cosine_similarity_matrix(const Matrix<T>& v) {
  require_finite(v, "cosine_similarity_matrix input");
  const std::size_t n = v.rows();
  std::vector<T> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    T s = 0;
    for (T x : v.row(i)) s += x * x;
    norms[i] = std::sqrt(s);
    if (!(norms[i] > T(0)))
      throw NumericError("cosine_similarity_matrix: row " + std::to_string(i) + " has zero norm");
  }
  Matrix<T> s(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    s(i, i) = T(1);
    for (std::size_t j = i + 1; j < n; ++j) {
      T dot = 0;
      auto a = v.row(i), b = v.row(j);
      for (std::size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
      T c = std::clamp(dot / (norms[i] * norms[j]), T(-1), T(1));
      s(i, j) = s(j, i) = c;
    }
  }
  return s;
}

template <class T>
std::ostream& operator<<(std::ostream& os, const Matrix<T>& a) {
  os << "[";
  for (std::size_t i = 0; i < a.rows(); ++i) {
    os << (i ? ",\n [" : "[");
    for (std::size_t j = 0; j < a.cols(); ++j) os << (j ? ", " : "") << a(i, j);
    os << "]";
  }
  return os << "]";
}

}  // namespace offseg
