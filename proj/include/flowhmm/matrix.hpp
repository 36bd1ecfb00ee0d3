#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowhmm {

/// Dense row-major matrix of doubles. Value type: copy/move freely.
/// Log-domain matrices may hold -inf; +inf and NaN are never valid.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  double* row_ptr(std::size_t r) { return data.data() + r * cols; }
  const double* row_ptr(std::size_t r) const { return data.data() + r * cols; }

  std::vector<double> row(std::size_t r) const {
    return std::vector<double>(row_ptr(r), row_ptr(r) + cols);
  }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

inline Matrix identity_matrix(std::size_t n) {
  Matrix m(n, n, 0.0);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

/// Standard product with a fixed i-k-j loop order so summation order is
/// deterministic across runs.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows)
    throw std::invalid_argument("matmul: shape mismatch " + std::to_string(a.rows) + "x" +
                                std::to_string(a.cols) + " * " + std::to_string(b.rows) + "x" +
                                std::to_string(b.cols));
  Matrix c(a.rows, b.cols, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = b.row_ptr(k);
      double* crow = c.row_ptr(i);
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

/// y = A x
inline std::vector<double> matvec(const Matrix& a, const std::vector<double>& x) {
  if (a.cols != x.size()) throw std::invalid_argument("matvec: shape mismatch");
  std::vector<double> y(a.rows, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* row = a.row_ptr(i);
    double acc = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) acc += row[j] * x[j];
    y[i] = acc;
  }
  return y;
}

/// y = A^T x
inline std::vector<double> matvec_t(const Matrix& a, const std::vector<double>& x) {
  if (a.rows != x.size()) throw std::invalid_argument("matvec_t: shape mismatch");
  std::vector<double> y(a.cols, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double xi = x[i];
    const double* row = a.row_ptr(i);
    for (std::size_t j = 0; j < a.cols; ++j) y[j] += row[j] * xi;
  }
  return y;
}

/// LU decomposition with partial pivoting. Kept around wherever a
/// determinant, solve, or inverse of the same matrix is needed.
struct LuDecomposition {
  Matrix lu;                  // packed L (unit diag) and U
  std::vector<std::size_t> perm;
  int perm_sign = 1;
  bool singular = false;
};

inline LuDecomposition lu_factor(const Matrix& a) {
  if (a.rows != a.cols) throw std::invalid_argument("lu_factor: matrix not square");
  const std::size_t n = a.rows;
  LuDecomposition d;
  d.lu = a;
  d.perm.resize(n);
  for (std::size_t i = 0; i < n; ++i) d.perm[i] = i;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    double best = std::abs(d.lu(k, k));
    for (std::size_t i = k + 1; i < n; ++i) {
      const double v = std::abs(d.lu(i, k));
      if (v > best) { best = v; piv = i; }
    }
    if (best == 0.0) { d.singular = true; continue; }
    if (piv != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(d.lu(k, j), d.lu(piv, j));
      std::swap(d.perm[k], d.perm[piv]);
      d.perm_sign = -d.perm_sign;
    }
    const double pivot = d.lu(k, k);
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = d.lu(i, k) / pivot;
      d.lu(i, k) = f;
      for (std::size_t j = k + 1; j < n; ++j) d.lu(i, j) -= f * d.lu(k, j);
    }
  }
  return d;
}

/// log|det A| from the factorization; -inf when singular.
inline double lu_log_abs_det(const LuDecomposition& d) {
  if (d.singular) return -std::numeric_limits<double>::infinity();
  double s = 0.0;
  for (std::size_t i = 0; i < d.lu.rows; ++i) s += std::log(std::abs(d.lu(i, i)));
  return s;
}

inline double lu_det_sign(const LuDecomposition& d) {
  if (d.singular) return 0.0;
  double sign = static_cast<double>(d.perm_sign);
  for (std::size_t i = 0; i < d.lu.rows; ++i)
    if (d.lu(i, i) < 0.0) sign = -sign;
  return sign;
}

inline std::vector<double> lu_solve(const LuDecomposition& d, const std::vector<double>& b) {
  if (d.singular) throw std::domain_error("lu_solve: matrix is singular");
  const std::size_t n = d.lu.rows;
  if (b.size() != n) throw std::invalid_argument("lu_solve: shape mismatch");
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = b[d.perm[i]];
  for (std::size_t i = 1; i < n; ++i) {
    double acc = x[i];
    for (std::size_t j = 0; j < i; ++j) acc -= d.lu(i, j) * x[j];
    x[i] = acc;
  }
  for (std::size_t ii = n; ii-- > 0;) {
    double acc = x[ii];
    for (std::size_t j = ii + 1; j < n; ++j) acc -= d.lu(ii, j) * x[j];
    x[ii] = acc / d.lu(ii, ii);
  }
  return x;
}

inline Matrix lu_inverse(const LuDecomposition& d) {
  const std::size_t n = d.lu.rows;
  Matrix inv(n, n);
  std::vector<double> e(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    e[j] = 1.0;
    const std::vector<double> col = lu_solve(d, e);
    for (std::size_t i = 0; i < n; ++i) inv(i, j) = col[i];
    e[j] = 0.0;
  }
  return inv;
}

inline bool all_finite(const Matrix& m) {
  for (double v : m.data)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace flowhmm
