#pragma once

// Small dense helpers on lwck::Matrix: products, Gramians and a cyclic
// Jacobi eigensolver for the R x R symmetric systems that ALS and EPC solve.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "lwck/tensor.hpp"

namespace lwck {

inline Matrix transpose(const Matrix& a) {
  return Matrix::generate(a.cols(), a.rows(), [&](std::size_t i, std::size_t j) { return a(j, i); });
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + ")");
  std::vector<double> out(a.rows() * b.cols(), 0.0);
  auto bd = b.data();
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      double* row = &out[i * b.cols()];
      const double* brow = &bd[k * b.cols()];
      for (std::size_t j = 0; j < b.cols(); ++j) row[j] += aik * brow[j];
    }
  return Matrix(a.rows(), b.cols(), std::move(out));
}

/// a^T a.
inline Matrix gram(const Matrix& a) {
  const std::size_t n = a.cols();
  std::vector<double> g(n * n, 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t p = 0; p < n; ++p) {
      const double v = a(i, p);
      for (std::size_t q = p; q < n; ++q) g[p * n + q] += v * a(i, q);
    }
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = 0; q < p; ++q) g[p * n + q] = g[q * n + p];
  return Matrix(n, n, std::move(g));
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("hadamard: shapes differ");
  return Matrix::generate(a.rows(), a.cols(), [&](std::size_t i, std::size_t j) { return a(i, j) * b(i, j); });
}

inline Matrix subtract(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("subtract: shapes differ");
  return Matrix::generate(a.rows(), a.cols(), [&](std::size_t i, std::size_t j) { return a(i, j) - b(i, j); });
}

inline double column_norm(const Matrix& a, std::size_t j) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

struct SymmetricEigen {
  std::vector<double> values;  // descending
  Matrix vectors;              // columns are eigenvectors
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
inline SymmetricEigen symmetric_eigen(const Matrix& s, int max_sweeps = 100) {
  if (s.rows() != s.cols()) throw std::invalid_argument("symmetric_eigen: matrix is not square");
  const std::size_t n = s.rows();
  std::vector<double> a(s.data().begin(), s.data().end());
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0, diag = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      diag += a[p * n + p] * a[p * n + p];
      for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    }
    if (off <= 1e-30 * diag || off == 0.0) break;

    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - sn * akq;
          a[k * n + q] = sn * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - sn * aqk;
          a[q * n + k] = sn * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - sn * vkq;
          v[k * n + q] = sn * vkp + c * vkq;
        }
      }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return a[x * n + x] > a[y * n + y]; });
  SymmetricEigen out;
  out.values.resize(n);
  std::vector<double> vec(n * n);
  for (std::size_t c = 0; c < n; ++c) {
    out.values[c] = a[order[c] * n + order[c]];
    for (std::size_t k = 0; k < n; ++k) vec[k * n + c] = v[k * n + order[c]];
  }
  out.vectors = Matrix(n, n, std::move(vec));
  return out;
}

}  // namespace lwck
