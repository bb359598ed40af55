#pragma once

// Truncated SVD by one-sided (Hestenes) Jacobi and the two-factor split used
// to replace a 1x1 convolution by a pair of thinner 1x1 convolutions.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "lwck/linalg.hpp"
#include "lwck/tensor.hpp"

namespace lwck {

struct TruncatedSVD {
  Matrix u;               // m x R, orthonormal columns
  std::vector<double> s;  // R values, descending, >= 0
  Matrix v;               // n x R, orthonormal columns

  std::size_t rank() const noexcept { return s.size(); }
};

namespace detail {

// Column-major working copy for the rotations.
struct Columns {
  std::size_t rows, cols;
  std::vector<double> v;
  double* col(std::size_t j) { return &v[j * rows]; }
  const double* col(std::size_t j) const { return &v[j * rows]; }
};

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// Full thin SVD of a tall (rows >= cols) matrix: a = U diag(s) V^T, U rows x cols.
inline void jacobi_svd_tall(const Matrix& a, Columns& u, std::vector<double>& s, Columns& v) {
  const std::size_t m = a.rows(), n = a.cols();
  u = Columns{m, n, std::vector<double>(m * n)};
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) u.col(j)[i] = a(i, j);
  v = Columns{n, n, std::vector<double>(n * n, 0.0)};
  for (std::size_t j = 0; j < n; ++j) v.col(j)[j] = 1.0;

  constexpr double eps = 1e-15;
  for (int sweep = 0; sweep < 80; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        double* up = u.col(p);
        double* uq = u.col(q);
        const double alpha = dot(up, up, m);
        const double beta = dot(uq, uq, m);
        const double gamma = dot(up, uq, m);
        if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double sn = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = up[i], y = uq[i];
          up[i] = c * x - sn * y;
          uq[i] = sn * x + c * y;
        }
        double* vp = v.col(p);
        double* vq = v.col(q);
        for (std::size_t i = 0; i < n; ++i) {
          const double x = vp[i], y = vq[i];
          vp[i] = c * x - sn * y;
          vq[i] = sn * x + c * y;
        }
      }
    if (!rotated) break;
  }

  s.assign(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) s[j] = std::sqrt(dot(u.col(j), u.col(j), m));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return s[x] > s[y]; });
  Columns us{m, n, std::vector<double>(m * n)}, vs{n, n, std::vector<double>(n * n)};
  std::vector<double> ss(n);
  for (std::size_t c = 0; c < n; ++c) {
    ss[c] = s[order[c]];
    std::copy_n(u.col(order[c]), m, us.col(c));
    std::copy_n(v.col(order[c]), n, vs.col(c));
  }
  s = ss;

  // Normalize left vectors; (numerically) null directions are completed
  // against the ones already accepted.
  const double tiny = (s.empty() ? 0.0 : s.front()) * 1e-14;
  for (std::size_t c = 0; c < n; ++c) {
    double* uc = us.col(c);
    if (s[c] > tiny && s[c] > 0.0) {
      for (std::size_t i = 0; i < m; ++i) uc[i] /= s[c];
      continue;
    }
    s[c] = std::max(s[c], 0.0);
    for (std::size_t e = 0; e < m; ++e) {
      std::fill_n(uc, m, 0.0);
      uc[e] = 1.0;
      for (int pass = 0; pass < 2; ++pass)
        for (std::size_t k = 0; k < c; ++k) {
          const double proj = dot(uc, us.col(k), m);
          for (std::size_t i = 0; i < m; ++i) uc[i] -= proj * us.col(k)[i];
        }
      const double nrm = std::sqrt(dot(uc, uc, m));
      if (nrm > 1e-8) {
        for (std::size_t i = 0; i < m; ++i) uc[i] /= nrm;
        break;
      }
    }
  }
  u = std::move(us);
  v = std::move(vs);
}

inline Matrix leading_columns(const Columns& c, std::size_t r) {
  return Matrix::generate(c.rows, r, [&](std::size_t i, std::size_t j) { return c.col(j)[i]; });
}

}  // namespace detail

/// Leading rank-r SVD. In each left singular vector the largest-magnitude entry
/// is made nonnegative (the matching right vector flips with it).
inline TruncatedSVD truncated_svd(const Matrix& a, std::size_t r) {
  const std::size_t kmax = std::min(a.rows(), a.cols());
  if (r < 1 || r > kmax)
    throw std::invalid_argument("truncated_svd: rank " + std::to_string(r) + " outside [1, " +
                                std::to_string(kmax) + "]");
  detail::Columns left, right;
  std::vector<double> s;
  const bool wide = a.rows() < a.cols();
  if (wide)
    detail::jacobi_svd_tall(transpose(a), right, s, left);  // a^T = V S U^T
  else
    detail::jacobi_svd_tall(a, left, s, right);

  for (std::size_t c = 0; c < r; ++c) {
    double* uc = left.col(c);
    std::size_t best = 0;
    for (std::size_t i = 1; i < left.rows; ++i)
      if (std::abs(uc[i]) > std::abs(uc[best])) best = i;
    if (uc[best] < 0.0) {
      for (std::size_t i = 0; i < left.rows; ++i) uc[i] = -uc[i];
      double* vc = right.col(c);
      for (std::size_t i = 0; i < right.rows; ++i) vc[i] = -vc[i];
    }
  }
  TruncatedSVD out;
  out.u = detail::leading_columns(left, r);
  out.v = detail::leading_columns(right, r);
  out.s.assign(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(r));
  return out;
}

/// u * diag(s) * v^T.
inline Matrix reconstruct(const TruncatedSVD& t) {
  const Matrix us = Matrix::generate(t.u.rows(), t.rank(), [&](std::size_t i, std::size_t j) { return t.u(i, j) * t.s[j]; });
  return matmul(us, transpose(t.v));
}

/// Two-factor split of a 1x1 kernel matrix laid out input-channels x
/// output-channels: a ~= first * second with first Cin x R (projection) and
/// second R x Cout (expansion).
///
/// For the conventional output-major weight W = a^T = U S V^T, `first` holds
/// V^T (transposed into Cin x R) and `second` holds U S (transposed into
/// R x Cout).
struct SvdSplit {
  Matrix first;
  Matrix second;
};

inline SvdSplit svd_split(const Matrix& a, std::size_t r) {
  const auto t = truncated_svd(a, r);
  SvdSplit out;
  out.first = t.u;
  out.second = Matrix::generate(r, a.cols(), [&](std::size_t i, std::size_t j) { return t.s[i] * t.v(j, i); });
  return out;
}

}  // namespace lwck
