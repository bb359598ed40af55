#pragma once

// Rank-R CP decomposition of 3rd-order tensors by alternating least squares.
//
// The model is X ~= sum_r coeffs[r] * a_r o b_r o c_r with unit-length factor
// columns, so coeffs[r] is exactly the Frobenius norm of the r-th rank-1 term.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "lwck/linalg.hpp"
#include "lwck/tensor.hpp"

namespace lwck {

struct CPDecomposition {
  std::vector<Matrix> factors;  // factor n is dims[n] x R, unit-norm columns
  std::vector<double> coeffs;   // nonnegative, descending

  std::size_t rank() const noexcept { return coeffs.size(); }
  std::size_t order() const noexcept { return factors.size(); }
  Dims dims() const {
    Dims d;
    for (const auto& f : factors) d.push_back(f.rows());
    return d;
  }
};

struct AlsOptions {
  int max_iters = 500;
  double tol = 1e-8;  // stop when the relative-error improvement of a sweep drops below this
  std::uint64_t seed = 0;
  bool line_search = true;  // extrapolate along the last sweep's change, kept only when it lowers the error
};

struct AlsResult {
  CPDecomposition cpd;
  std::vector<double> error_history;  // relative error after each sweep
  double relative_error = 0.0;
};

inline Tensor reconstruct(const CPDecomposition& cpd) {
  if (cpd.factors.empty()) throw std::invalid_argument("reconstruct: decomposition has no factors");
  const Dims dims = cpd.dims();
  const std::size_t rank = cpd.rank();
  const std::size_t n_modes = dims.size();
  for (const auto& f : cpd.factors)
    if (f.cols() != rank) throw std::invalid_argument("reconstruct: factor column count differs from rank");

  std::vector<double> out(element_count(dims), 0.0);
  std::vector<std::size_t> idx(n_modes, 0);
  for (double& v : out) {
    double s = 0.0;
    for (std::size_t r = 0; r < rank; ++r) {
      double term = cpd.coeffs[r];
      for (std::size_t n = 0; n < n_modes && term != 0.0; ++n) term *= cpd.factors[n](idx[n], r);
      s += term;
    }
    v = s;
    for (std::size_t n = n_modes; n-- > 0;) {
      if (++idx[n] < dims[n]) break;
      idx[n] = 0;
    }
  }
  return Tensor(dims, std::move(out));
}

/// Sum of squared component norms, sum_r coeffs[r]^2.
inline double sensitivity(const CPDecomposition& cpd) {
  double s = 0.0;
  for (double c : cpd.coeffs) s += c * c;
  return s;
}

/// Hard upper bound on the CP rank accepted for a 3rd-order tensor:
/// the product of its two largest extents.
inline std::size_t cp_rank_cap(const Dims& dims) {
  Dims d = dims;
  std::sort(d.begin(), d.end(), std::greater<>());
  return d.size() < 2 ? d.at(0) : d[0] * d[1];
}

namespace detail {

// Mutable row-major factor used inside the solvers.
struct Factor {
  std::size_t rows = 0, rank = 0;
  std::vector<double> v;

  double& operator()(std::size_t i, std::size_t r) { return v[i * rank + r]; }
  double operator()(std::size_t i, std::size_t r) const { return v[i * rank + r]; }
  Matrix to_matrix() const { return Matrix(rows, rank, v); }
  static Factor from(const Matrix& m) { return Factor{m.rows(), m.cols(), {m.data().begin(), m.data().end()}}; }
};

inline Matrix factor_gram(const Factor& f) { return gram(f.to_matrix()); }

/// X_(mode) * khatri_rao(other factors, ascending), without forming the product.
inline Factor mttkrp(const Tensor& x, const std::vector<Factor>& f, std::size_t mode) {
  const std::size_t I = x.dim(0), J = x.dim(1), K = x.dim(2), R = f[0].rank;
  Factor out{x.dim(mode), R, std::vector<double>(x.dim(mode) * R, 0.0)};
  auto xd = x.data();
  for (std::size_t i = 0; i < I; ++i)
    for (std::size_t j = 0; j < J; ++j) {
      const double* xk = &xd[(i * J + j) * K];
      for (std::size_t k = 0; k < K; ++k) {
        const double xv = xk[k];
        if (xv == 0.0) continue;
        switch (mode) {
          case 0:
            for (std::size_t r = 0; r < R; ++r) out(i, r) += xv * f[1](j, r) * f[2](k, r);
            break;
          case 1:
            for (std::size_t r = 0; r < R; ++r) out(j, r) += xv * f[0](i, r) * f[2](k, r);
            break;
          default:
            for (std::size_t r = 0; r < R; ++r) out(k, r) += xv * f[0](i, r) * f[1](j, r);
            break;
        }
      }
    }
  return out;
}

/// Hadamard product of the Gramians of every factor except `mode`.
inline Matrix gram_product_except(const std::vector<Factor>& f, std::size_t mode) {
  Matrix v;
  for (std::size_t n = 0; n < f.size(); ++n) {
    if (n == mode) continue;
    Matrix g = factor_gram(f[n]);
    v = v.rows() == 0 ? g : hadamard(v, g);
  }
  return v;
}

/// Solves A V = M for A given symmetric PSD V. A Tikhonov jitter of 1e-12 is
/// added when the condition estimate exceeds 1e12.
inline Factor solve_normal_equations(const Factor& m, const Matrix& v) {
  const std::size_t R = v.rows();
  const auto eig = symmetric_eigen(v);
  const double lmax = std::max(eig.values.front(), 0.0);
  const double lmin = eig.values.back();
  const double jitter = (lmin <= 0.0 || lmax / lmin > 1e12) ? 1e-12 : 0.0;
  std::vector<double> inv(R);
  for (std::size_t r = 0; r < R; ++r) {
    const double l = eig.values[r] + jitter;
    inv[r] = l > 0.0 ? 1.0 / l : 0.0;
  }
  // A = M Q diag(inv) Q^T
  const Matrix& q = eig.vectors;
  Factor out{m.rows, R, std::vector<double>(m.rows * R, 0.0)};
  std::vector<double> p(R);
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t c = 0; c < R; ++c) {
      double s = 0.0;
      for (std::size_t r = 0; r < R; ++r) s += m(i, r) * q(r, c);
      p[c] = s * inv[c];
    }
    for (std::size_t r = 0; r < R; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < R; ++c) s += p[c] * q(r, c);
      out(i, r) = s;
    }
  }
  return out;
}

/// Normalizes columns in place and returns their former norms. A zero column
/// becomes e_0 with norm 0.
inline std::vector<double> normalize_columns(Factor& f) {
  std::vector<double> norms(f.rank, 0.0);
  for (std::size_t r = 0; r < f.rank; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < f.rows; ++i) s += f(i, r) * f(i, r);
    const double n = std::sqrt(s);
    norms[r] = n;
    for (std::size_t i = 0; i < f.rows; ++i) f(i, r) = n > 0.0 ? f(i, r) / n : (i == 0 ? 1.0 : 0.0);
  }
  return norms;
}

inline void scale_columns(Factor& f, const std::vector<double>& s) {
  for (std::size_t i = 0; i < f.rows; ++i)
    for (std::size_t r = 0; r < f.rank; ++r) f(i, r) *= s[r];
}

inline CPDecomposition assemble(const std::vector<Factor>& f, const std::vector<double>& coeffs) {
  CPDecomposition cpd;
  for (const auto& fi : f) cpd.factors.push_back(fi.to_matrix());
  cpd.coeffs = coeffs;
  return cpd;
}

inline std::vector<Factor> unpack(const CPDecomposition& cpd) {
  std::vector<Factor> f;
  for (const auto& m : cpd.factors) f.push_back(Factor::from(m));
  return f;
}

inline void check_cpd_input(const Tensor& x, std::size_t rank) {
  if (x.order() != 3)
    throw std::invalid_argument("CP-ALS expects a 3rd-order tensor, got order " + std::to_string(x.order()));
  if (rank == 0) throw std::invalid_argument("CP rank must be at least 1");
  if (rank > cp_rank_cap(x.dims()))
    throw std::invalid_argument("CP rank " + std::to_string(rank) + " exceeds the cap " +
                                std::to_string(cp_rank_cap(x.dims())) + " for dims " + dims_to_string(x.dims()));
  if (frobenius_norm(x) == 0.0) throw std::invalid_argument("cannot decompose an all-zero tensor");
}

}  // namespace detail

/// Deterministic sign and ordering: in every factor but the last, the
/// largest-magnitude entry of each column is made nonnegative; the last factor
/// takes the compensating sign so coefficients stay nonnegative. Components are
/// then sorted by descending coefficient (stable).
inline CPDecomposition canonicalize(const CPDecomposition& in) {
  auto f = detail::unpack(in);
  std::vector<double> coeffs = in.coeffs;
  const std::size_t R = in.rank();
  const std::size_t last = f.size() - 1;
  for (std::size_t r = 0; r < R; ++r) {
    if (coeffs[r] < 0.0) {
      coeffs[r] = -coeffs[r];
      for (std::size_t i = 0; i < f[last].rows; ++i) f[last](i, r) = -f[last](i, r);
    }
    for (std::size_t n = 0; n < last; ++n) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < f[n].rows; ++i)
        if (std::abs(f[n](i, r)) > std::abs(f[n](best, r))) best = i;
      if (f[n](best, r) < 0.0) {
        for (std::size_t i = 0; i < f[n].rows; ++i) f[n](i, r) = -f[n](i, r);
        for (std::size_t i = 0; i < f[last].rows; ++i) f[last](i, r) = -f[last](i, r);
      }
    }
  }
  std::vector<std::size_t> order(R);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return coeffs[a] > coeffs[b]; });
  std::vector<detail::Factor> sorted = f;
  std::vector<double> sorted_coeffs(R);
  for (std::size_t c = 0; c < R; ++c) {
    sorted_coeffs[c] = coeffs[order[c]];
    for (std::size_t n = 0; n < f.size(); ++n)
      for (std::size_t i = 0; i < f[n].rows; ++i) sorted[n](i, c) = f[n](i, order[c]);
  }
  return detail::assemble(sorted, sorted_coeffs);
}

/// Seeded uniform(-1, 1) factors with normalized columns. Components are drawn
/// one at a time across all modes, so the first r columns of a rank-R start
/// equal the rank-r start for the same seed.
inline CPDecomposition random_cpd(const Dims& dims, std::size_t rank, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  std::vector<detail::Factor> f;
  for (auto d : dims) f.push_back({d, rank, std::vector<double>(d * rank)});
  for (std::size_t r = 0; r < rank; ++r)
    for (auto& fn : f)
      for (std::size_t i = 0; i < fn.rows; ++i) fn(i, r) = uni(rng);
  for (auto& fn : f) detail::normalize_columns(fn);
  return detail::assemble(f, std::vector<double>(rank, 1.0));
}

/// ALS sweeps starting from `init`. Each sweep updates the three factors in
/// turn; the freshly solved factor is normalized and its column norms become
/// the coefficients.
/// With line_search on, sweep k is followed by a step of length k^(1/3) along
/// the change since the previous sweep, kept only if it lowers the error.
inline AlsResult cp_als_from(const Tensor& x, const CPDecomposition& init, const AlsOptions& opts) {
  detail::check_cpd_input(x, init.rank());
  if (init.dims() != x.dims()) throw std::invalid_argument("initial decomposition dims differ from tensor dims");
  if (opts.max_iters < 1) throw std::invalid_argument("max_iters must be at least 1");
  if (!(opts.tol >= 0.0)) throw std::invalid_argument("tol must be nonnegative");

  // Incoming coefficients are irrelevant: the mode-0 solve re-derives the scale.
  auto f = detail::unpack(init);
  for (auto& fn : f) detail::normalize_columns(fn);

  const double xnorm = frobenius_norm(x);
  AlsResult result;
  std::vector<double> coeffs(init.rank(), 0.0);
  const std::vector<double> ones(init.rank(), 1.0);
  std::vector<detail::Factor> prev;  // last accepted iterate, coefficients folded into mode 2
  for (int it = 0; it < opts.max_iters; ++it) {
    for (std::size_t mode = 0; mode < 3; ++mode) {
      auto m = detail::mttkrp(x, f, mode);
      auto v = detail::gram_product_except(f, mode);
      f[mode] = detail::solve_normal_equations(m, v);
      coeffs = detail::normalize_columns(f[mode]);
    }
    // After the mode-2 solve the model is coeffs * (a o b o c) with unit columns.
    double err = distance(x, reconstruct(detail::assemble(f, coeffs))) / xnorm;
    if (opts.line_search) {
      std::vector<detail::Factor> cur = f;
      detail::scale_columns(cur[2], coeffs);
      if (!prev.empty() && err > 0.0) {
        const double step = std::cbrt(static_cast<double>(it + 1));
        std::vector<detail::Factor> trial = cur;
        for (std::size_t n = 0; n < 3; ++n)
          for (std::size_t i = 0; i < trial[n].v.size(); ++i) trial[n].v[i] += step * (cur[n].v[i] - prev[n].v[i]);
        const double trial_err = distance(x, reconstruct(detail::assemble(trial, ones))) / xnorm;
        if (trial_err < err) {
          err = trial_err;
          cur = trial;
          const auto n0 = detail::normalize_columns(trial[0]);
          const auto n1 = detail::normalize_columns(trial[1]);
          std::vector<double> carry(n0.size());
          for (std::size_t r = 0; r < carry.size(); ++r) carry[r] = n0[r] * n1[r];
          detail::scale_columns(trial[2], carry);
          coeffs = detail::normalize_columns(trial[2]);
          f = std::move(trial);
        }
      }
      prev = std::move(cur);
    }
    result.error_history.push_back(err);
    const std::size_t h = result.error_history.size();
    if (err == 0.0) break;
    if (h >= 2 && result.error_history[h - 2] - err < opts.tol) break;
  }
  result.cpd = canonicalize(detail::assemble(f, coeffs));
  result.relative_error = result.error_history.back();
  return result;
}

inline AlsResult cp_als_traced(const Tensor& x, std::size_t rank, const AlsOptions& opts = {}) {
  detail::check_cpd_input(x, rank);
  return cp_als_from(x, random_cpd(x.dims(), rank, opts.seed), opts);
}

inline CPDecomposition cp_als(const Tensor& x, std::size_t rank, const AlsOptions& opts = {}) {
  return cp_als_traced(x, rank, opts).cpd;
}

}  // namespace lwck
