#pragma once

// Error-preserving correction of a CP decomposition.
//
// Given X and a CPD Y whose rank-1 terms have grown large and cancel each
// other, look for new factors with the smallest total component energy
//   sum_r eta_r^2   subject to   ||X - Y||_F <= delta.
//
// The solver cycles over the three factors. With the other two factors held at
// unit-norm columns, eta_r is the norm of column r of the free factor A, so the
// block problem is
//   min ||A||_F^2  s.t.  ||X_(n) - A K^T||_F <= delta,
// whose solution is the ridge path A(mu) = M (V + mu I)^-1 with mu >= 0 picked so
// the constraint is active. Every accepted block step is checked directly
// against the budget; a step that overshoots (rounding) is pulled back toward
// the previous iterate. The block problem is convex and the previous iterate is
// feasible for it, so no accepted step can raise the total energy.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "lwck/cpd.hpp"

namespace lwck {

struct EpcConfig {
  double delta = 0.0;           // absolute Frobenius error budget
  double norm_threshold = 0.0;  // correction triggers when sensitivity >= this
  int max_outer_iters = 10;     // correction / ALS-refinement alternations in decompose_with_epc
  double step_tol = 1e-10;      // relative sensitivity decrease per sweep below which a correction stops
  int max_sweeps = 1000;        // block sweeps inside one correction

  /// Defaults for a given tensor: trigger at 10 * ||x||_F^2.
  static EpcConfig for_tensor(const Tensor& x, double delta) {
    EpcConfig c;
    c.delta = delta;
    const double n = frobenius_norm(x);
    c.norm_threshold = 10.0 * n * n;
    return c;
  }
};

struct EpcResult {
  CPDecomposition cpd;
  bool feasible = true;             // false when the budget could not be met
  double error = 0.0;               // ||x - reconstruct(cpd)||_F
  double sensitivity_before = 0.0;  // of the input decomposition
  double sensitivity_after = 0.0;
  int sweeps = 0;
};

inline bool needs_correction(const CPDecomposition& cpd, const EpcConfig& cfg) {
  return sensitivity(cpd) >= cfg.norm_threshold;
}

namespace detail {

inline void check_epc_config(const EpcConfig& cfg) {
  if (!(cfg.delta >= 0.0)) throw std::invalid_argument("EPC delta must be nonnegative");
  if (!(cfg.norm_threshold >= 0.0)) throw std::invalid_argument("EPC norm threshold must be nonnegative");
  if (cfg.max_outer_iters < 0) throw std::invalid_argument("EPC max_outer_iters must be nonnegative");
  if (cfg.max_sweeps < 1) throw std::invalid_argument("EPC max_sweeps must be at least 1");
  if (!(cfg.step_tol >= 0.0)) throw std::invalid_argument("EPC step_tol must be nonnegative");
}

// Slack used when testing feasibility inside the solver; well inside the
// 1e-9 absolute tolerance of the public contract.
constexpr double kFeasibilitySlack = 1e-10;

inline Factor scaled_factor(const Factor& f, const std::vector<double>& coeffs) {
  Factor out = f;
  for (std::size_t i = 0; i < f.rows; ++i)
    for (std::size_t r = 0; r < f.rank; ++r) out(i, r) *= coeffs[r];
  return out;
}

inline double factor_energy(const Factor& f) { return sum_of_squares(f.v); }

inline double model_error(const Tensor& x, const std::vector<Factor>& f, std::size_t mode, const Factor& block) {
  std::vector<Factor> g = f;
  g[mode] = block;
  return distance(x, reconstruct(assemble(g, std::vector<double>(block.rank, 1.0))));
}

// Minimum-norm block on the ridge path whose error is at most `delta`.
// Returns the least-squares block when even that misses the budget.
inline Factor min_norm_block(const Tensor& x, const std::vector<Factor>& f, std::size_t mode, double delta) {
  const Factor m = mttkrp(x, f, mode);
  const Matrix v = gram_product_except(f, mode);
  const std::size_t R = v.rows();
  const auto eig = symmetric_eigen(v);
  const double lmax = std::max(eig.values.front(), 0.0);
  const double lmin = eig.values.back();
  const double jitter = (lmin <= 0.0 || lmax / lmin > 1e12) ? 1e-12 : 0.0;

  std::vector<double> lam(R), explained(R, 0.0);
  // P = M Q, explained_c = ||P_c||^2 / lambda_c (energy of x captured by direction c).
  std::vector<double> p(m.rows * R, 0.0);
  for (std::size_t c = 0; c < R; ++c) lam[c] = std::max(eig.values[c] + jitter, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t c = 0; c < R; ++c) {
      double s = 0.0;
      for (std::size_t r = 0; r < R; ++r) s += m(i, r) * eig.vectors(r, c);
      p[i * R + c] = s;
    }
  for (std::size_t c = 0; c < R; ++c) {
    if (lam[c] <= 0.0) continue;
    double s = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) s += p[i * R + c] * p[i * R + c];
    explained[c] = s / lam[c];
  }

  auto block_at = [&](double mu) {
    Factor a{m.rows, R, std::vector<double>(m.rows * R, 0.0)};
    std::vector<double> w(R);
    for (std::size_t c = 0; c < R; ++c) w[c] = lam[c] + mu > 0.0 ? 1.0 / (lam[c] + mu) : 0.0;
    for (std::size_t i = 0; i < m.rows; ++i)
      for (std::size_t r = 0; r < R; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < R; ++c) s += p[i * R + c] * w[c] * eig.vectors(r, c);
        a(i, r) = s;
      }
    return a;
  };

  const Factor ls = block_at(0.0);
  const double err_ls = model_error(x, f, mode, ls);
  if (err_ls >= delta) return ls;

  // Along the ridge path, err^2(mu) = err_ls^2 + sum_c explained_c * (mu / (lambda_c + mu))^2,
  // increasing in mu. Solve err(mu) = delta in log-mu.
  const double target = delta * delta - err_ls * err_ls;
  double total = 0.0;
  for (double e : explained) total += e;
  if (total <= target) return Factor{m.rows, R, std::vector<double>(m.rows * R, 0.0)};

  auto excess = [&](double mu) {
    double s = 0.0;
    for (std::size_t c = 0; c < R; ++c) {
      const double ratio = mu / (lam[c] + mu);
      s += explained[c] * ratio * ratio;
    }
    return s;
  };
  const double scale = std::max(lmax, 1e-300);
  double lo = std::log(scale) - 80.0, hi = std::log(scale) + 80.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (excess(std::exp(mid)) > target)
      hi = mid;
    else
      lo = mid;
  }
  return block_at(std::exp(lo));
}

}  // namespace detail

/// Reduces sum_r eta_r^2 while keeping ||x - Y||_F <= cfg.delta.
///
/// When the incoming error already exceeds cfg.delta the solver first runs
/// least-squares sweeps from `cpd`; if the budget is still out of reach the
/// best decomposition found is returned with `feasible = false`.
inline EpcResult epc_correct(const Tensor& x, const CPDecomposition& cpd, const EpcConfig& cfg) {
  detail::check_epc_config(cfg);
  detail::check_cpd_input(x, cpd.rank());
  if (cpd.dims() != x.dims()) throw std::invalid_argument("epc_correct: decomposition dims differ from tensor dims");

  auto f = detail::unpack(cpd);
  std::vector<double> coeffs = cpd.coeffs;
  {
    // Normalize on entry so coeffs carry all of the scale.
    for (std::size_t n = 0; n < f.size(); ++n) {
      const auto norms = detail::normalize_columns(f[n]);
      for (std::size_t r = 0; r < coeffs.size(); ++r) coeffs[r] *= norms[r];
    }
  }

  EpcResult out;
  out.sensitivity_before = sensitivity(cpd);
  const double delta = cfg.delta;
  const double budget = delta + detail::kFeasibilitySlack;

  double err = distance(x, reconstruct(detail::assemble(f, coeffs)));
  if (err > budget) {
    AlsOptions ls{cfg.max_sweeps, 0.0, 0};
    const auto refined = cp_als_from(x, detail::assemble(f, coeffs), ls);
    const double refined_err = distance(x, reconstruct(refined.cpd));
    if (refined_err > budget) {
      out.cpd = refined_err < err ? refined.cpd : canonicalize(detail::assemble(f, coeffs));
      out.error = std::min(refined_err, err);
      out.feasible = false;
      out.sensitivity_after = sensitivity(out.cpd);
      return out;
    }
    f = detail::unpack(refined.cpd);
    coeffs = refined.cpd.coeffs;
    err = refined_err;
  }

  double sens = sensitivity(detail::assemble(f, coeffs));
  for (int sweep = 0; sweep < cfg.max_sweeps; ++sweep) {
    const double sens_start = sens;
    for (std::size_t mode = 0; mode < 3; ++mode) {
      const detail::Factor current = detail::scaled_factor(f[mode], coeffs);
      const double current_energy = detail::factor_energy(current);
      detail::Factor candidate = detail::min_norm_block(x, f, mode, delta);

      // Pull back toward the feasible current block until the step is
      // feasible and does not add energy.
      bool accepted = false;
      double t = 1.0;
      for (int halving = 0; halving < 40; ++halving, t *= 0.5) {
        detail::Factor trial = current;
        for (std::size_t k = 0; k < trial.v.size(); ++k) trial.v[k] += t * (candidate.v[k] - current.v[k]);
        if (detail::factor_energy(trial) > current_energy) continue;
        const double trial_err = detail::model_error(x, f, mode, trial);
        if (trial_err <= budget) {
          candidate = std::move(trial);
          err = trial_err;
          accepted = true;
          break;
        }
      }
      if (!accepted) continue;
      f[mode] = candidate;
      coeffs = detail::normalize_columns(f[mode]);
      sens = sensitivity(detail::assemble(f, coeffs));
    }
    ++out.sweeps;
    if (sens_start - sens <= cfg.step_tol * sens_start) break;
  }

  out.cpd = canonicalize(detail::assemble(f, coeffs));
  out.error = distance(x, reconstruct(out.cpd));
  out.sensitivity_after = sensitivity(out.cpd);
  out.feasible = out.error <= budget;
  return out;
}

struct EpcDecomposition {
  CPDecomposition cpd;
  double als_error = 0.0;        // absolute error of the plain ALS fit
  double als_sensitivity = 0.0;  // sensitivity of the plain ALS fit
  double delta = 0.0;            // budget actually enforced: max(cfg.delta, als_error)
  double error = 0.0;
  int corrections = 0;           // epc_correct invocations
};

/// CP-ALS followed, while the component energy stays above the trigger, by
/// alternating corrections and warm-started ALS refinements. Returns the
/// lowest-energy decomposition seen whose error is within
/// delta = max(cfg.delta, ALS error).
inline EpcDecomposition decompose_with_epc(const Tensor& x, std::size_t rank, const AlsOptions& opts,
                                           const EpcConfig& cfg) {
  detail::check_epc_config(cfg);
  const auto als = cp_als_traced(x, rank, opts);
  EpcDecomposition out;
  out.cpd = als.cpd;
  out.als_error = distance(x, reconstruct(als.cpd));
  out.als_sensitivity = sensitivity(als.cpd);
  out.delta = std::max(cfg.delta, out.als_error);
  out.error = out.als_error;

  EpcConfig local = cfg;
  local.delta = out.delta;
  const double budget = out.delta + detail::kFeasibilitySlack;
  double best_sens = out.als_sensitivity;

  CPDecomposition current = als.cpd;
  for (int outer = 0; outer < cfg.max_outer_iters && needs_correction(current, cfg); ++outer) {
    const auto corrected = epc_correct(x, current, local);
    ++out.corrections;
    if (corrected.feasible && corrected.sensitivity_after < best_sens) {
      best_sens = corrected.sensitivity_after;
      out.cpd = corrected.cpd;
      out.error = corrected.error;
    }
    if (outer + 1 == cfg.max_outer_iters) break;
    const auto refined = cp_als_from(x, corrected.cpd, opts);
    const double refined_err = distance(x, reconstruct(refined.cpd));
    const double refined_sens = sensitivity(refined.cpd);
    if (refined_err <= budget && refined_sens < best_sens) {
      best_sens = refined_sens;
      out.cpd = refined.cpd;
      out.error = refined_err;
    }
    current = refined.cpd;
  }
  return out;
}

}  // namespace lwck
