#pragma once

// Confidence calibration for binary predictions: equal-width binning, expected
// calibration error, reliability-diagram records and temperature scaling.
//
// Bins are left-open / right-closed, (a_m, a_{m+1}], with a prediction of
// exactly 0 assigned to the first bin. Multi-attribute outputs are expected to
// be flattened into one stream by the caller.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lwck/objectives.hpp"

namespace lwck {

struct PredictionSet {
  std::vector<double> p_hat;                 // predicted probability of the positive class
  std::vector<int> labels;                   // 0 / 1
  std::optional<std::vector<double>> logits;  // raw scores, needed for temperature scaling

  std::size_t size() const noexcept { return p_hat.size(); }
  friend bool operator==(const PredictionSet&, const PredictionSet&) = default;
};

inline void validate(const PredictionSet& p) {
  if (p.labels.size() != p.p_hat.size()) throw std::invalid_argument("predictions: label count differs");
  if (p.logits && p.logits->size() != p.p_hat.size()) throw std::invalid_argument("predictions: logit count differs");
  for (double v : p.p_hat)
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("predictions: probability outside [0, 1]");
  for (int l : p.labels)
    if (l != 0 && l != 1) throw std::invalid_argument("predictions: labels must be 0 or 1");
}

struct Bin {
  double lower = 0.0;  // a_m
  double upper = 0.0;  // a_{m+1}
  std::size_t count = 0;
  std::optional<double> acc;   // mean label, absent when empty
  std::optional<double> conf;  // mean p_hat, absent when empty
};

struct CalibrationBins {
  std::vector<Bin> bins;
  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& b : bins) n += b.count;
    return n;
  }
};

inline std::vector<double> bin_boundaries(std::size_t m) {
  std::vector<double> a(m + 1);
  for (std::size_t k = 0; k <= m; ++k) a[k] = static_cast<double>(k) / static_cast<double>(m);
  return a;
}

/// Index of the bin (a_k, a_{k+1}] holding `p`; 0 goes to the first bin.
inline std::size_t bin_index(double p, const std::vector<double>& a) {
  const std::size_t m = a.size() - 1;
  auto k = static_cast<std::size_t>(std::max(0.0, std::ceil(p * static_cast<double>(m)) - 1.0));
  k = std::min(k, m - 1);
  while (k > 0 && p <= a[k]) --k;
  while (k + 1 < m && p > a[k + 1]) ++k;
  return k;
}

inline CalibrationBins bin_stats(const PredictionSet& preds, std::size_t m = 10) {
  validate(preds);
  if (m < 1) throw std::invalid_argument("bin_stats: need at least one bin");
  if (preds.size() == 0) throw std::invalid_argument("bin_stats: empty prediction set");
  const auto a = bin_boundaries(m);
  std::vector<double> label_sum(m, 0.0), conf_sum(m, 0.0);
  CalibrationBins out;
  out.bins.resize(m);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const std::size_t k = bin_index(preds.p_hat[i], a);
    ++out.bins[k].count;
    label_sum[k] += preds.labels[i];
    conf_sum[k] += preds.p_hat[i];
  }
  for (std::size_t k = 0; k < m; ++k) {
    auto& b = out.bins[k];
    b.lower = a[k];
    b.upper = a[k + 1];
    if (b.count) {
      b.acc = label_sum[k] / static_cast<double>(b.count);
      b.conf = conf_sum[k] / static_cast<double>(b.count);
    }
  }
  return out;
}

/// sum_m (|B_m| / n) |acc(B_m) - conf(B_m)|; empty bins contribute nothing.
inline double ece(const CalibrationBins& bins, std::size_t n) {
  if (n != bins.total())
    throw std::invalid_argument("ece: sample count " + std::to_string(n) + " differs from binned count " +
                                std::to_string(bins.total()));
  if (n == 0) throw std::invalid_argument("ece: no samples");
  double s = 0.0;
  for (const auto& b : bins.bins)
    if (b.count) s += static_cast<double>(b.count) * std::abs(*b.acc - *b.conf);
  return s / static_cast<double>(n);
}

inline double ece(const PredictionSet& preds, std::size_t m = 10) { return ece(bin_stats(preds, m), preds.size()); }

struct ReliabilityRecord {
  double midpoint = 0.0;
  double acc = 0.0;
  double conf = 0.0;
  double gap = 0.0;  // acc - conf
  std::size_t count = 0;
};

/// One record per nonempty bin, in bin order.
inline std::vector<ReliabilityRecord> reliability_data(const CalibrationBins& bins) {
  std::vector<ReliabilityRecord> out;
  for (const auto& b : bins.bins) {
    if (!b.count) continue;
    out.push_back({0.5 * (b.lower + b.upper), *b.acc, *b.conf, *b.acc - *b.conf, b.count});
  }
  return out;
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// sigmoid(logit / t) for every entry.
inline std::vector<double> apply_temperature(std::span<const double> logits, double t) {
  if (!(t > 0.0)) throw std::invalid_argument("temperature must be positive");
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = sigmoid(logits[i] / t);
  return out;
}

struct TemperatureFitOptions {
  double t_min = 0.05;
  double t_max = 20.0;
  double tol = 1e-4;
  WeightedBceOptions loss{};
};

inline double temperature_loss(const PredictionSet& preds, double t, const WeightedBceOptions& loss = {}) {
  if (!preds.logits) throw std::invalid_argument("temperature scaling needs logits");
  const auto q = apply_temperature(*preds.logits, t);
  return weighted_bce(preds.labels, q, loss);
}

/// Golden-section search for the temperature minimizing the weighted BCE on
/// [t_min, t_max]. The result never scores worse than T = 1 when 1 lies in the
/// interval.
inline double fit_temperature(const PredictionSet& preds, const TemperatureFitOptions& opts = {}) {
  validate(preds);
  if (!preds.logits) throw std::invalid_argument("fit_temperature: predictions carry no logits");
  if (!(opts.t_min > 0.0 && opts.t_min < opts.t_max)) throw std::invalid_argument("fit_temperature: bad interval");
  if (!(opts.tol > 0.0)) throw std::invalid_argument("fit_temperature: tol must be positive");
  const bool has_pos = std::find(preds.labels.begin(), preds.labels.end(), 1) != preds.labels.end();
  const bool has_neg = std::find(preds.labels.begin(), preds.labels.end(), 0) != preds.labels.end();
  if (!has_pos || !has_neg) throw std::invalid_argument("fit_temperature: labels contain a single class");

  auto f = [&](double t) { return temperature_loss(preds, t, opts.loss); };
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = opts.t_min, b = opts.t_max;
  double c = b - inv_phi * (b - a), d = a + inv_phi * (b - a);
  double fc = f(c), fd = f(d);
  while (b - a > opts.tol) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = f(d);
    }
  }
  double best = 0.5 * (a + b);
  if (opts.t_min <= 1.0 && 1.0 <= opts.t_max && f(1.0) < f(best)) best = 1.0;
  return best;
}

}  // namespace lwck
