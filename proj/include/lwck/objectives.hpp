#pragma once

// Training-side objectives: the Frobenius-norm penalty on factorized layer
// weights and the weighted binary cross-entropy used to fit the temperature.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "lwck/tensor.hpp"

namespace lwck {

struct PenaltyConfig {
  double lambda = 0.0;  // shrinkage factor
  // One entry per compressed source layer; each holds that layer's factorized
  // weights (3 for a CP rewrite, 2 for an SVD rewrite).
  std::vector<std::vector<Tensor>> layer_sets;
};

inline void validate(const PenaltyConfig& cfg) {
  if (!(cfg.lambda >= 0.0)) throw std::invalid_argument("penalty lambda must be nonnegative");
  for (const auto& set : cfg.layer_sets)
    if (set.size() != 2 && set.size() != 3)
      throw std::invalid_argument("each compressed layer carries 2 (SVD) or 3 (CP) factorized weights");
}

/// lambda * sum over layers and their factors of ||D||_F^2.
inline double penalty(const PenaltyConfig& cfg) {
  validate(cfg);
  double s = 0.0;
  for (const auto& set : cfg.layer_sets)
    for (const auto& d : set) s += sum_of_squares(d.data());
  return cfg.lambda * s;
}

/// d penalty / d entry = 2 * lambda * entry, shaped like layer_sets.
inline std::vector<std::vector<Tensor>> penalty_gradient(const PenaltyConfig& cfg) {
  validate(cfg);
  std::vector<std::vector<Tensor>> g;
  g.reserve(cfg.layer_sets.size());
  for (const auto& set : cfg.layer_sets) {
    auto& out = g.emplace_back();
    for (const auto& d : set) out.push_back(scaled(d, 2.0 * cfg.lambda));
  }
  return g;
}

struct WeightedBceOptions {
  double weight = 0.5;            // W
  double base = std::numbers::e;  // epsilon
};

inline constexpr double kProbabilityClamp = 1e-12;

/// Mean weighted binary cross-entropy,
///   -(1/n) sum_i [ base^(p_i + (1 - 2 p_i) W) p_i log q_i + (1 - p_i) log(1 - q_i) ],
/// with q clamped to [1e-12, 1 - 1e-12]. The sign makes it a loss to minimize.
inline double weighted_bce(std::span<const int> labels, std::span<const double> q_hat,
                           const WeightedBceOptions& opts = {}) {
  if (labels.size() != q_hat.size()) throw std::invalid_argument("weighted_bce: length mismatch");
  if (labels.empty()) throw std::invalid_argument("weighted_bce: empty batch");
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double p = labels[i];
    const double q = std::clamp(q_hat[i], kProbabilityClamp, 1.0 - kProbabilityClamp);
    const double w = std::pow(opts.base, p + (1.0 - 2.0 * p) * opts.weight);
    s += w * p * std::log(q) + (1.0 - p) * std::log(1.0 - q);
  }
  return -s / static_cast<double>(labels.size());
}

}  // namespace lwck
