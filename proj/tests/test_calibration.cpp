#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "lwck/calibration.hpp"

using namespace lwck;

namespace {

PredictionSet worked_example() { return {{0.9, 0.8, 0.3, 0.1}, {1, 1, 0, 0}, std::nullopt}; }

// Labels drawn at p_true = sigmoid(z), z ~ N(0, 2^2); logits reported as t_true * z.
PredictionSet synthetic(std::size_t n, double t_true, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 2.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PredictionSet p;
  p.logits.emplace();
  for (std::size_t i = 0; i < n; ++i) {
    const double z = g(rng);
    p.labels.push_back(u(rng) < sigmoid(z) ? 1 : 0);
    p.logits->push_back(t_true * z);
    p.p_hat.push_back(sigmoid(t_true * z));
  }
  return p;
}

double brute_force_temperature(const PredictionSet& p) {
  double best_t = 1.0, best = temperature_loss(p, 1.0);
  for (double t = 0.5; t <= 4.0; t += 0.005) {
    const double l = temperature_loss(p, t);
    if (l < best) best = l, best_t = t;
  }
  return best_t;
}

}  // namespace

TEST(BinStats, WorkedExample) {
  const auto b = bin_stats(worked_example());
  ASSERT_EQ(b.bins.size(), 10u);
  EXPECT_EQ(b.total(), 4u);
  const std::vector<std::pair<std::size_t, std::pair<double, double>>> expect = {
      {8, {1.0, 0.9}}, {7, {1.0, 0.8}}, {2, {0.0, 0.3}}, {0, {0.0, 0.1}}};
  for (const auto& [k, ac] : expect) {
    EXPECT_EQ(b.bins[k].count, 1u) << k;
    EXPECT_DOUBLE_EQ(*b.bins[k].acc, ac.first);
    EXPECT_DOUBLE_EQ(*b.bins[k].conf, ac.second);
  }
  EXPECT_FALSE(b.bins[5].acc.has_value());
  EXPECT_FALSE(b.bins[5].conf.has_value());
}

TEST(BinStats, AllCorrectAtOne) {
  const auto b = bin_stats({{1.0, 1.0, 1.0}, {1, 1, 1}, std::nullopt});
  EXPECT_EQ(b.bins.back().count, 3u);
  EXPECT_EQ(*b.bins.back().acc, 1.0);
  EXPECT_EQ(*b.bins.back().conf, 1.0);
}

TEST(BinStats, BoundaryConvention) {
  const auto a = bin_boundaries(10);
  EXPECT_EQ(bin_index(0.0, a), 0u);
  EXPECT_EQ(bin_index(0.1, a), 0u);
  EXPECT_EQ(bin_index(0.1000001, a), 1u);
  EXPECT_EQ(bin_index(0.3, a), 2u);
  EXPECT_EQ(bin_index(0.7, a), 6u);
  EXPECT_EQ(bin_index(1.0, a), 9u);
  for (std::size_t k = 1; k <= 10; ++k) EXPECT_EQ(bin_index(a[k], a), k - 1);
  // Partition: every value lands in exactly the bin whose interval contains it.
  for (int i = 0; i <= 1000; ++i) {
    const double p = i / 1000.0;
    const auto k = bin_index(p, a);
    EXPECT_TRUE((p > a[k] || (k == 0 && p == 0.0)) && p <= a[k + 1]) << p;
  }
}

TEST(BinStats, PermutationInvariant) {
  PredictionSet p{{0.61, 0.62, 0.65, 0.68}, {1, 0, 0, 1}, std::nullopt};
  const auto a = bin_stats(p);
  std::swap(p.labels[0], p.labels[2]);
  const auto b = bin_stats(p);
  EXPECT_EQ(*a.bins[6].acc, *b.bins[6].acc);
  EXPECT_EQ(*a.bins[6].conf, *b.bins[6].conf);
}

TEST(BinStats, Errors) {
  EXPECT_THROW(bin_stats({{}, {}, std::nullopt}), std::invalid_argument);
  EXPECT_THROW(bin_stats(worked_example(), 0), std::invalid_argument);
  EXPECT_THROW(bin_stats({{1.5}, {1}, std::nullopt}), std::invalid_argument);
  EXPECT_THROW(bin_stats({{0.5}, {2}, std::nullopt}), std::invalid_argument);
  EXPECT_THROW(bin_stats({{0.5, 0.4}, {1}, std::nullopt}), std::invalid_argument);
}

TEST(Ece, WorkedExample) {
  const auto p = worked_example();
  EXPECT_NEAR(ece(p), 0.25 * (0.1 + 0.2 + 0.3 + 0.1), 1e-15);
  EXPECT_NEAR(ece(p), 0.175, 1e-15);
  EXPECT_THROW(ece(bin_stats(p), 5), std::invalid_argument);
}

TEST(Ece, PerfectlyCalibratedIsZero) {
  const PredictionSet p{{0.25, 0.25, 0.25, 0.25, 1.0}, {1, 0, 0, 0, 1}, std::nullopt};
  EXPECT_NEAR(ece(p), 0.0, 1e-15);
  for (const auto& r : reliability_data(bin_stats(p))) EXPECT_NEAR(r.gap, 0.0, 1e-15);
}

TEST(Ece, MergingSameSignBinsBoundedByMaxGap) {
  const PredictionSet p{{0.55, 0.58, 0.65, 0.66, 0.67}, {1, 1, 1, 1, 0}, std::nullopt};
  const auto fine = bin_stats(p, 10);
  double max_gap = 0.0;
  for (const auto& b : fine.bins)
    if (b.count) max_gap = std::max(max_gap, std::abs(*b.acc - *b.conf));
  EXPECT_LE(ece(p, 5), max_gap + 1e-15);
  EXPECT_LE(ece(p, 5), ece(p, 10) + 1e-15);
}

TEST(Reliability, WorkedExampleGaps) {
  const auto r = reliability_data(bin_stats(worked_example()));
  ASSERT_EQ(r.size(), 4u);
  const std::vector<double> gaps = {-0.1, -0.3, 0.2, 0.1};  // bin order: 0.1, 0.3, 0.8, 0.9
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(r[i].gap, gaps[i], 1e-15);
  EXPECT_DOUBLE_EQ(r[0].midpoint, 0.05);
  EXPECT_LE(r.size(), 10u);
}

TEST(ApplyTemperature, Examples) {
  const std::vector<double> z = {-3.0, 0.0, 0.5, 4.0};
  const auto q1 = apply_temperature(z, 1.0);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(q1[i], 1.0 / (1.0 + std::exp(-z[i])), 1e-15);
  for (double v : apply_temperature(z, 1e9)) EXPECT_NEAR(v, 0.5, 1e-8);
  for (double t : {0.1, 1.0, 7.0}) EXPECT_EQ(apply_temperature(std::vector<double>{0.0}, t)[0], 0.5);
  EXPECT_THROW(apply_temperature(z, 0.0), std::invalid_argument);
  for (double t : {0.3, 2.0}) {
    const auto q = apply_temperature(z, t);
    EXPECT_TRUE(std::is_sorted(q.begin(), q.end()));
  }
}

TEST(FitTemperature, RecoversTrueTemperature) {
  for (double t_true : {1.0, 2.0}) {
    const auto p = synthetic(20000, t_true, 7);
    const double t = fit_temperature(p);
    EXPECT_NEAR(t, t_true, t_true == 1.0 ? 0.1 : 0.15);
    EXPECT_NEAR(t, brute_force_temperature(p), 0.01);
    EXPECT_LE(temperature_loss(p, t), temperature_loss(p, 1.0) + 1e-12);
  }
}

TEST(FitTemperature, ReducesEceOnOverconfidentData) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = synthetic(5000, 2.0, 100 + seed);
    const double t = fit_temperature(p);
    PredictionSet scaled = p;
    scaled.p_hat = apply_temperature(*p.logits, t);
    EXPECT_LT(ece(scaled), ece(p)) << "seed " << seed;
  }
}

TEST(FitTemperature, Deterministic) {
  const auto p = synthetic(2000, 1.5, 3);
  EXPECT_EQ(fit_temperature(p), fit_temperature(p));
}

TEST(FitTemperature, Errors) {
  PredictionSet p = synthetic(100, 1.0, 1);
  PredictionSet single = p;
  std::fill(single.labels.begin(), single.labels.end(), 0);
  EXPECT_THROW(fit_temperature(single), std::invalid_argument);
  p.logits.reset();
  EXPECT_THROW(fit_temperature(p), std::invalid_argument);
}
