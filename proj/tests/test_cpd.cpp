#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "lwck/cpd.hpp"
#include "test_util.hpp"

using namespace lwck;

namespace {

// Definitional triple loop.
Tensor reconstruct_loop(const CPDecomposition& c) {
  const auto d = c.dims();
  Tensor out(d);
  std::vector<double> v(out.size(), 0.0);
  for (std::size_t i = 0; i < d[0]; ++i)
    for (std::size_t j = 0; j < d[1]; ++j)
      for (std::size_t k = 0; k < d[2]; ++k)
        for (std::size_t r = 0; r < c.rank(); ++r)
          v[(i * d[1] + j) * d[2] + k] += c.coeffs[r] * c.factors[0](i, r) * c.factors[1](j, r) * c.factors[2](k, r);
  return Tensor(d, v);
}

void expect_normalized(const CPDecomposition& c) {
  for (const auto& f : c.factors)
    for (std::size_t r = 0; r < c.rank(); ++r)
      if (c.coeffs[r] > 0.0) {
        EXPECT_NEAR(column_norm(f, r), 1.0, 1e-10);
      }
  for (std::size_t r = 0; r < c.rank(); ++r) {
    EXPECT_GE(c.coeffs[r], 0.0);
    if (r) {
      EXPECT_GE(c.coeffs[r - 1], c.coeffs[r]);
    }
  }
}

}  // namespace

TEST(Reconstruct, SingleEntry) {
  CPDecomposition c;
  for (std::size_t d : {3u, 2u, 4u}) c.factors.push_back(Matrix::generate(d, 1, [](std::size_t i, std::size_t) {
                                        return i == 0 ? 1.0 : 0.0;
                                      }));
  c.coeffs = {7.0};
  const Tensor t = reconstruct(c);
  EXPECT_EQ(t.at({0, 0, 0}), 7.0);
  EXPECT_EQ(frobenius_norm(t), 7.0);
}

TEST(Reconstruct, MatchesTripleLoop) {
  const auto c = random_cpd({4, 5, 3}, 3, 9);
  CPDecomposition scaled = c;
  scaled.coeffs = {2.5, -1.0, 0.3};
  EXPECT_LE(testutil::max_abs_diff(reconstruct(scaled), reconstruct_loop(scaled)), 1e-12);
}

TEST(Reconstruct, KernelShapeContract) {
  const auto c = random_cpd({9, 4, 5}, 2, 1);
  const Tensor k = unreshape_kernel(reconstruct(c));
  EXPECT_EQ(k.dims(), (Dims{3, 3, 4, 5}));
}

TEST(Sensitivity, Examples) {
  CPDecomposition c = random_cpd({3, 3, 3}, 2, 0);
  c.coeffs = {5.0, 1.0};
  EXPECT_EQ(sensitivity(c), 26.0);
  c.coeffs = {0.0, 0.0};
  EXPECT_EQ(sensitivity(c), 0.0);
}

TEST(Sensitivity, EqualsPerTermEnergy) {
  CPDecomposition c = random_cpd({4, 3, 5}, 3, 4);
  c.coeffs = {3.0, 2.0, 0.5};
  double s = 0.0;
  for (std::size_t r = 0; r < 3; ++r) {
    const Tensor term = testutil::outer3(c.factors[0].column(r), c.factors[1].column(r), c.factors[2].column(r),
                                         c.coeffs[r]);
    s += std::pow(frobenius_norm(term), 2);
  }
  EXPECT_NEAR(sensitivity(c), s, 1e-12);
}

TEST(CpAls, RejectsBadInput) {
  const Tensor x = testutil::random_tensor({3, 3, 3}, 1);
  EXPECT_THROW(cp_als(x, 0), std::invalid_argument);
  EXPECT_THROW(cp_als(Tensor(Dims{3, 3, 3}), 1), std::invalid_argument);
  EXPECT_THROW(cp_als(testutil::random_tensor({3, 3}, 1), 1), std::invalid_argument);
  EXPECT_THROW(cp_als(x, 10), std::invalid_argument);
  EXPECT_NO_THROW(cp_als(x, 9, {5, 1e-8, 0}));
  EXPECT_THROW(cp_als(x, 1, {0, 1e-8, 0}), std::invalid_argument);
  EXPECT_THROW(cp_als(x, 1, {10, -1.0, 0}), std::invalid_argument);
}

TEST(CpAls, RecoversRankOne) {
  std::mt19937_64 rng(3);
  const Tensor x = testutil::outer3(testutil::unit_vector(4, rng), testutil::unit_vector(3, rng),
                                    testutil::unit_vector(2, rng), 2.0);
  const auto c = cp_als(x, 1);
  EXPECT_LE(relative_error(x, reconstruct(c)), 1e-8);
  EXPECT_NEAR(c.coeffs[0], 2.0, 1e-8);
}

TEST(CpAls, RecoversTwoTermsWithCoefficients) {
  std::mt19937_64 rng(17);
  const Tensor t1 = testutil::outer3(testutil::unit_vector(4, rng), testutil::unit_vector(3, rng),
                                     testutil::unit_vector(2, rng), 5.0);
  const Tensor t2 = testutil::outer3(testutil::unit_vector(4, rng), testutil::unit_vector(3, rng),
                                     testutil::unit_vector(2, rng), 1.0);
  const Tensor x = add(t1, t2);
  const auto res = cp_als_traced(x, 2, {2000, 0.0, 0});
  EXPECT_LE(relative_error(x, reconstruct(res.cpd)), 1e-6);
  ASSERT_EQ(res.cpd.rank(), 2u);
  EXPECT_NEAR(res.cpd.coeffs[0], 5.0, 1e-4);
  EXPECT_NEAR(res.cpd.coeffs[1], 1.0, 1e-4);
  expect_normalized(res.cpd);
}

TEST(CpAls, HigherRankNoWorseUnderNestedInit) {
  const Tensor x = testutil::random_tensor({4, 4, 4}, 21);
  const auto r1 = cp_als_traced(x, 1);
  const auto r3 = cp_als_traced(x, 3);
  EXPECT_LE(r3.relative_error, r1.relative_error);
  const auto s1 = random_cpd({4, 4, 4}, 1, 0), s3 = random_cpd({4, 4, 4}, 3, 0);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(s1.factors[n](i, 0), s3.factors[n](i, 0));
}

TEST(CpAls, ErrorHistoryIsMonotone) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor x = testutil::random_tensor({5, 4, 3}, 100 + seed);
    const auto res = cp_als_traced(x, 3, {200, 0.0, seed});
    for (std::size_t k = 1; k < res.error_history.size(); ++k)
      EXPECT_LE(res.error_history[k], res.error_history[k - 1] + 1e-12) << "seed " << seed << " sweep " << k;
    EXPECT_DOUBLE_EQ(res.relative_error, res.error_history.back());
    EXPECT_NEAR(res.relative_error, relative_error(x, reconstruct(res.cpd)), 1e-12);
  }
}

TEST(CpAls, NormalizedAfterEverySweep) {
  const Tensor x = testutil::random_tensor({4, 5, 3}, 5);
  for (int sweeps = 1; sweeps <= 5; ++sweeps) expect_normalized(cp_als(x, 3, {sweeps, 0.0, 2}));
}

TEST(CpAls, ScaleEquivariance) {
  const Tensor x = testutil::random_tensor({4, 3, 5}, 6);
  const double alpha = 37.5;
  const auto a = cp_als(x, 2, {100, 1e-10, 8});
  const auto b = cp_als(scaled(x, alpha), 2, {100, 1e-10, 8});
  for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(b.coeffs[r], alpha * a.coeffs[r], 1e-9 * alpha * a.coeffs[r]);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t r = 0; r < 2; ++r) {
      double dot = 0.0;
      for (std::size_t i = 0; i < a.factors[n].rows(); ++i) dot += a.factors[n](i, r) * b.factors[n](i, r);
      EXPECT_NEAR(std::abs(dot), 1.0, 1e-9);
    }
}

TEST(CpAls, DeterministicForSeed) {
  const Tensor x = testutil::random_tensor({4, 4, 3}, 44);
  const auto a = cp_als(x, 3, {50, 1e-8, 12});
  const auto b = cp_als(x, 3, {50, 1e-8, 12});
  EXPECT_EQ(a.coeffs, b.coeffs);
  for (std::size_t n = 0; n < 3; ++n) EXPECT_EQ(a.factors[n], b.factors[n]);
}

TEST(CpAls, ExcessRankIsLegal) {
  std::mt19937_64 rng(2);
  const Tensor x = testutil::outer3(testutil::unit_vector(3, rng), testutil::unit_vector(3, rng),
                                    testutil::unit_vector(2, rng), 1.0);
  const auto c = cp_als(x, 4);
  EXPECT_LE(relative_error(x, reconstruct(c)), 1e-6);
  expect_normalized(c);
}

TEST(Canonicalize, SignsAndOrder) {
  CPDecomposition c = random_cpd({3, 4, 2}, 3, 7);
  c.coeffs = {-1.0, 4.0, 2.0};
  const Tensor before = reconstruct(c);
  const auto k = canonicalize(c);
  EXPECT_LE(testutil::max_abs_diff(before, reconstruct(k)), 1e-13);
  EXPECT_EQ(k.coeffs, (std::vector<double>{4.0, 2.0, 1.0}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t r = 0; r < 3; ++r) {
      const auto col = k.factors[n].column(r);
      const auto it = std::max_element(col.begin(), col.end(), [](double a, double b) { return std::abs(a) < std::abs(b); });
      EXPECT_GE(*it, 0.0);
    }
}

TEST(CpAls, LineSearchSwitch) {
  const Tensor x = reconstruct(random_cpd({4, 8, 2}, 2, 10016));
  for (bool ls : {false, true}) {
    AlsOptions opts{300, 0.0, 16};
    opts.line_search = ls;
    const auto res = cp_als_traced(x, 2, opts);
    for (std::size_t k = 1; k < res.error_history.size(); ++k)
      EXPECT_LE(res.error_history[k], res.error_history[k - 1] + 1e-12) << "line_search " << ls << " sweep " << k;
  }
  AlsOptions plain{300, 0.0, 16}, accel{300, 0.0, 16};
  plain.line_search = false;
  EXPECT_LT(cp_als_traced(x, 2, accel).relative_error, cp_als_traced(x, 2, plain).relative_error);
}
