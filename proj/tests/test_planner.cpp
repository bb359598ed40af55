#include <gtest/gtest.h>

#include <random>

#include "conv_oracle.hpp"
#include "lwck/planner.hpp"
#include "test_util.hpp"

using namespace lwck;

namespace {

ConvLayerSpec spec(const std::string& name, std::size_t S, std::size_t T, std::size_t D, std::size_t stride = 1,
                   std::size_t pad = 0, std::size_t groups = 1, std::size_t h = 8, std::size_t w = 8) {
  return ConvLayerSpec{name, S, T, D, stride, pad, groups, std::array<std::size_t, 2>{h, w}};
}

// Operation count of the naive loop: one multiply and one add per kernel tap.
Count naive_flops(const ConvLayerSpec& s) {
  const std::size_t H = (*s.input_hw)[0], W = (*s.input_hw)[1];
  Count ops = 0;
  for (std::size_t t = 0; t < s.out_channels; ++t)
    for (std::size_t oy = 0; oy + s.kernel_size <= H + 2 * s.padding; oy += s.stride)
      for (std::size_t ox = 0; ox + s.kernel_size <= W + 2 * s.padding; ox += s.stride)
        for (std::size_t j = 0; j < s.in_channels / s.groups; ++j)
          for (std::size_t k = 0; k < s.kernel_size * s.kernel_size; ++k) ops += 2;
  return ops;
}

}  // namespace

TEST(CountParams, Examples) {
  EXPECT_EQ(count_params(spec("a", 768, 48, 1)), 36864u);
  EXPECT_EQ(count_params(spec("b", 1, 1, 3)), 9u);
  EXPECT_EQ(count_params(spec("c", 16, 16, 3, 1, 1, 16)), 144u);
}

TEST(CountFlops, Examples) {
  EXPECT_EQ(count_flops(spec("a", 1, 1, 1, 1, 0, 1, 1, 1)), 2u);
  EXPECT_EQ(count_flops(spec("b", 2, 4, 3, 1, 1, 1, 8, 8)), 9216u);
  const double r = double(count_flops(spec("c", 3, 5, 3, 1, 1, 1, 16, 16))) /
                   double(count_flops(spec("c", 3, 5, 3, 2, 1, 1, 16, 16)));
  EXPECT_NEAR(r, 4.0, 0.01);
  ConvLayerSpec no_hw = spec("d", 2, 2, 3);
  no_hw.input_hw.reset();
  EXPECT_THROW(count_flops(no_hw), std::invalid_argument);
}

TEST(CountFlops, MatchesNaiveLoop) {
  for (const auto& s : {spec("a", 2, 4, 3, 1, 1), spec("b", 3, 6, 7, 2, 3, 1, 17, 15), spec("c", 4, 4, 3, 2, 0, 4, 9, 9),
                        spec("d", 8, 2, 1, 3, 1, 2, 10, 7)})
    EXPECT_EQ(count_flops(s), naive_flops(s)) << s.name;
}

TEST(Speedup, ReferenceLayerRatios) {
  EXPECT_NEAR(speedup(1.616e-1, {2.118e-2, 2.979e-3, 6.415e-2}), 1.829, 0.001);
  EXPECT_NEAR(speedup(4.496e-3, {1.177e-3, 4.414e-4}), 2.778, 0.001);
  EXPECT_NEAR(speedup(1.346e-2, {3.923e-4, 5.52e-5, 4.414e-4}), 15.14, 0.01);
  EXPECT_THROW(speedup(1.0, std::span<const double>{}), std::invalid_argument);
  EXPECT_THROW(speedup(1.0, {0.0}), std::invalid_argument);
  EXPECT_THROW(speedup(0.0, {1.0}), std::invalid_argument);
}

TEST(RankSearch, Examples) {
  RankSearchConfig cfg{0.25, [](std::size_t r) { return 1.0 / double(r); }, 1, 16};
  auto res = rank_search(cfg);
  EXPECT_TRUE(res.feasible);
  EXPECT_EQ(res.rank, 4u);
  EXPECT_EQ(res.metric_value, 0.25);

  cfg.threshold = 1.0;
  EXPECT_EQ(rank_search(cfg).rank, 1u);

  cfg.threshold = 0.01;
  res = rank_search(cfg);
  EXPECT_FALSE(res.feasible);
  EXPECT_EQ(res.rank, 16u);
  EXPECT_EQ(res.metric_value, 1.0 / 16.0);

  EXPECT_THROW(rank_search(RankSearchConfig{0.1, cfg.metric, 5, 4}), std::invalid_argument);
  EXPECT_THROW(rank_search(RankSearchConfig{0.1, {}, 1, 4}), std::invalid_argument);
}

TEST(RankSearch, AgreesWithExhaustiveScan) {
  std::mt19937_64 rng(123);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t max_rank = 1 + rng() % 60;
    std::vector<double> values(max_rank + 1);
    double v = 1.0;
    for (std::size_t r = 1; r <= max_rank; ++r) {
      v *= std::uniform_real_distribution<double>(0.5, 1.0)(rng);
      values[r] = v;
    }
    const double threshold = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * values[1];
    std::size_t expect = 0;
    for (std::size_t r = 1; r <= max_rank && !expect; ++r)
      if (values[r] <= threshold) expect = r;
    const auto res = rank_search({threshold, [&](std::size_t r) { return values.at(r); }, 1, max_rank});
    EXPECT_EQ(res.feasible, expect != 0);
    if (expect) {
      EXPECT_EQ(res.rank, expect);
    }
  }
}

TEST(RankSearch, EqualityIsAcceptable) {
  const auto res = rank_search({0.5, [](std::size_t r) { return r >= 3 ? 0.5 : 1.0; }, 1, 10});
  EXPECT_EQ(res.rank, 3u);
}

TEST(RankSearch, EvaluatesEachRankOnce) {
  std::map<std::size_t, int> calls;
  const auto res = rank_search({0.1, [&](std::size_t r) {
                                  ++calls[r];
                                  return 1.0 / double(r);
                                },
                                1, 100});
  EXPECT_EQ(res.rank, 10u);
  for (const auto& [r, n] : calls) EXPECT_EQ(n, 1) << r;
  EXPECT_EQ(res.evaluations, calls.size());
}

TEST(RankSearch, DownwardSweepCatchesNonMonotoneDip) {
  // Acceptable at 6 and from 9 upward; the bisection lands on 9.
  auto m = [](std::size_t r) { return r == 6 || r >= 9 ? 0.0 : 1.0; };
  const auto res = rank_search({0.5, m, 1, 16});
  EXPECT_TRUE(res.feasible);
  EXPECT_EQ(res.rank, 6u);
}

TEST(RankSearch, LayerDefaultBound) {
  const auto s = spec("p", 768, 48, 1);
  std::size_t highest = 0;
  const auto res = rank_search(s, {0.0, [&](std::size_t r) {
                                     highest = std::max(highest, r);
                                     return r == 48 ? 0.0 : 1.0;
                                   }});
  EXPECT_EQ(res.rank, 48u);
  EXPECT_EQ(highest, 48u);
}

TEST(Rewrite, ParamFormulas) {
  struct Shape {
    std::size_t S, T, D;
  };
  for (const auto& sh : std::vector<Shape>{{768, 48, 1}, {48, 768, 1}, {512, 32, 1}, {64, 192, 3}, {3, 64, 7}, {5, 7, 3}}) {
    for (std::size_t R : {std::size_t{1}, std::size_t{2}, std::size_t{5}}) {
      const auto s = spec("l", sh.S, sh.T, sh.D, 1, sh.D / 2, 1, 4, 4);
      std::vector<FactorizedLayer> layers;
      if (sh.D == 1) {
        layers.push_back({LayerKind::pointwise, detail::sublayer_spec(s, ".0", sh.S, R, 1, 1, 0, 1, s.input_hw), {}});
        layers.push_back({LayerKind::pointwise, detail::sublayer_spec(s, ".1", R, sh.T, 1, 1, 0, 1, s.input_hw), {}});
      } else {
        CPDecomposition c = random_cpd({sh.D * sh.D, sh.S, sh.T}, R, 1);
        layers = cp_layers_from_decomposition(s, c);
      }
      LayerRecord rec;
      account(rec, s, layers);
      const Count expect = sh.D == 1 ? R * (sh.S + sh.T) : R * sh.S + R * sh.D * sh.D + R * sh.T;
      EXPECT_EQ(rec.params_after, expect) << sh.S << "x" << sh.T << " D" << sh.D << " R" << R;
      Count naive = 0;
      for (const auto& l : layers) naive += naive_flops(l.spec);
      EXPECT_EQ(rec.flops_after, naive);
      EXPECT_EQ(rec.flops_before, naive_flops(s));
    }
  }
}

TEST(CompressModel, FullRankPointwiseSplit) {
  const auto s = spec("pw", 4, 6, 1);
  CompressConfig cfg;
  cfg.rank_threshold = 1e-9;
  cfg.force = true;
  const auto res = compress_model({{s, testutil::random_tensor({6, 4, 1, 1}, 1)}}, cfg);
  ASSERT_EQ(res.plan.records.size(), 1u);
  const auto& r = res.plan.records[0];
  EXPECT_EQ(r.method, Method::svd);
  EXPECT_EQ(r.rank, 4u);
  EXPECT_EQ(r.params_after, 4u * (4 + 6));
  const Tensor x = testutil::random_tensor({4, 8, 8}, 2);
  EXPECT_LE(testutil::max_abs_diff(forward_sequence(x, res.layers[0]),
                                   testutil::conv_oracle(x, s, testutil::random_tensor({6, 4, 1, 1}, 1))),
            1e-9);
}

TEST(CompressModel, NoGainSkipUnlessForced) {
  const auto s = spec("pw", 4, 6, 1);
  CompressConfig cfg;
  cfg.rank_threshold = 1e-9;
  const auto res = compress_model({{s, testutil::random_tensor({6, 4, 1, 1}, 1)}}, cfg);
  EXPECT_EQ(res.plan.records[0].method, Method::skip);
  EXPECT_EQ(res.plan.records[0].skip_reason, SkipReason::no_gain);
  EXPECT_TRUE(res.layers[0].empty());
}

std::vector<ConvLayer> synthetic_model() {
  return {{spec("reduce", 16, 12, 1), testutil::low_rank_pointwise_weights(16, 12, 3, 1)},
          {spec("conv3", 8, 10, 3, 1, 1), testutil::cp_rank_exact_weights(3, 8, 10, 3, 2)},
          {spec("stem", 3, 8, 7, 2, 3, 1, 16, 16), testutil::cp_rank_exact_weights(7, 3, 8, 2, 3)}};
}

TEST(CompressModel, TotalsMatchPerLayerFormulas) {
  CompressConfig cfg;
  cfg.rank_threshold = 1e-6;
  cfg.als = testutil::kExactAls;
  const auto model = synthetic_model();
  const auto res = compress_model(model, cfg);
  ASSERT_EQ(res.plan.records.size(), 3u);
  Count pb = 0, pa = 0, fb = 0, fa = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& r = res.plan.records[i];
    const auto& s = model[i].spec;
    EXPECT_EQ(r.name, s.name);
    ASSERT_NE(r.method, Method::skip) << r.name << ": " << r.detail;
    EXPECT_EQ(r.method, s.kernel_size == 1 ? Method::svd : Method::cpd_epc);
    const Count expect = s.kernel_size == 1 ? r.rank * (s.in_channels + s.out_channels)
                                            : r.rank * (s.in_channels + s.kernel_size * s.kernel_size + s.out_channels);
    EXPECT_EQ(r.params_after, expect);
    EXPECT_EQ(r.params_before, count_params(s));
    EXPECT_DOUBLE_EQ(r.speedup, double(r.flops_before) / double(r.flops_after));
    Count sub = 0;
    for (const auto& l : res.layers[i]) sub += count_flops(l.spec);
    EXPECT_EQ(r.flops_after, sub);
    pb += r.params_before, pa += r.params_after, fb += r.flops_before, fa += r.flops_after;
  }
  EXPECT_EQ(res.plan.records[0].rank, 3u);
  EXPECT_EQ(res.plan.totals.params_before, pb);
  EXPECT_EQ(res.plan.totals.params_after, pa);
  EXPECT_EQ(res.plan.totals.flops_before, fb);
  EXPECT_EQ(res.plan.totals.flops_after, fa);
  EXPECT_DOUBLE_EQ(res.plan.totals.speedup, double(fb) / double(fa));
}

TEST(CompressModel, SkipAllIsIdentity) {
  CompressConfig cfg;
  cfg.skip = {"*"};
  const auto res = compress_model(synthetic_model(), cfg);
  for (const auto& r : res.plan.records) {
    EXPECT_EQ(r.method, Method::skip);
    EXPECT_EQ(r.skip_reason, SkipReason::user);
    EXPECT_EQ(r.params_after, r.params_before);
  }
  EXPECT_EQ(res.plan.totals.speedup, 1.0);
}

TEST(CompressModel, GlobSkipsByName) {
  CompressConfig cfg;
  cfg.skip = {"conv*"};
  cfg.rank_threshold = 0.5;
  const auto res = compress_model(synthetic_model(), cfg);
  EXPECT_NE(res.plan.records[0].method, Method::skip);
  EXPECT_EQ(res.plan.records[1].skip_reason, SkipReason::user);
  EXPECT_NE(res.plan.records[2].method, Method::skip);
}

TEST(CompressModel, FailuresBecomeSkipRecords) {
  auto model = synthetic_model();
  model[0].weights = testutil::random_tensor({2, 2, 1, 1}, 0);
  model[1].spec.input_hw.reset();
  CompressConfig cfg;
  cfg.rank_threshold = 0.5;
  const auto res = compress_model(model, cfg);
  EXPECT_EQ(res.plan.records[0].skip_reason, SkipReason::error);
  EXPECT_EQ(res.plan.records[1].skip_reason, SkipReason::error);
  EXPECT_FALSE(res.plan.records[0].detail.empty());
  EXPECT_NE(res.plan.records[2].method, Method::skip);
}

TEST(CompressModel, InfeasibleIsReportedNotClamped) {
  CompressConfig cfg;
  cfg.metric = [](const ConvLayer&, const FactorizedConv&) { return 1.0; };
  cfg.rank_threshold = 0.5;
  cfg.max_rank = 3;
  const auto res = compress_model({synthetic_model()[0]}, cfg);
  EXPECT_EQ(res.plan.records[0].skip_reason, SkipReason::infeasible);
  EXPECT_NE(res.plan.records[0].detail.find("1.0"), std::string::npos);
}

TEST(CompressModel, ParallelMatchesSerial) {
  CompressConfig cfg;
  cfg.rank_threshold = 0.05;
  cfg.threads = 1;
  const auto a = compress_model(synthetic_model(), cfg);
  cfg.threads = 4;
  const auto b = compress_model(synthetic_model(), cfg);
  EXPECT_EQ(a.plan, b.plan);
  for (std::size_t i = 0; i < a.layers.size(); ++i)
    for (std::size_t k = 0; k < a.layers[i].size(); ++k) EXPECT_EQ(a.layers[i][k].weights, b.layers[i][k].weights);
}

TEST(CompressModel, LowerRankNeverCostsMore) {
  const auto s = spec("c", 6, 9, 3, 1, 1);
  Count prev_p = 0, prev_f = 0;
  for (std::size_t R = 1; R <= 6; ++R) {
    LayerRecord rec;
    account(rec, s, cp_layers_from_decomposition(s, random_cpd({9, 6, 9}, R, 0)));
    EXPECT_GT(rec.params_after, prev_p);
    EXPECT_GT(rec.flops_after, prev_f);
    if (rec.flops_after < rec.flops_before) {
      EXPECT_GT(rec.speedup, 1.0);
    }
    prev_p = rec.params_after, prev_f = rec.flops_after;
  }
}

TEST(Manifest, Validation) {
  ModelManifest m;
  m.layers.push_back({spec("a", 2, 2, 3), "a.lwt"});
  EXPECT_NO_THROW(validate(m));
  m.layers.push_back({spec("a", 2, 2, 3), "b.lwt"});
  EXPECT_THROW(validate(m), std::invalid_argument);
  m.layers.pop_back();
  m.layers.push_back({spec("b", 2, 2, 3), ""});
  EXPECT_THROW(validate(m), std::invalid_argument);
}

TEST(Enums, RoundTrip) {
  for (auto m : {Method::cpd_epc, Method::svd, Method::skip}) EXPECT_EQ(method_from_string(to_string(m)), m);
  for (auto r : {SkipReason::none, SkipReason::user, SkipReason::no_gain, SkipReason::infeasible, SkipReason::error})
    EXPECT_EQ(skip_reason_from_string(to_string(r)), r);
  EXPECT_THROW(method_from_string("tucker"), std::invalid_argument);
}
