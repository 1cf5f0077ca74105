#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dpllm/estimator.hpp"
#include "test_util.hpp"

namespace dpllm {
namespace {

using testing_util::random_matrix;

std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

TEST(ExactError, TrivialCases) {
  const auto q = quantize_layer(random_matrix(8, 6, 1), 6, 3);
  std::vector<double> zero(6, 0.0);
  EXPECT_EQ(exact_error(q, 3, 4, zero), 0.0);
  const auto qf = quantize_layer(Matrix(3, 6, 0.5), 6, 3);
  std::mt19937_64 rng(1);
  EXPECT_EQ(exact_error(qf, 3, 6, random_vector(6, rng)), 0.0);
}

TEST(ExactError, MatchesMaterializedMultiply) {
  const auto q = quantize_layer(random_matrix(16, 16, 2), 6, 3);
  std::mt19937_64 rng(2);
  for (unsigned l = 3; l < 6; ++l) {
    const Matrix wl = dequantize(q, l), wh = dequantize(q, l + 1);
    for (int t = 0; t < 10; ++t) {
      const auto x = random_vector(16, rng);
      double s = 0.0;
      for (std::size_t r = 0; r < 16; ++r) {
        double y = 0.0;
        for (std::size_t c = 0; c < 16; ++c) y += (wh(r, c) - wl(r, c)) * x[c];
        s += y * y;
      }
      EXPECT_NEAR(exact_error(q, l, l + 1, x), std::sqrt(s), 1e-12);
    }
  }
}

TEST(TranslateThreshold, HandQuantileAndReplay) {
  const std::vector<double> errs{1, 2, 3, 4, 5};
  const auto t = translate_threshold(errs, 3.4, 3);
  EXPECT_NEAR(t.r, 0.6, 1e-12);
  EXPECT_EQ(t.threshold, 3.0);
  EXPECT_EQ(std::count_if(errs.begin(), errs.end(), [&](double e) { return e > t.threshold; }), 2);
}

TEST(TranslateThreshold, SentinelsAndErrors) {
  const std::vector<double> errs{0.5, 1.0};
  EXPECT_EQ(translate_threshold(errs, 3.0, 3).threshold, kInf);
  EXPECT_EQ(translate_threshold(errs, 4.0, 3).threshold, -kInf);
  EXPECT_THROW(translate_threshold(errs, 4.5, 3), ConfigError);
  EXPECT_THROW(translate_threshold(errs, 2.5, 3), ConfigError);
}

TEST(TranslateThreshold, EightyPercentQuantile) {
  std::vector<double> errs(100);
  std::iota(errs.begin(), errs.end(), 1.0);
  const auto t = translate_threshold(errs, 3.2, 3);
  EXPECT_NEAR(t.r, 0.8, 1e-12);
  EXPECT_EQ(t.threshold, 80.0);
}

// Replay selects W_h for exactly floor((1 - r) n) of n distinct errors.
TEST(TranslateThreshold, ReplayCountProperty) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng() % 200;
    std::vector<double> errs(n);
    for (auto& e : errs) e = u(rng);
    std::sort(errs.begin(), errs.end());
    const double p = 4.0 + u(rng);
    const auto t = translate_threshold(errs, p, 4);
    if (!std::isfinite(t.threshold)) continue;
    const auto count = std::count_if(errs.begin(), errs.end(),
                                     [&](double e) { return e > t.threshold; });
    const auto want = static_cast<std::int64_t>(std::floor((1.0 - t.r) * n + 1e-9));
    EXPECT_EQ(count, std::min<std::int64_t>(want, static_cast<std::int64_t>(n) - 1));
  }
}

// Serving the m largest errors with W_h minimizes the error left on W_l.
TEST(ThresholdPolicy, OptimalAgainstAllSubsets) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + rng() % 10;
    std::vector<double> errs(n);
    for (auto& e : errs) e = u(rng);
    std::vector<double> sorted = errs;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t m = 0; m <= n; ++m) {
      double policy = 0.0;
      for (std::size_t i = 0; i < n - m; ++i) policy += sorted[i];
      double best = INFINITY;
      for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
        if (static_cast<std::size_t>(__builtin_popcount(mask)) != m) continue;
        double inc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          if (!(mask & (1u << i))) inc += errs[i];
        }
        best = std::min(best, inc);
      }
      EXPECT_LE(policy, best + 1e-12);
    }
  }
}

TEST(FitLinear, CollinearAccepted) {
  std::vector<double> norms{1, 2, 3, 4, 5}, errs;
  for (double n : norms) errs.push_back(0.5 * n + 0.25);
  const auto f = fit_linear(errs, norms);
  EXPECT_NEAR(f.r2, 1.0, 1e-12);
  EXPECT_NEAR(f.slope, 0.5, 1e-12);
  EXPECT_NEAR(f.intercept, 0.25, 1e-12);
  EXPECT_TRUE(f.accepted);
}

TEST(FitLinear, DirectionOnlyErrorsRejected) {
  // Unit-norm inputs: the error depends only on direction.
  const auto q = quantize_layer(random_matrix(12, 12, 5), 6, 3);
  std::mt19937_64 rng(5);
  std::vector<double> errs, norms;
  for (int i = 0; i < 300; ++i) {
    auto x = random_vector(12, rng);
    const double n = l2_norm(x);
    for (auto& v : x) v /= n;
    errs.push_back(exact_error(q, 3, 4, x));
    norms.push_back(l2_norm(x));
  }
  const auto f = fit_linear(errs, norms);
  EXPECT_LT(f.r2, 0.9);
  EXPECT_FALSE(f.accepted);
}

TEST(FitLinear, R2MatchesTwoPassOracle) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> nd;
  for (int t = 0; t < 20; ++t) {
    std::vector<double> x(50), y(50);
    for (std::size_t i = 0; i < 50; ++i) {
      x[i] = 1.0 + std::abs(nd(rng));
      y[i] = 2.0 * x[i] + 0.3 * nd(rng);
    }
    const auto f = fit_linear(y, x);
    // Independent oracle: r2 = corr(x, y)^2 for simple regression.
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / 50;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / 50;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < 50; ++i) {
      sxy += (x[i] - mx) * (y[i] - my);
      sxx += (x[i] - mx) * (x[i] - mx);
      syy += (y[i] - my) * (y[i] - my);
    }
    EXPECT_NEAR(f.r2, sxy * sxy / (sxx * syy), 1e-10);
  }
}

TEST(FitLinear, TooFewSamplesRejected) {
  const std::vector<double> e{1, 2}, n{1, 2};
  EXPECT_FALSE(fit_linear(e, n).accepted);
}

TEST(Projection, PermutedIdentityIsExact) {
  const auto q = quantize_layer(random_matrix(10, 7, 7), 6, 3);
  const Matrix delta = delta_weights(q, 4, 5);
  Matrix a(10, 10, 0.0);
  for (std::size_t i = 0; i < 10; ++i) a(i, (i * 3) % 10) = 1.0;
  const auto est = build_projection_from(a, delta);
  std::mt19937_64 rng(7);
  for (int t = 0; t < 10; ++t) {
    const auto x = random_vector(7, rng);
    EXPECT_NEAR(est.estimate(x, nullptr), exact_error(delta, x), 1e-12);
  }
}

TEST(Projection, ShapeAndCost) {
  const auto q = quantize_layer(random_matrix(40, 24, 8), 6, 3);
  const auto est = build_projection(delta_weights(q, 3, 4), 64, 1);
  EXPECT_EQ(est.g.rows(), 64u);
  EXPECT_EQ(est.g.cols(), 24u);
  EXPECT_EQ(est.op_count(40, 24), 64u * 24u + 64u);
  EXPECT_THROW(build_projection(delta_weights(q, 3, 4), 0, 1), ConfigError);
}

TEST(Projection, UnbiasedSquaredNorm) {
  std::mt19937_64 rng(9);
  const auto x = random_vector(32, rng);
  Matrix ident(32, 32, 0.0);
  for (std::size_t i = 0; i < 32; ++i) ident(i, i) = 1.0;
  double mean = 0.0;
  const int seeds = 10000;
  for (int s = 0; s < seeds; ++s) {
    const double e = build_projection(ident, 8, static_cast<std::uint64_t>(s)).estimate(x, nullptr);
    mean += e * e;
  }
  mean /= seeds;
  const double want = std::pow(l2_norm(x), 2);
  EXPECT_LT(std::abs(mean - want) / want, 0.02);
}

TEST(Projection, CalibrationSinglePointFits) {
  const auto q = quantize_layer(random_matrix(20, 16, 10), 6, 3);
  const Matrix delta = delta_weights(q, 3, 4);
  auto est = build_projection(delta, 8, 3);
  std::mt19937_64 rng(10);
  const auto x = random_vector(16, rng);
  Matrix inputs(20, 16);
  for (std::size_t i = 0; i < 20; ++i) std::copy(x.begin(), x.end(), inputs.row(i).begin());
  const std::vector<double> errs(20, exact_error(delta, x));
  const auto rep = calibrate_projection(est, inputs, errs);
  EXPECT_TRUE(est.calibrated);
  EXPECT_LT(std::abs(est.estimate(x, nullptr) - errs[0]) / errs[0], 0.01);
  EXPECT_LE(rep.mre_after, rep.mre_before);
}

TEST(Projection, ZeroEpochsLeavesGUnchanged) {
  const auto q = quantize_layer(random_matrix(8, 8, 11), 6, 3);
  auto est = build_projection(delta_weights(q, 3, 4), 4, 1);
  const Matrix before = est.g;
  ProjectionCalibration cfg;
  cfg.epochs = 0;
  const auto rep = calibrate_projection(est, random_matrix(5, 8, 12), std::vector<double>(5, 1.0),
                                        cfg);
  EXPECT_EQ(est.g, before);
  EXPECT_FALSE(est.calibrated);
  EXPECT_FALSE(rep.warning);
}

TEST(Projection, CalibrationRelativeErrorNonIncreasing) {
  const auto q = quantize_layer(random_matrix(48, 32, 13), 6, 3);
  const Matrix delta = delta_weights(q, 3, 4);
  auto est = build_projection(delta, 16, 5);
  Matrix inputs = random_matrix(200, 32, 14);
  // Anisotropic inputs, so the random projection is biased before calibration.
  for (std::size_t i = 0; i < inputs.rows(); ++i) {
    for (std::size_t c = 0; c < 8; ++c) inputs(i, c) *= 6.0;
  }
  std::vector<double> errs;
  for (std::size_t i = 0; i < inputs.rows(); ++i) errs.push_back(exact_error(delta, inputs.row(i)));
  const auto rep = calibrate_projection(est, inputs, errs);
  ASSERT_GE(rep.mre_history.size(), 2u);
  for (std::size_t i = 1; i < rep.mre_history.size(); ++i) {
    EXPECT_LE(rep.mre_history[i], rep.mre_history[i - 1]);
  }
  EXPECT_LT(rep.mre_after, rep.mre_before);
}

TEST(InputSource, ResolutionRule) {
  EXPECT_EQ(resolve_input_source({3, LayerKind::Q}), InputSource::PreviousResidual);
  EXPECT_EQ(resolve_input_source({3, LayerKind::Up}), InputSource::PreviousResidual);
  EXPECT_EQ(resolve_input_source({3, LayerKind::O}), InputSource::Immediate);
  EXPECT_EQ(resolve_input_source({3, LayerKind::Down}), InputSource::Immediate);
  EXPECT_EQ(resolve_input_source({0, LayerKind::Q}), InputSource::Immediate);
}

TEST(ResidualTracker, SourcesPerMode) {
  const auto w = init_model(1, testing_util::small_config());
  const std::size_t d = w.config.d_model;
  std::vector<double> r0(d, 1.0), r1(d, 2.0), prev_block(d, 3.0);
  ResidualTracker prev_tok(w, AsyncMode::PreviousToken);
  prev_tok.observe(1, NormSite::Attention, 0, r0);
  EXPECT_FALSE(prev_tok.source({1, LayerKind::Q}, 0));
  prev_tok.observe(1, NormSite::Attention, 1, r1);
  const auto s = prev_tok.source({1, LayerKind::Q}, 1);
  ASSERT_TRUE(s);
  std::vector<double> want(d);
  rms_normalize(r0, w.norm_gain(1, NormSite::Attention), w.config.norm_eps, want);
  EXPECT_EQ(*s, want);
  EXPECT_FALSE(prev_tok.source({1, LayerKind::O}, 1));
  EXPECT_FALSE(prev_tok.source({0, LayerKind::Q}, 1));

  ResidualTracker preceding(w, AsyncMode::PrecedingBlock);
  preceding.observe(0, NormSite::Mlp, 4, prev_block);
  const auto s2 = preceding.source({1, LayerKind::Up}, 4);
  ASSERT_TRUE(s2);
  rms_normalize(prev_block, w.norm_gain(1, NormSite::Mlp), w.config.norm_eps, want);
  EXPECT_EQ(*s2, want);
  EXPECT_FALSE(preceding.source({1, LayerKind::Up}, 5));
}

class CaptureFixture : public ::testing::Test {
 protected:
  ModelWeights w = init_model(5, testing_util::small_config());
  BitPlaneStore store = BitPlaneStore::build(w, 6, 3);
  std::map<LayerId, unsigned> max_bits;
  std::map<LayerId, InterpCoeffs> pairs;
  void SetUp() override {
    for (const auto& id : linear_layers(w.config)) {
      max_bits[id] = 5;
      pairs[id] = interp_coeffs(3.5 + 0.05 * static_cast<double>(layer_index(id) % 10), 3, 5);
    }
  }
};

TEST_F(CaptureFixture, CountsSortingAndReplay) {
  const std::vector<std::vector<Token>> one{{1, 2, 3, 4}};
  const auto cap = collect_error_samples(w, store, max_bits, pairs, one);
  for (const auto& [id, c] : cap) {
    EXPECT_EQ(c.errors.size(), 4u);
    EXPECT_TRUE(std::is_sorted(c.sorted_errors.begin(), c.sorted_errors.end()));
  }
  const auto samples = testing_util::random_samples(3, 10, 2);
  const auto cap2 = collect_error_samples(w, store, max_bits, pairs, samples);
  for (const auto& [id, c] : cap2) {
    ASSERT_EQ(c.inputs.rows(), 30u);
    const Matrix delta = delta_weights(store.layer(id), c.l, c.h);
    double replay = 0.0, listed = 0.0;
    for (std::size_t i = 0; i < c.inputs.rows(); ++i) replay += exact_error(delta, c.inputs.row(i));
    for (double e : c.sorted_errors) listed += e;
    EXPECT_NEAR(replay, listed, 1e-12 * std::max(1.0, listed));
  }
}

TEST_F(CaptureFixture, SubsampleIsCapped) {
  const auto samples = testing_util::random_samples(4, 30, 3);
  CaptureOptions opt;
  opt.max_inputs = 25;
  const auto cap = collect_error_samples(w, store, max_bits, pairs, samples, opt);
  for (const auto& [id, c] : cap) {
    EXPECT_EQ(c.errors.size(), 120u);
    EXPECT_LE(c.inputs.rows(), 25u);
    EXPECT_EQ(c.sample_errors.size(), c.inputs.rows());
  }
  EXPECT_THROW(collect_error_samples(w, store, max_bits, pairs, {}), Error);
}

TEST_F(CaptureFixture, HybridChoiceDominates) {
  const auto samples = testing_util::random_samples(6, 20, 4);
  const auto cap = collect_error_samples(w, store, max_bits, pairs, samples);
  EstimatorConfig cfg;
  cfg.k = 16;
  for (const auto& [id, c] : cap) {
    const auto b = build_estimator(id, c, store.layer(id), cfg);
    ASSERT_TRUE(b.linear && b.projection);
    EXPECT_EQ(b.estimator.source, resolve_input_source(id));
    if (b.estimator.kind == EstimatorKind::Linear) {
      EXPECT_TRUE(b.linear->accepted);
      EXPECT_LE(b.estimator.calib_mre, b.projection->mre_after);
    } else {
      EXPECT_EQ(b.estimator.kind, EstimatorKind::Projection);
      EXPECT_LE(b.projection->mre_after, b.projection->mre_before);
    }
    cfg.mode = EstimatorMode::Exact;
    EXPECT_EQ(build_estimator(id, c, store.layer(id), cfg).estimator.kind, EstimatorKind::Exact);
    cfg.mode = EstimatorMode::Hybrid;
  }
}

}  // namespace
}  // namespace dpllm
