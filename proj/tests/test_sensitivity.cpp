#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "dpllm/sensitivity.hpp"
#include "test_util.hpp"

namespace dpllm {
namespace {

using testing_util::random_matrix;

std::map<LayerId, Matrix> one_layer(Matrix m) {
  std::map<LayerId, Matrix> g;
  g.emplace(LayerId{0, LayerKind::Q}, std::move(m));
  return g;
}

TEST(GradientAccumulator, SingleSampleIsSquare) {
  const Matrix g = random_matrix(3, 5, 1);
  GradientAccumulator acc;
  acc.add(one_layer(g));
  const auto [f, s] = acc.finish();
  const Matrix& fm = f.begin()->second;
  for (std::size_t i = 0; i < g.size(); ++i) {
    EXPECT_EQ(fm.data()[i], g.data()[i] * g.data()[i]);
    EXPECT_EQ(s.begin()->second.data()[i], g.data()[i]);
  }
}

TEST(GradientAccumulator, DuplicateSampleDoublesExactly) {
  const Matrix g = random_matrix(4, 4, 2);
  GradientAccumulator one, two;
  one.add(one_layer(g));
  two.add(one_layer(g));
  two.add(one_layer(g));
  const auto f1 = one.finish().first.begin()->second;
  const auto f2 = two.finish().first.begin()->second;
  for (std::size_t i = 0; i < f1.size(); ++i) EXPECT_EQ(f2.data()[i], 2.0 * f1.data()[i]);
}

TEST(GradientAccumulator, OrderPermutationInvariant) {
  std::vector<Matrix> samples;
  for (int i = 0; i < 37; ++i) samples.push_back(random_matrix(6, 7, 100 + i, 1.0 + i));
  GradientAccumulator a;
  for (const auto& s : samples) a.add(one_layer(s));
  const auto fa = a.finish().first.begin()->second;
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(samples.begin(), samples.end(), rng);
    GradientAccumulator b;
    for (const auto& s : samples) b.add(one_layer(s));
    const auto fb = b.finish().first.begin()->second;
    for (std::size_t i = 0; i < fa.size(); ++i) {
      EXPECT_LE(std::abs(fa.data()[i] - fb.data()[i]), 1e-12 * fa.data()[i]);
    }
  }
}

TEST(GradientAccumulator, EmptyIsAnError) {
  GradientAccumulator acc;
  EXPECT_THROW(acc.finish(), Error);
}

TEST(GradientAccumulator, LossScaleSquaresFisher) {
  const Matrix g = random_matrix(3, 3, 9);
  Matrix g4 = g;
  for (double& v : g4.values()) v *= 4.0;
  GradientAccumulator a, b;
  a.add(one_layer(g));
  b.add(one_layer(g4));
  const auto fa = a.finish().first.begin()->second;
  const auto fb = b.finish().first.begin()->second;
  for (std::size_t i = 0; i < fa.size(); ++i) EXPECT_EQ(fb.data()[i], 16.0 * fa.data()[i]);
}

class ScoreFixture : public ::testing::Test {
 protected:
  Matrix w = random_matrix(4, 4, 42);
  QuantizedLayer q = quantize_layer(w, 6, 3);
  Matrix f = [] {
    Matrix m = random_matrix(4, 4, 43);
    for (double& v : m.values()) v = v * v;
    return m;
  }();
  Matrix g = random_matrix(4, 4, 44);
};

TEST_F(ScoreFixture, SecondOrderMatchesHandLoop) {
  for (unsigned b = 3; b <= 6; ++b) {
    const Matrix wb = dequantize(q, b);
    double want = 0.0;
    for (std::size_t r = 0; r < 4; ++r) {
      for (std::size_t c = 0; c < 4; ++c) {
        want += f(r, c) * (w(r, c) - wb(r, c)) * (w(r, c) - wb(r, c));
      }
    }
    EXPECT_DOUBLE_EQ(second_order_score(f, w, q, b), 0.5 * want);
  }
}

TEST_F(ScoreFixture, SecondOrderWithUnitFisherIsHalfSquaredNorm) {
  const Matrix ones(4, 4, 1.0);
  const Matrix wb = dequantize(q, 4);
  double n2 = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) n2 += std::pow(w.data()[i] - wb.data()[i], 2);
  EXPECT_DOUBLE_EQ(second_order_score(ones, w, q, 4), 0.5 * n2);
}

TEST_F(ScoreFixture, FirstOrderMatchesExplicitDot) {
  for (unsigned b = 3; b <= 6; ++b) {
    const Matrix wb = dequantize(q, b);
    double dot = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) dot += g.data()[i] * (w.data()[i] - wb.data()[i]);
    EXPECT_DOUBLE_EQ(first_order_score(g, w, q, b), std::abs(dot));
  }
}

TEST_F(ScoreFixture, FirstOrderOrthogonalGradientIsZero) {
  const Matrix wb = dequantize(q, 3);
  Matrix ortho(4, 4, 0.0);
  const double d0 = w.data()[0] - wb.data()[0];
  const double d1 = w.data()[1] - wb.data()[1];
  ortho.data()[0] = d1;
  ortho.data()[1] = -d0;
  EXPECT_EQ(first_order_score(ortho, w, q, 3), 0.0);
}

TEST_F(ScoreFixture, HawqMatchesExplicitAndIsLinearInFisher) {
  for (unsigned b = 3; b <= 6; ++b) {
    const Matrix wb = dequantize(q, b);
    double tr = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      tr += f.data()[i];
      n2 += std::pow(w.data()[i] - wb.data()[i], 2);
    }
    EXPECT_DOUBLE_EQ(hawq_score(f, w, q, b), tr / 16.0 * n2);
    Matrix f3 = f;
    for (double& v : f3.values()) v *= 3.0;
    EXPECT_NEAR(hawq_score(f3, w, q, b), 3.0 * hawq_score(f, w, q, b),
                1e-14 * hawq_score(f, w, q, b));
  }
}

TEST(Scores, ZeroWhenLossless) {
  Matrix w(3, 4, 0.0);
  for (std::size_t c = 0; c < 4; ++c) {
    w(0, c) = 1.5;
    w(1, c) = -0.5;
    w(2, c) = 0.0;
  }
  const auto q = quantize_layer(w, 6, 3);
  const Matrix f = random_matrix(3, 4, 7);
  for (unsigned b = 3; b <= 6; ++b) {
    EXPECT_EQ(second_order_score(f, w, q, b), 0.0);
    EXPECT_EQ(first_order_score(f, w, q, b), 0.0);
    EXPECT_EQ(hawq_score(f, w, q, b), 0.0);
  }
}

// Random layers: hawq follows the reconstruction MSE, which the nested grid
// keeps non-increasing in b on layers of realistic size.
TEST(Scores, HawqNonIncreasingOnRandomLayers) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Matrix w = random_matrix(32, 32, 500 + seed);
    const auto q = quantize_layer(w, 6, 3);
    Matrix f = random_matrix(32, 32, 900 + seed);
    for (double& v : f.values()) v = v * v;
    double prev_h = INFINITY, prev_s = INFINITY;
    for (unsigned b = 3; b <= 6; ++b) {
      const double h = hawq_score(f, w, q, b);
      const double s = second_order_score(f, w, q, b);
      EXPECT_LE(h, prev_h);
      EXPECT_LE(s, prev_s);
      prev_h = h;
      prev_s = s;
    }
  }
}

class ProfileFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    weights_ = new ModelWeights(init_model(11, testing_util::small_config()));
    store_ = new BitPlaneStore(BitPlaneStore::build(*weights_, 6, 3));
    samples_ = new std::vector<std::vector<Token>>(testing_util::random_samples(6, 24, 3));
    profile_ = new SensitivityProfile(profile(*weights_, *store_, *samples_, 77));
  }
  static void TearDownTestSuite() {
    delete profile_;
    delete samples_;
    delete store_;
    delete weights_;
  }
  static ModelWeights* weights_;
  static BitPlaneStore* store_;
  static std::vector<std::vector<Token>>* samples_;
  static SensitivityProfile* profile_;
};
ModelWeights* ProfileFixture::weights_ = nullptr;
BitPlaneStore* ProfileFixture::store_ = nullptr;
std::vector<std::vector<Token>>* ProfileFixture::samples_ = nullptr;
SensitivityProfile* ProfileFixture::profile_ = nullptr;

TEST_F(ProfileFixture, CoversEveryLayerAndWidth) {
  const auto& p = *profile_;
  EXPECT_EQ(p.n_samples, 6u);
  EXPECT_EQ(p.corpus_hash, 77u);
  EXPECT_EQ(p.store_hash, store_->content_hash());
  for (const auto& id : linear_layers(weights_->config)) {
    for (double v : p.fisher_diag.at(id).values()) EXPECT_GE(v, 0.0);
    for (auto kind : {ScoreKind::SecondOrder, ScoreKind::FirstOrder, ScoreKind::Hawq}) {
      for (unsigned b = 3; b <= 6; ++b) EXPECT_TRUE(std::isfinite(p.score(kind, id, b)));
    }
    const double top = p.score(ScoreKind::SecondOrder, id, 6);
    for (unsigned b = 3; b < 6; ++b) EXPECT_LE(top, p.score(ScoreKind::SecondOrder, id, b));
  }
}

TEST_F(ProfileFixture, SampleOrderDoesNotMatter) {
  auto reversed = *samples_;
  std::reverse(reversed.begin(), reversed.end());
  const auto p2 = profile(*weights_, *store_, reversed, 77);
  for (const auto& [id, f] : profile_->fisher_diag) {
    const auto& f2 = p2.fisher_diag.at(id);
    for (std::size_t i = 0; i < f.size(); ++i) {
      EXPECT_LE(std::abs(f.data()[i] - f2.data()[i]), 1e-12 * f.data()[i]);
    }
  }
}

TEST_F(ProfileFixture, FileRoundTrip) {
  const auto dir = testing_util::temp_dir("profile");
  save_profile(*profile_, dir / "p.prof");
  const auto p = load_profile(dir / "p.prof");
  EXPECT_EQ(p.n_samples, profile_->n_samples);
  EXPECT_EQ(p.model_hash, profile_->model_hash);
  EXPECT_EQ(p.store_hash, profile_->store_hash);
  EXPECT_EQ(p.fisher_diag, profile_->fisher_diag);
  EXPECT_EQ(p.grad_sum, profile_->grad_sum);
  EXPECT_EQ(p.second_order, profile_->second_order);
  EXPECT_EQ(p.first_order, profile_->first_order);
  EXPECT_EQ(p.hawq, profile_->hawq);
}

TEST_F(ProfileFixture, Errors) {
  std::vector<std::vector<Token>> none;
  EXPECT_THROW(profile(*weights_, *store_, none), Error);
  const auto other = init_model(12, testing_util::small_config());
  EXPECT_THROW(profile(other, *store_, *samples_), ProvenanceError);
}

}  // namespace
}  // namespace dpllm
