#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include "dpllm/quant.hpp"

namespace dpllm {
namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  Matrix m(rows, cols);
  for (double& v : m.values()) v = static_cast<float>(d(rng));
  return m;
}

double mse(const Matrix& a, const Matrix& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double e = a.data()[i] - b.data()[i];
    s += e * e;
  }
  return s / static_cast<double>(a.size());
}

TEST(QuantizeLayer, TwoBitHandExample) {
  Matrix w(1, 2);
  w(0, 0) = 0.0;
  w(0, 1) = 1.0;
  const auto q = quantize_layer(w, 2, 2);
  EXPECT_EQ(q.codes()[0], 0);
  EXPECT_EQ(q.codes()[1], 3);
  const Matrix d = dequantize(q, 2);
  EXPECT_EQ(d(0, 0), 0.125);
  EXPECT_EQ(d(0, 1), 0.875);
}

TEST(Dequantize, TruncationHandOracle) {
  // Row [0, 1] at n = 3 gives codes [0, 7]; keeping the top two bits leaves
  // [0, 3], reconstructed at the midpoints of quarter cells.
  Matrix w(1, 2);
  w(0, 1) = 1.0;
  const auto q = quantize_layer(w, 3, 2);
  EXPECT_EQ(q.codes()[1], 7);
  const Matrix d = dequantize(q, 2);
  EXPECT_EQ(d(0, 0), 0.0 + 0.125 * 1.0);
  EXPECT_EQ(d(0, 1), 0.0 + 0.875 * 1.0);
  const Matrix d3 = dequantize(q, 3);
  EXPECT_EQ(d3(0, 0), 0.0625);
  EXPECT_EQ(d3(0, 1), 0.9375);
}

TEST(QuantizeLayer, ConstantRowIsExactAtEveryWidth) {
  Matrix w(2, 5, 0.0);
  for (std::size_t c = 0; c < 5; ++c) {
    w(0, c) = 0.75;
    w(1, c) = static_cast<double>(c);
  }
  const auto q = quantize_layer(w, 6, 3);
  for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(q.codes()[c], 0);
  for (unsigned b = 3; b <= 6; ++b) {
    const Matrix d = dequantize(q, b);
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(d(0, c), 0.75);
  }
}

TEST(QuantizeLayer, EightBitHalfStepBound) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Matrix w = random_matrix(16, 33, seed);
    const auto q = quantize_layer(w, 8, 2);
    const Matrix d = dequantize(q, 8);
    for (std::size_t r = 0; r < w.rows(); ++r) {
      const double bound = (static_cast<double>(q.hi()[r]) - q.lo()[r]) / 512.0;
      for (std::size_t c = 0; c < w.cols(); ++c) {
        EXPECT_LE(std::abs(w(r, c) - d(r, c)), bound * (1 + 1e-12));
      }
    }
  }
}

TEST(QuantizeLayer, RejectsBadInput) {
  Matrix w(1, 3, 0.5);
  EXPECT_THROW(quantize_layer(w, 6, 1), ConfigError);
  EXPECT_THROW(quantize_layer(w, 9, 3), ConfigError);
  EXPECT_THROW(quantize_layer(w, 3, 4), ConfigError);
  w(0, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(quantize_layer(w, 6, 3), Error);
  w(0, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(quantize_layer(w, 6, 3), Error);
}

TEST(Dequantize, FullWidthMatchesExplicitReconstruction) {
  const Matrix w = random_matrix(7, 9, 3);
  const auto q = quantize_layer(w, 6, 3);
  const Matrix d = dequantize(q, 6);
  for (std::size_t r = 0; r < 7; ++r) {
    const double step = (static_cast<double>(q.hi()[r]) - q.lo()[r]) / 64.0;
    for (std::size_t c = 0; c < 9; ++c) {
      EXPECT_EQ(d(r, c), q.lo()[r] + (q.codes()[r * 9 + c] + 0.5) * step);
    }
  }
  EXPECT_THROW(dequantize(q, 2), ConfigError);
  EXPECT_THROW(dequantize(q, 7), ConfigError);
}

// Brute force over random 8x8 matrices and every width.
TEST(Dequantize, MseNonIncreasingInBits) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const Matrix w = random_matrix(8, 8, 1000 + seed);
    const auto q = quantize_layer(w, 8, 2);
    double prev = std::numeric_limits<double>::infinity();
    for (unsigned b = 2; b <= 8; ++b) {
      const double e = mse(w, dequantize(q, b));
      EXPECT_LE(e, prev) << "seed " << seed << " b " << b;
      prev = e;
    }
  }
}

TEST(Nesting, LowerWidthCodesArePrefixes) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t rows = 1 + rng() % 12, cols = 1 + rng() % 20;
    const Matrix w = random_matrix(rows, cols, rng());
    const auto q = quantize_layer(w, 6, 3);
    for (unsigned b = 3; b < 6; ++b) {
      const Matrix lo_b = dequantize(q, b);
      const Matrix hi_b = dequantize(q, b + 1);
      for (std::size_t r = 0; r < rows; ++r) {
        const double s_lo = (static_cast<double>(q.hi()[r]) - q.lo()[r]) / std::ldexp(1.0, b);
        const double s_hi = s_lo / 2.0;
        if (s_lo == 0.0) continue;
        for (std::size_t c = 0; c < cols; ++c) {
          const auto code_b = std::llround((lo_b(r, c) - q.lo()[r]) / s_lo - 0.5);
          const auto code_b1 = std::llround((hi_b(r, c) - q.lo()[r]) / s_hi - 0.5);
          EXPECT_EQ(code_b, code_b1 >> 1);
        }
      }
    }
  }
}

TEST(DeltaWeights, DefinitionAndErrors) {
  const Matrix w = random_matrix(6, 10, 21);
  const auto q = quantize_layer(w, 6, 3);
  EXPECT_THROW(delta_weights(q, 4, 4), ConfigError);
  EXPECT_THROW(delta_weights(q, 5, 4), ConfigError);
  for (unsigned l = 3; l < 6; ++l) {
    const Matrix dw = delta_weights(q, l, 6);
    const Matrix wl = dequantize(q, l);
    const Matrix wn = dequantize(q, 6);
    for (std::size_t i = 0; i < dw.size(); ++i) {
      EXPECT_EQ(dw.data()[i] + wl.data()[i], wn.data()[i]);
    }
  }
  Matrix flat(1, 4, -0.25);
  const auto qf = quantize_layer(flat, 6, 3);
  const Matrix dflat = delta_weights(qf, 3, 4);
  for (double v : dflat.values()) EXPECT_EQ(v, 0.0);
}

TEST(Gemv, ZeroAndBasisVectors) {
  const Matrix w = random_matrix(5, 7, 2);
  const auto q = quantize_layer(w, 6, 3);
  std::vector<double> x(7, 0.0);
  for (double v : gemv(q, 4, x)) EXPECT_EQ(v, 0.0);
  const Matrix d = dequantize(q, 4);
  for (std::size_t j = 0; j < 7; ++j) {
    std::fill(x.begin(), x.end(), 0.0);
    x[j] = 1.0;
    const auto y = gemv(q, 4, x);
    for (std::size_t r = 0; r < 5; ++r) EXPECT_NEAR(y[r], d(r, j), 1e-15);
  }
  std::vector<double> bad(6, 1.0);
  EXPECT_THROW(gemv(q, 4, bad), ShapeError);
}

TEST(Gemv, FusedMatchesMaterializedEveryWidth) {
  const Matrix w = random_matrix(64, 64, 5);
  const auto q = quantize_layer(w, 6, 3);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> nd;
  std::vector<double> x(64);
  for (auto& v : x) v = nd(rng);
  for (unsigned b = 3; b <= 6; ++b) {
    const Matrix d = dequantize(q, b);
    const auto y = gemv(q, b, x);
    for (std::size_t r = 0; r < 64; ++r) {
      double want = 0.0;
      for (std::size_t c = 0; c < 64; ++c) want += d(r, c) * x[c];
      EXPECT_LT(std::abs(y[r] - want), 1e-10);
    }
    // Transposed product against the materialized matrix.
    std::vector<double> dx(64, 0.0);
    gemv_t_acc(q, b, x, dx);
    for (std::size_t c = 0; c < 64; ++c) {
      double want = 0.0;
      for (std::size_t r = 0; r < 64; ++r) want += d(r, c) * x[r];
      EXPECT_LT(std::abs(dx[c] - want), 1e-10);
    }
  }
}

TEST(Gemv, LinearInInput) {
  const Matrix w = random_matrix(12, 20, 6);
  const auto q = quantize_layer(w, 6, 3);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd;
  std::vector<double> x(20), y(20), comb(20);
  for (int trial = 0; trial < 10; ++trial) {
    const double a = nd(rng), c = nd(rng);
    for (std::size_t i = 0; i < 20; ++i) {
      x[i] = nd(rng);
      y[i] = nd(rng);
      comb[i] = a * x[i] + c * y[i];
    }
    const auto gx = gemv(q, 5, x), gy = gemv(q, 5, y), gc = gemv(q, 5, comb);
    for (std::size_t r = 0; r < 12; ++r) EXPECT_NEAR(gc[r], a * gx[r] + c * gy[r], 1e-12);
  }
}

TEST(QuantizedLayer, StorageIndependentOfServedWidths) {
  const auto q = quantize_layer(random_matrix(10, 30, 1), 6, 3);
  EXPECT_EQ(q.storage_bits(), 6u * 10u * 30u + 64u * 10u);
}

TEST(BitPlaneStore, SerializeRoundTripAndHash) {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 24;
  cfg.seq_cap = 16;
  const auto w = init_model(3, cfg);
  const auto store = BitPlaneStore::build(w, 6, 3);
  EXPECT_NO_THROW(store.check_covers(cfg));
  const auto path = std::filesystem::temp_directory_path() / "dpllm_store_test.dpq";
  store.save(path);
  const auto loaded = BitPlaneStore::load(path);
  EXPECT_EQ(loaded.content_hash(), store.content_hash());
  EXPECT_EQ(loaded.model_hash(), w.checksum());
  for (const auto& [id, layer] : store.layers()) EXPECT_TRUE(loaded.layer(id) == layer);

  // Rebuilding from the same weights is idempotent.
  EXPECT_EQ(BitPlaneStore::build(w, 6, 3).content_hash(), store.content_hash());

  auto bytes = store.serialize();
  bytes.resize(bytes.size() - 5);
  EXPECT_THROW(BitPlaneStore::deserialize(bytes), IoError);
  bytes[0] = 'X';
  EXPECT_THROW(BitPlaneStore::deserialize(bytes), IoError);
}

}  // namespace
}  // namespace dpllm
