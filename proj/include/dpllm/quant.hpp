#pragma once

// Multi-scale nested quantization. One n-bit code per weight; the b-bit
// variant of a layer is obtained by keeping the top b bits of each code, so
// every precision in [b_min, n_bits] is served from the same storage.

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <span>
#include <tuple>
#include <vector>

#include "dpllm/common.hpp"
#include "dpllm/model.hpp"

namespace dpllm {

inline constexpr unsigned kMinSupportedBits = 2;
inline constexpr unsigned kMaxSupportedBits = 8;

class QuantizedLayer {
 public:
  QuantizedLayer() = default;
  // Throws ShapeError when the parts violate the layer invariants.
  QuantizedLayer(std::size_t rows, std::size_t cols, unsigned n_bits, unsigned b_min,
                 std::vector<std::uint8_t> codes, std::vector<float> lo, std::vector<float> hi);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  unsigned n_bits() const { return n_bits_; }
  unsigned b_min() const { return b_min_; }
  std::span<const std::uint8_t> codes() const { return codes_; }
  std::span<const float> lo() const { return lo_; }
  std::span<const float> hi() const { return hi_; }

  // Reconstruction step (hi - lo) / 2^b per row.
  std::span<const double> step(unsigned b) const;
  std::span<const double> lo_values() const { return lo_d_; }

  // Code storage: n_bits per weight plus two FP32 values per channel.
  std::uint64_t storage_bits() const;

  void check_bits(unsigned b) const;

  bool operator==(const QuantizedLayer& other) const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  unsigned n_bits_ = 0;
  unsigned b_min_ = 0;
  std::vector<std::uint8_t> codes_;
  std::vector<float> lo_, hi_;
  std::vector<double> lo_d_;
  std::vector<std::vector<double>> steps_;  // indexed by b
};

QuantizedLayer quantize_layer(const Matrix& w, unsigned n_bits, unsigned b_min);

// Truncated code c >> (n - b), reconstructed at the cell midpoint.
Matrix dequantize(const QuantizedLayer& layer, unsigned b);

// W_h - W_l, requires b_min <= l < h <= n_bits.
Matrix delta_weights(const QuantizedLayer& layer, unsigned l, unsigned h);

// y = W_b x with dequantization fused into the kernel.
void gemv(const QuantizedLayer& layer, unsigned b, std::span<const double> x, std::span<double> y);
std::vector<double> gemv(const QuantizedLayer& layer, unsigned b, std::span<const double> x);
// dx += W_b^T dy
void gemv_t_acc(const QuantizedLayer& layer, unsigned b, std::span<const double> dy,
                std::span<double> dx);

class BitPlaneStore {
 public:
  BitPlaneStore() = default;
  BitPlaneStore(unsigned n_bits, unsigned b_min, std::uint64_t model_hash,
                std::map<LayerId, QuantizedLayer> layers);

  // Quantizes every linear layer of the model.
  static BitPlaneStore build(const ModelWeights& weights, unsigned n_bits, unsigned b_min);

  unsigned n_bits() const { return n_bits_; }
  unsigned b_min() const { return b_min_; }
  std::uint64_t model_hash() const { return model_hash_; }
  const std::map<LayerId, QuantizedLayer>& layers() const { return layers_; }
  const QuantizedLayer& layer(LayerId id) const;

  // Checks the store covers exactly the linear layers of `config`.
  void check_covers(const ModelConfig& config) const;

  std::vector<std::uint8_t> serialize() const;
  static BitPlaneStore deserialize(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& path) const;
  static BitPlaneStore load(const std::filesystem::path& path);

  // FNV-1a of the serialized form.
  std::uint64_t content_hash() const;

 private:
  unsigned n_bits_ = 0;
  unsigned b_min_ = 0;
  std::uint64_t model_hash_ = 0;
  std::map<LayerId, QuantizedLayer> layers_;
};

// Lazily materialized W_h - W_l per (layer, l, h). Safe for concurrent readers.
class DeltaCache {
 public:
  explicit DeltaCache(const BitPlaneStore& store) : store_(&store) {}
  const Matrix& get(LayerId id, unsigned l, unsigned h);

 private:
  const BitPlaneStore* store_;
  std::mutex mu_;
  std::map<std::tuple<LayerId, unsigned, unsigned>, Matrix> cache_;
};

// Every linear layer served from the store at a fixed per-layer bitwidth.
class QuantizedProvider final : public WeightProvider {
 public:
  QuantizedProvider(const BitPlaneStore& store, std::map<LayerId, unsigned> bits);
  // All layers at the same bitwidth.
  QuantizedProvider(const BitPlaneStore& store, unsigned bits);

  void linear(LayerId id, std::size_t pos, std::span<const double> x, std::span<double> y) override;
  void linear_backward(LayerId id, std::size_t pos, std::span<const double> dy,
                       std::span<double> dx) override;
  unsigned bits(LayerId id) const { return bits_.at(id); }

 private:
  const BitPlaneStore* store_;
  std::map<LayerId, unsigned> bits_;
};

// Dense provider over arbitrary per-layer matrices.
class MatrixProvider final : public WeightProvider {
 public:
  explicit MatrixProvider(std::map<LayerId, Matrix> matrices) : matrices_(std::move(matrices)) {}
  void linear(LayerId id, std::size_t pos, std::span<const double> x, std::span<double> y) override;
  void linear_backward(LayerId id, std::size_t pos, std::span<const double> dy,
                       std::span<double> dx) override;

 private:
  std::map<LayerId, Matrix> matrices_;
};

}  // namespace dpllm
