#include "dpllm/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "dpllm/kernels.hpp"

namespace dpllm {

namespace {

void check_bit_range(unsigned n_bits, unsigned b_min) {
  if (b_min < kMinSupportedBits || b_min > n_bits || n_bits > kMaxSupportedBits) {
    throw ConfigError("quantization bits must satisfy 2 <= b_min <= n_bits <= 8 (got b_min=" +
                      std::to_string(b_min) + ", n_bits=" + std::to_string(n_bits) + ")");
  }
}

float float_at_or_below(double v) {
  float f = static_cast<float>(v);
  if (static_cast<double>(f) > v) {
    f = std::nextafter(f, -std::numeric_limits<float>::infinity());
  }
  return f;
}

float float_at_or_above(double v) {
  float f = static_cast<float>(v);
  if (static_cast<double>(f) < v) {
    f = std::nextafter(f, std::numeric_limits<float>::infinity());
  }
  return f;
}

}  // namespace

QuantizedLayer::QuantizedLayer(std::size_t rows, std::size_t cols, unsigned n_bits, unsigned b_min,
                               std::vector<std::uint8_t> codes, std::vector<float> lo,
                               std::vector<float> hi)
    : rows_(rows),
      cols_(cols),
      n_bits_(n_bits),
      b_min_(b_min),
      codes_(std::move(codes)),
      lo_(std::move(lo)),
      hi_(std::move(hi)) {
  check_bit_range(n_bits_, b_min_);
  if (codes_.size() != rows_ * cols_ || lo_.size() != rows_ || hi_.size() != rows_) {
    throw ShapeError("quantized layer parts do not match shape " + std::to_string(rows_) + "x" +
                     std::to_string(cols_));
  }
  const unsigned limit = 1u << n_bits_;
  for (std::uint8_t c : codes_) {
    if (c >= limit) {
      throw ShapeError("quantized code " + std::to_string(c) + " exceeds " +
                       std::to_string(n_bits_) + "-bit range");
    }
  }
  lo_d_.resize(rows_);
  steps_.assign(n_bits_ + 1, {});
  for (std::size_t r = 0; r < rows_; ++r) {
    if (!(lo_[r] <= hi_[r])) {
      throw ShapeError("channel " + std::to_string(r) + " has lo > hi");
    }
    lo_d_[r] = static_cast<double>(lo_[r]);
  }
  for (unsigned b = b_min_; b <= n_bits_; ++b) {
    auto& s = steps_[b];
    s.resize(rows_);
    const double denom = std::ldexp(1.0, static_cast<int>(b));
    for (std::size_t r = 0; r < rows_; ++r) {
      s[r] = (static_cast<double>(hi_[r]) - static_cast<double>(lo_[r])) / denom;
    }
  }
}

void QuantizedLayer::check_bits(unsigned b) const {
  if (b < b_min_ || b > n_bits_) {
    throw ConfigError("bitwidth " + std::to_string(b) + " outside [" + std::to_string(b_min_) +
                      ", " + std::to_string(n_bits_) + "]");
  }
}

std::span<const double> QuantizedLayer::step(unsigned b) const {
  check_bits(b);
  return steps_[b];
}

std::uint64_t QuantizedLayer::storage_bits() const {
  return static_cast<std::uint64_t>(n_bits_) * rows_ * cols_ + 2ULL * 32ULL * rows_;
}

bool QuantizedLayer::operator==(const QuantizedLayer& o) const {
  return rows_ == o.rows_ && cols_ == o.cols_ && n_bits_ == o.n_bits_ && b_min_ == o.b_min_ &&
         codes_ == o.codes_ && lo_ == o.lo_ && hi_ == o.hi_;
}

QuantizedLayer quantize_layer(const Matrix& w, unsigned n_bits, unsigned b_min) {
  check_bit_range(n_bits, b_min);
  const std::size_t rows = w.rows();
  const std::size_t cols = w.cols();
  std::vector<std::uint8_t> codes(rows * cols, 0);
  std::vector<float> lo(rows), hi(rows);
  const double levels = std::ldexp(1.0, static_cast<int>(n_bits));
  const double max_code = levels - 1.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = w.row(r);
    double mn = std::numeric_limits<double>::infinity();
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : row) {
      if (!std::isfinite(v)) {
        throw Error("non-finite weight in row " + std::to_string(r));
      }
      mn = std::min(mn, v);
      mx = std::max(mx, v);
    }
    if (cols == 0) {
      mn = mx = 0.0;
    }
    lo[r] = float_at_or_below(mn);
    hi[r] = float_at_or_above(mx);
    const double step = (static_cast<double>(hi[r]) - static_cast<double>(lo[r])) / levels;
    if (step == 0.0) {
      continue;  // constant channel: all-zero codes reconstruct lo exactly
    }
    for (std::size_t c = 0; c < cols; ++c) {
      const double q = std::floor((row[c] - static_cast<double>(lo[r])) / step);
      codes[r * cols + c] = static_cast<std::uint8_t>(std::clamp(q, 0.0, max_code));
    }
  }
  return QuantizedLayer(rows, cols, n_bits, b_min, std::move(codes), std::move(lo), std::move(hi));
}

Matrix dequantize(const QuantizedLayer& layer, unsigned b) {
  const auto step = layer.step(b);
  const auto lo = layer.lo_values();
  const unsigned shift = layer.n_bits() - b;
  const auto codes = layer.codes();
  Matrix out(layer.rows(), layer.cols());
  for (std::size_t r = 0; r < layer.rows(); ++r) {
    for (std::size_t c = 0; c < layer.cols(); ++c) {
      const unsigned q = codes[r * layer.cols() + c] >> shift;
      out(r, c) = lo[r] + (static_cast<double>(q) + 0.5) * step[r];
    }
  }
  return out;
}

Matrix delta_weights(const QuantizedLayer& layer, unsigned l, unsigned h) {
  if (l >= h) {
    throw ConfigError("delta weights need l < h (got l=" + std::to_string(l) +
                      ", h=" + std::to_string(h) + ")");
  }
  Matrix wh = dequantize(layer, h);
  const Matrix wl = dequantize(layer, l);
  for (std::size_t i = 0; i < wh.size(); ++i) {
    wh.data()[i] -= wl.data()[i];
  }
  return wh;
}

void gemv(const QuantizedLayer& layer, unsigned b, std::span<const double> x, std::span<double> y) {
  if (x.size() != layer.cols() || y.size() != layer.rows()) {
    throw ShapeError("gemv dimension mismatch: layer " + std::to_string(layer.rows()) + "x" +
                     std::to_string(layer.cols()) + ", x " + std::to_string(x.size()) + ", y " +
                     std::to_string(y.size()));
  }
  const auto step = layer.step(b);
  kernels::active().gemv_codes(layer.codes().data(), layer.rows(), layer.cols(), layer.n_bits() - b,
                               layer.lo_values().data(), step.data(), x.data(), y.data());
}

std::vector<double> gemv(const QuantizedLayer& layer, unsigned b, std::span<const double> x) {
  std::vector<double> y(layer.rows());
  gemv(layer, b, x, y);
  return y;
}

void gemv_t_acc(const QuantizedLayer& layer, unsigned b, std::span<const double> dy,
                std::span<double> dx) {
  if (dy.size() != layer.rows() || dx.size() != layer.cols()) {
    throw ShapeError("transposed gemv dimension mismatch");
  }
  const auto step = layer.step(b);
  kernels::active().gemv_t_codes_acc(layer.codes().data(), layer.rows(), layer.cols(),
                                     layer.n_bits() - b, layer.lo_values().data(), step.data(),
                                     dy.data(), dx.data());
}

// ---------------------------------------------------------------------------

BitPlaneStore::BitPlaneStore(unsigned n_bits, unsigned b_min, std::uint64_t model_hash,
                             std::map<LayerId, QuantizedLayer> layers)
    : n_bits_(n_bits), b_min_(b_min), model_hash_(model_hash), layers_(std::move(layers)) {
  check_bit_range(n_bits_, b_min_);
  for (const auto& [id, layer] : layers_) {
    if (layer.n_bits() != n_bits_ || layer.b_min() != b_min_) {
      throw ShapeError("layer " + id.name() + " bit range differs from store");
    }
  }
}

BitPlaneStore BitPlaneStore::build(const ModelWeights& weights, unsigned n_bits, unsigned b_min) {
  std::map<LayerId, QuantizedLayer> layers;
  for (LayerId id : linear_layers(weights.config)) {
    layers.emplace(id, quantize_layer(weights.linear(id), n_bits, b_min));
  }
  return BitPlaneStore(n_bits, b_min, weights.checksum(), std::move(layers));
}

const QuantizedLayer& BitPlaneStore::layer(LayerId id) const {
  const auto it = layers_.find(id);
  if (it == layers_.end()) {
    throw ShapeError("store has no layer " + id.name());
  }
  return it->second;
}

void BitPlaneStore::check_covers(const ModelConfig& config) const {
  const auto ids = linear_layers(config);
  if (ids.size() != layers_.size()) {
    throw ShapeError("store covers " + std::to_string(layers_.size()) + " layers, model has " +
                     std::to_string(ids.size()));
  }
  for (LayerId id : ids) {
    const auto& l = layer(id);
    const auto shape = layer_shape(config, id.kind);
    if (l.rows() != shape.rows || l.cols() != shape.cols) {
      throw ShapeError("store layer " + id.name() + " shape does not match model");
    }
  }
}

std::uint64_t BitPlaneStore::content_hash() const { return hash_bytes(serialize()); }

// ---------------------------------------------------------------------------

const Matrix& DeltaCache::get(LayerId id, unsigned l, unsigned h) {
  std::lock_guard lock(mu_);
  const auto key = std::make_tuple(id, l, h);
  auto it = cache_.find(key);
  if (it == cache_.end()) {
    it = cache_.emplace(key, delta_weights(store_->layer(id), l, h)).first;
  }
  return it->second;
}

QuantizedProvider::QuantizedProvider(const BitPlaneStore& store, std::map<LayerId, unsigned> bits)
    : store_(&store), bits_(std::move(bits)) {
  for (const auto& [id, b] : bits_) {
    store.layer(id).check_bits(b);
  }
}

QuantizedProvider::QuantizedProvider(const BitPlaneStore& store, unsigned bits) : store_(&store) {
  for (const auto& [id, layer] : store.layers()) {
    layer.check_bits(bits);
    bits_[id] = bits;
  }
}

void QuantizedProvider::linear(LayerId id, std::size_t, std::span<const double> x,
                               std::span<double> y) {
  gemv(store_->layer(id), bits_.at(id), x, y);
}

void QuantizedProvider::linear_backward(LayerId id, std::size_t, std::span<const double> dy,
                                        std::span<double> dx) {
  gemv_t_acc(store_->layer(id), bits_.at(id), dy, dx);
}

void MatrixProvider::linear(LayerId id, std::size_t, std::span<const double> x,
                            std::span<double> y) {
  const Matrix& w = matrices_.at(id);
  kernels::active().gemv(w.data(), w.rows(), w.cols(), x.data(), y.data());
}

void MatrixProvider::linear_backward(LayerId id, std::size_t, std::span<const double> dy,
                                     std::span<double> dx) {
  const Matrix& w = matrices_.at(id);
  kernels::active().gemv_t_acc(w.data(), w.rows(), w.cols(), dy.data(), dx.data());
}

}  // namespace dpllm
