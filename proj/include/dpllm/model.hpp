#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dpllm/common.hpp"

namespace dpllm {

struct ModelConfig {
  std::size_t n_blocks = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t vocab = 256;
  std::size_t seq_cap = 256;
  double norm_eps = 1e-5;

  // Throws ConfigError on violated invariants.
  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }

  bool operator==(const ModelConfig&) const = default;
};

enum class LayerKind : std::uint8_t { Q, K, V, O, Up, Gate, Down };

inline constexpr std::array<LayerKind, 7> kLayerKinds = {
    LayerKind::Q,  LayerKind::K,    LayerKind::V,   LayerKind::O,
    LayerKind::Up, LayerKind::Gate, LayerKind::Down,
};
inline constexpr std::size_t kKindsPerBlock = kLayerKinds.size();

std::string_view kind_name(LayerKind kind);
LayerKind parse_kind(std::string_view name);

// Q/K/V/Up read the residual stream directly (through the block's pre-norm).
bool is_residual_fed(LayerKind kind);

struct LayerId {
  std::uint32_t block = 0;
  LayerKind kind = LayerKind::Q;

  auto operator<=>(const LayerId&) const = default;

  // "blocks.<b>.<kind>"
  std::string name() const;
  static LayerId parse(std::string_view name);
};

// Canonical order: block-major, then kLayerKinds order.
std::vector<LayerId> linear_layers(const ModelConfig& config);
std::size_t layer_index(LayerId id);

struct LayerShape {
  std::size_t rows = 0;
  std::size_t cols = 0;
};
LayerShape layer_shape(const ModelConfig& config, LayerKind kind);

// Which pre-norm a residual vector is about to pass through.
enum class NormSite : std::uint8_t { Attention, Mlp };

struct BlockWeights {
  std::vector<double> attn_norm;
  std::vector<double> mlp_norm;
  std::array<Matrix, kKindsPerBlock> linear;
};

struct ModelWeights {
  ModelConfig config;
  Matrix embedding;  // vocab x d_model
  std::vector<BlockWeights> blocks;
  std::vector<double> final_norm;
  Matrix lm_head;  // vocab x d_model

  const Matrix& linear(LayerId id) const;
  Matrix& linear(LayerId id);
  const std::vector<double>& norm_gain(std::uint32_t block, NormSite site) const;
  std::uint64_t checksum() const;
};

ModelWeights init_model(std::uint64_t seed, const ModelConfig& config);

// Writes `manifest_path` (JSON) and a sibling flat FP32 little-endian tensor file.
void export_weights(const ModelWeights& weights, const std::filesystem::path& manifest_path);
ModelWeights load_weights(const std::filesystem::path& manifest_path);

// x / rms(x) * gain
void rms_normalize(std::span<const double> x, std::span<const double> gain, double eps,
                   std::span<double> out);

// Source of every linear-layer product during a forward pass. Quantized,
// interpolated and dynamic-precision weights all plug in here.
class WeightProvider {
 public:
  virtual ~WeightProvider() = default;

  // y = W x for `id` at sequence position `pos`.
  virtual void linear(LayerId id, std::size_t pos, std::span<const double> x,
                      std::span<double> y) = 0;

  // dx += W^T dy, with W the matrix used at `pos` in the forward pass.
  virtual void linear_backward(LayerId id, std::size_t pos, std::span<const double> dy,
                               std::span<double> dx);

  // Residual vector about to enter `block`'s pre-norm at `site`.
  virtual void observe_residual(std::uint32_t block, NormSite site, std::size_t pos,
                                std::span<const double> residual);
};

// Full-precision weights straight from ModelWeights.
class DenseProvider final : public WeightProvider {
 public:
  explicit DenseProvider(const ModelWeights& weights) : weights_(&weights) {}
  void linear(LayerId id, std::size_t pos, std::span<const double> x, std::span<double> y) override;
  void linear_backward(LayerId id, std::size_t pos, std::span<const double> dy,
                       std::span<double> dx) override;

 private:
  const ModelWeights* weights_;
};

struct LossResult {
  double loss = 0.0;        // mean next-token cross-entropy, nats
  double perplexity = 0.0;  // exp(loss)
  std::size_t predictions = 0;
};

// Intermediates of one forward pass, kept for backward. Opaque outside model.cpp.
struct ForwardTape;
struct TapeDeleter {
  void operator()(ForwardTape* tape) const;
};
using TapePtr = std::unique_ptr<ForwardTape, TapeDeleter>;

const Matrix& tape_logits(const ForwardTape& tape);
std::span<const Token> tape_tokens(const ForwardTape& tape);

struct GradientBundle {
  // dL/dW for every linear layer. Embeddings, norms and the LM head are frozen
  // and never appear here.
  std::map<LayerId, Matrix> weight_grads;
  // dL/dy per position (positions x rows).
  std::map<LayerId, Matrix> output_grads;
  // Taped layer inputs per position (positions x cols).
  std::map<LayerId, Matrix> inputs;
  double loss = 0.0;

  const Matrix* weight_grad(std::string_view tensor_name) const;
};

struct BackwardOptions {
  bool weight_grads = true;
};

class Transformer {
 public:
  explicit Transformer(const ModelWeights& weights);

  const ModelConfig& config() const { return weights_->config; }
  const ModelWeights& weights() const { return *weights_; }

  // Logits per position (positions x vocab).
  Matrix forward(std::span<const Token> tokens, WeightProvider& provider) const;

  // -log p(tokens[t+1] | tokens[..t]) for t in [0, n-1).
  std::vector<double> token_losses(std::span<const Token> tokens, WeightProvider& provider) const;
  LossResult teacher_forced_loss(std::span<const Token> tokens, WeightProvider& provider) const;

  TapePtr forward_tape(std::span<const Token> tokens, WeightProvider& provider) const;
  GradientBundle backward(const ForwardTape& tape, WeightProvider& provider,
                          const BackwardOptions& options = {}) const;

  // Incremental batch-1 decoding with a KV cache.
  class Session {
   public:
    Session(const Transformer& model, WeightProvider& provider, ForwardTape* tape = nullptr);
    ~Session();
    Session(Session&&) noexcept;
    Session& operator=(Session&&) = delete;

    std::span<const double> step(Token token);
    std::size_t position() const;

   private:
    struct State;
    std::unique_ptr<State> state_;
  };

  Session start_session(WeightProvider& provider) const { return Session(*this, provider); }

 private:
  const ModelWeights* weights_;
};

double mean_loss_from_token_losses(std::span<const double> losses);

// -log softmax(logits)[target]
double cross_entropy(std::span<const double> logits, Token target);

}  // namespace dpllm
