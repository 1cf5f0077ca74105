#pragma once

// Static per-layer, per-bitwidth loss sensitivity from calibration gradients.

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "dpllm/model.hpp"
#include "dpllm/quant.hpp"

namespace dpllm {

enum class ScoreKind { SecondOrder, FirstOrder, Hawq };

std::string_view score_kind_name(ScoreKind kind);

struct SensitivityProfile {
  std::map<LayerId, Matrix> fisher_diag;  // sum of squared gradients
  std::map<LayerId, Matrix> grad_sum;     // sum of gradients
  // score tables keyed by layer, then bitwidth
  std::map<LayerId, std::map<unsigned, double>> second_order;
  std::map<LayerId, std::map<unsigned, double>> first_order;
  std::map<LayerId, std::map<unsigned, double>> hawq;
  std::size_t n_samples = 0;

  std::uint64_t model_hash = 0;
  std::uint64_t store_hash = 0;
  std::uint64_t corpus_hash = 0;

  const std::map<LayerId, std::map<unsigned, double>>& table(ScoreKind kind) const;
  double score(ScoreKind kind, LayerId id, unsigned b) const;
};

// Deterministic reduction of per-sample gradients. Pairwise (binary counter)
// summation keeps the result insensitive to sample order.
class GradientAccumulator {
 public:
  void add(const std::map<LayerId, Matrix>& grads);
  std::size_t count() const { return count_; }
  // Returns (fisher, grad_sum). Throws Error when nothing was added.
  std::pair<std::map<LayerId, Matrix>, std::map<LayerId, Matrix>> finish() const;

 private:
  struct Partial {
    std::map<LayerId, Matrix> sq;
    std::map<LayerId, Matrix> sum;
  };
  static void merge_into(Partial& dst, const Partial& src);
  std::vector<std::optional<Partial>> levels_;
  std::size_t count_ = 0;
};

// 1/2 sum F (W - W_b)^2
double second_order_score(const Matrix& fisher, const Matrix& w, const QuantizedLayer& layer,
                          unsigned b);
// |<grad_sum, W - W_b>|
double first_order_score(const Matrix& grad_sum, const Matrix& w, const QuantizedLayer& layer,
                         unsigned b);
// mean(F) * ||W - W_b||^2, trace averaged per parameter
double hawq_score(const Matrix& fisher, const Matrix& w, const QuantizedLayer& layer, unsigned b);

// Fills all three score tables for every layer and every b in [b_min, n_bits].
void compute_scores(SensitivityProfile& profile, const ModelWeights& weights,
                    const BitPlaneStore& store);

// Gradients of each sample's mean next-token loss at full precision.
SensitivityProfile profile(const ModelWeights& weights, const BitPlaneStore& store,
                           std::span<const std::vector<Token>> calib,
                           std::uint64_t corpus_hash = 0);

void save_profile(const SensitivityProfile& profile, const std::filesystem::path& path);
SensitivityProfile load_profile(const std::filesystem::path& path);

}  // namespace dpllm
