#pragma once

// Dynamic-precision execution: per-step, per-layer choice between W_l and W_h
// driven by an error estimate and a threshold.

#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "dpllm/estimator.hpp"
#include "dpllm/model.hpp"
#include "dpllm/quant.hpp"

namespace dpllm {

struct PlanLayer {
  unsigned b_max = 0;
  double p = 0.0;
  unsigned l = 0;
  unsigned h = 0;
  double threshold = kInf;  // +inf: always l, -inf: always h
  double r = 1.0;
  std::optional<ErrorEstimator> estimator;  // absent on static layers

  bool is_static() const { return std::isinf(threshold); }
  unsigned static_bit() const { return threshold > 0 ? l : h; }
};

struct PlanProvenance {
  std::uint64_t model_hash = 0;
  std::uint64_t store_hash = 0;
  std::uint64_t profile_hash = 0;
  std::uint64_t corpus_hash = 0;
};

struct PrecisionPlan {
  std::string method;  // "dp", "llm_mq", "hawq_v2"
  double target_bits = 0.0;
  double budget_bits = 0.0;
  unsigned n_bits = 0;
  unsigned b_min = 0;
  std::string estimator_mode = "exact";
  bool async = false;
  AsyncMode async_mode = AsyncMode::PreviousToken;
  bool prime_from_prefill = true;
  std::map<LayerId, PlanLayer> layers;
  std::map<LayerId, std::uint64_t> params;
  PlanProvenance provenance;
  std::map<std::string, double> fit;  // hyperparameters and fit summary
  std::vector<std::string> warnings;

  // Throws ConfigError on violated invariants.
  void validate() const;
  // Expected effective bits sum p M / sum M.
  double expected_bits() const;
  std::uint64_t content_hash() const;
  // Throws ProvenanceError when the plan was built for other artifacts.
  void check_against(const ModelWeights& weights, const BitPlaneStore& store) const;
};

// Static plan: bit b is encoded as (l = b, h = b + 1, +inf), or at the top of
// the range as (l = b - 1, h = b, -inf), so both sentinels see use.
PrecisionPlan static_plan(const std::map<LayerId, unsigned>& bits, const BitPlaneStore& store,
                          std::string method, double target_bits);

// Per-(layer, l, h) threshold inputs and estimators, reusable across targets
// as long as the B_max assignment and calibration set stay the same.
struct EstimatorCache {
  struct Entry {
    std::vector<double> sorted_errors;
    EstimatorBuild build;
  };
  std::map<std::tuple<LayerId, unsigned, unsigned>, Entry> entries;
  std::size_t hits = 0;
};

struct PlanBuildOptions {
  EstimatorConfig estimator;
  AsyncMode async_mode = AsyncMode::PreviousToken;
  bool prime_from_prefill = true;
  std::size_t max_inputs = 512;
};

// Compiles fitted average precisions into a plan: integer p becomes a static
// layer, fractional p gets a threshold from the calibration error quantile
// and an estimator.
PrecisionPlan build_dynamic_plan(const ModelWeights& weights, const BitPlaneStore& store,
                                 const std::map<LayerId, unsigned>& max_bits,
                                 const std::map<LayerId, double>& p,
                                 std::span<const std::vector<Token>> calib,
                                 const PlanBuildOptions& options, double target_bits,
                                 EstimatorCache* cache = nullptr);

std::string plan_to_json(const PrecisionPlan& plan);
PrecisionPlan plan_from_json(std::string_view text);
void save_plan(const PrecisionPlan& plan, const std::filesystem::path& path);
PrecisionPlan load_plan(const std::filesystem::path& path);

// Selection rule: h if estimate > threshold, else l.
unsigned select_precision(const PlanLayer& layer, double estimate);

struct StepRecord {
  std::size_t position = 0;
  std::vector<std::uint8_t> bits;  // per layer, in trace layer order
  std::vector<double> estimates;   // 0 where no estimator ran
  double effective_bits = 0.0;
  std::size_t estimator_ops = 0;
};

struct LayerAudit {
  std::size_t steps = 0;
  std::size_t high = 0;          // steps served with W_h
  double exact_sum = 0.0;        // sum of ||(W_h - W_l) x|| over all steps
  double incurred = 0.0;         // same sum over steps served with W_l
  double reference_error = 0.0;  // sum of ||(W_n - W_selected) x||
  std::size_t fallbacks = 0;     // async source missing, immediate input used
  std::vector<double> errors;    // per-step exact errors, when recorded
};

struct DecodeTrace {
  std::vector<LayerId> layers;
  std::vector<StepRecord> steps;
  std::map<LayerId, LayerAudit> audit;  // only when auditing

  double mean_effective_bits() const;
  std::size_t total_estimator_ops() const;
};

struct RuntimeOptions {
  bool audit = false;          // compute exact errors alongside selection
  bool keep_step_errors = false;
};

// Weight provider that applies the plan. In prefill mode every layer runs at B_max.
class DynamicProvider final : public WeightProvider {
 public:
  DynamicProvider(const PrecisionPlan& plan, const ModelWeights& weights,
                  const BitPlaneStore& store, const RuntimeOptions& options = {});

  void set_prefill(bool on) { prefill_ = on; }
  void reset_residuals() { tracker_.clear(); }
  DecodeTrace take_trace();

  void linear(LayerId id, std::size_t pos, std::span<const double> x, std::span<double> y) override;
  void observe_residual(std::uint32_t block, NormSite site, std::size_t pos,
                        std::span<const double> residual) override;

 private:
  StepRecord& step_for(std::size_t pos);
  void close_step();

  const PrecisionPlan* plan_;
  const BitPlaneStore* store_;
  RuntimeOptions options_;
  ResidualTracker tracker_;
  DeltaCache deltas_;
  std::map<LayerId, std::size_t> index_;
  std::vector<std::uint64_t> m_;
  bool prefill_ = false;
  DecodeTrace trace_;
  bool open_ = false;
};

struct DecodeResult {
  std::vector<Token> tokens;                // generated only
  std::vector<std::vector<double>> logits;  // one row per generated token
  DecodeTrace trace;
};

// The prompt minus its last token is prefilled at B_max. Each generated token
// then costs one dynamic step: the last prompt token first, then every
// generated token except the final one. Greedy argmax throughout. With
// n_new = 0 the whole prompt is prefilled and the trace is empty.
DecodeResult decode(const PrecisionPlan& plan, const ModelWeights& weights,
                    const BitPlaneStore& store, std::span<const Token> prompt, std::size_t n_new,
                    const RuntimeOptions& options = {});
// Same schedule with one provider for every step; no trace.
DecodeResult decode_with_provider(const ModelWeights& weights, WeightProvider& provider,
                                  std::span<const Token> prompt, std::size_t n_new);

struct EvalResult {
  double loss = 0.0;
  double perplexity = 0.0;
  std::size_t predictions = 0;
  std::vector<double> token_losses;
  std::vector<DecodeTrace> traces;  // one per query
};

// Teacher-forced evaluation; every position is a dynamic step (no prefill).
EvalResult eval_dynamic(const PrecisionPlan& plan, const ModelWeights& weights,
                        const BitPlaneStore& store, std::span<const std::vector<Token>> queries,
                        const RuntimeOptions& options = {});
// Same loop with a plain provider (full precision or static bits).
EvalResult eval_with_provider(const ModelWeights& weights, WeightProvider& provider,
                              std::span<const std::vector<Token>> queries);

struct QosReport {
  double target = 0.0;
  double mean = 0.0;
  double p90 = 0.0;
  double p99 = 0.0;
  double p90_delta_pct = 0.0;
  double p99_delta_pct = 0.0;
  std::size_t queries = 0;
};

// Nearest-rank percentiles of per-query mean effective bits.
QosReport qos_stats(std::span<const double> per_query_bits, double target = 0.0);
QosReport qos_stats(std::span<const DecodeTrace> traces, double target = 0.0);

void write_trace_csv(const DecodeTrace& trace, const std::filesystem::path& path);
std::string trace_summary_json(const DecodeTrace& trace);

}  // namespace dpllm
