#pragma once

// End-to-end commands: init -> quantize -> profile -> plan -> eval / decode,
// plus the method x target report. The CLI is a thin shell over these.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dpllm/allocator.hpp"
#include "dpllm/fitter.hpp"
#include "dpllm/runtime.hpp"
#include "dpllm/sensitivity.hpp"

namespace dpllm {

namespace fs = std::filesystem;

struct RunConfig {
  // Relative paths are resolved against base_dir.
  fs::path base_dir = ".";
  fs::path work_dir = "run";
  fs::path model_manifest;  // default <work>/model.json
  fs::path corpus;
  fs::path calib_corpus;  // default: head of `corpus`
  fs::path eval_corpus;   // default: rest of `corpus`
  fs::path store;         // default <work>/store.bin
  fs::path profile;       // default <work>/profile.bin
  fs::path plan_dir;      // default <work>/plans
  fs::path report_dir;    // default <work>/reports

  ModelConfig model;
  std::uint64_t model_seed = 1;

  unsigned n_bits = 6;
  unsigned b_min = 3;
  double budget_bits = 5.0;
  std::vector<double> targets{3.25, 3.5, 4.0, 4.5};
  std::vector<std::string> methods{"dp", "llm_mq", "hawq_v2"};

  std::size_t calib_samples = 64;
  std::size_t calib_len = 64;
  std::size_t eval_len = 64;

  FitHyper fit;
  double fit_gate = 0.05;     // |achieved - target| allowed after fitting
  double alpha_retry = 10.0;  // second attempt when the gate is missed; 0 disables

  EstimatorConfig estimator;
  AsyncMode async_mode = AsyncMode::PreviousToken;
  bool prime_from_prefill = true;
  std::size_t max_inputs = 512;

  std::string prompt = "The river ";
  std::size_t n_new = 32;

  fs::path resolve(const fs::path& p) const;
  fs::path model_path() const;
  fs::path store_path() const;
  fs::path profile_path() const;
  fs::path plans_path() const;
  fs::path reports_path() const;

  // Throws ConfigError.
  void validate() const;
};

RunConfig default_run_config();
// Unknown keys are a ConfigError; missing keys keep their defaults.
RunConfig run_config_from_json(std::string_view text, const fs::path& base_dir);
RunConfig load_run_config(const fs::path& path);
std::string run_config_to_json(const RunConfig& cfg);

struct Corpora {
  std::vector<std::vector<Token>> calib;
  std::vector<std::vector<Token>> eval;
  std::uint64_t calib_hash = 0;
  std::uint64_t eval_hash = 0;
};

// Byte-level split into calib_len samples and eval_len queries.
Corpora load_corpora(const RunConfig& cfg);

fs::path cmd_init(const RunConfig& cfg);
std::uint64_t cmd_quantize(const RunConfig& cfg);
SensitivityProfile cmd_profile(const RunConfig& cfg);

struct PlanOutcome {
  PrecisionPlan plan;
  fs::path path;
  std::optional<FitResult> fit;
  double alpha_used = 0.0;
};

// Shared state across plans of one run: the B_max assignment and estimators.
struct PlanContext {
  std::optional<BitAssignment> max_bits;
  EstimatorCache cache;
};

PlanOutcome cmd_plan(const RunConfig& cfg, const std::string& method, double target,
                     PlanContext* ctx = nullptr);

// Same thresholds, every dynamic layer on an exact estimator over its immediate input.
PrecisionPlan with_exact_estimators(const PrecisionPlan& plan);

struct VariantMetrics {
  double perplexity = 0.0;
  double loss = 0.0;
  double effective_bits = 0.0;
  double incurred_error = 0.0;
  double matched_static_error = 0.0;  // (1 - W_h rate) * exact error sum, per layer
  double reference_error = 0.0;       // sum ||(W_n - W_selected) x||
  double ops_per_token = 0.0;
  std::size_t h_steps = 0;
  std::size_t steps = 0;
  QosReport qos;
};

struct ReportCell {
  std::string method;
  double target = 0.0;
  std::string plan_hash;
  std::string exact_plan_hash;
  double expected_bits = 0.0;
  VariantMetrics approx;  // the plan as built
  VariantMetrics exact;   // same thresholds, exact estimators
  std::vector<std::string> warnings;
};

struct Report {
  double fp_perplexity = 0.0;
  std::size_t eval_queries = 0;
  std::size_t eval_predictions = 0;
  std::vector<ReportCell> cells;
  std::vector<std::string> perplexity_order;  // "method@target" ascending per target
};

VariantMetrics evaluate_plan(const PrecisionPlan& plan, const ModelWeights& weights,
                             const BitPlaneStore& store, std::span<const std::vector<Token>> queries);

// Evaluates plan files against the configured store and eval corpus.
Report cmd_eval(const RunConfig& cfg, const std::vector<fs::path>& plans);

struct DecodeOutcome {
  std::string text;
  DecodeResult result;
};
DecodeOutcome cmd_decode(const RunConfig& cfg, const fs::path& plan, const std::string& prompt,
                         std::size_t n_new);

// Full chain for every configured method and target, then the report.
Report cmd_report(const RunConfig& cfg);

void write_report(const Report& report, const fs::path& dir);
std::string report_to_json(const Report& report);

// Process exit code for an exception escaping a command.
int exit_code_for(const std::exception& e);

}  // namespace dpllm
