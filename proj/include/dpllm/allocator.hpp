#pragma once

// Per-layer bitwidth selection under an average-bits memory budget.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dpllm/model.hpp"
#include "dpllm/sensitivity.hpp"

namespace dpllm {

inline constexpr double kAccountingEps = 1e-9;

struct BudgetProblem {
  std::vector<LayerId> layers;
  std::map<LayerId, std::uint64_t> params;  // M_i
  std::vector<unsigned> bits;               // available bitwidths
  std::map<LayerId, std::map<unsigned, double>> scores;
  double budget_bits = 0.0;
  std::optional<double> lower_bound_bits;

  // Throws ConfigError on malformed input.
  void validate() const;
};

struct BitAssignment {
  std::map<LayerId, unsigned> bits;
  double achieved_avg = 0.0;
  double objective = 0.0;
  // Set by the baseline sweeps when the accounting window was not reached.
  bool warning = false;
  std::string note;
  std::optional<double> lower_bound_used;
};

// sum b M / sum M, accumulated in layer order.
double average_bits(const std::map<LayerId, unsigned>& bits,
                    const std::map<LayerId, std::uint64_t>& params);

// Exact optimum of sum score subject to the budget (and lower bound, if any).
// Among optimal assignments the lexicographically smallest bit vector in
// LayerId order is returned. Throws InfeasibleError.
BitAssignment solve(const BudgetProblem& problem);

// Prefix dynamic program over integer budget units. Built once per upper
// bound; any number of lower bounds can then be queried cheaply.
class BudgetSolver {
 public:
  explicit BudgetSolver(const BudgetProblem& problem);
  BitAssignment best(std::optional<double> lower_bound_bits) const;

 private:
  std::vector<LayerId> layers_;
  std::vector<unsigned> bits_;
  std::map<LayerId, std::uint64_t> params_;
  std::uint64_t unit_ = 1;
  std::uint64_t total_params_ = 0;
  // Final row: objective and bit-index vector per exact unit count, if reachable.
  std::vector<std::optional<std::pair<double, std::vector<std::uint8_t>>>> final_;
  BitAssignment make(const std::vector<std::uint8_t>& choice, double objective) const;
  std::int64_t units_at_most(double avg_bits) const;
  std::int64_t units_at_least(double avg_bits) const;
};

// Problem over every store layer with scores of `kind` from the profile.
BudgetProblem make_problem(const SensitivityProfile& profile, const BitPlaneStore& store,
                           ScoreKind kind, double budget_bits, std::vector<unsigned> bits = {});

// Phase-1 maximum precision per layer under a memory budget.
BitAssignment max_precision_plan(const SensitivityProfile& profile, const BitPlaneStore& store,
                                 double budget_bits);

// Static baseline: raise the lower bound in 0.01-bit steps until the achieved
// average is within 0.005 bits of the target. Best effort plus warning otherwise.
BitAssignment static_plan_sweep(const BudgetProblem& problem, double target_bits);
BitAssignment static_plan_llm_mq(const SensitivityProfile& profile, const BitPlaneStore& store,
                                 double target_bits);
BitAssignment static_plan_hawq(const SensitivityProfile& profile, const BitPlaneStore& store,
                               double target_bits);

}  // namespace dpllm
