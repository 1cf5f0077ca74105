#include "dpllm/allocator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace dpllm {

void BudgetProblem::validate() const {
  if (layers.empty()) throw ConfigError("budget problem has no layers");
  if (bits.empty()) throw ConfigError("budget problem has no bitwidths");
  if (!std::is_sorted(bits.begin(), bits.end()) ||
      std::adjacent_find(bits.begin(), bits.end()) != bits.end()) {
    throw ConfigError("bitwidth list must be strictly ascending");
  }
  for (const auto& id : layers) {
    const auto m = params.find(id);
    if (m == params.end() || m->second == 0) {
      throw ConfigError("layer " + id.name() + " has no positive parameter count");
    }
    const auto s = scores.find(id);
    if (s == scores.end()) throw ConfigError("layer " + id.name() + " has no scores");
    for (unsigned b : bits) {
      const auto it = s->second.find(b);
      if (it == s->second.end() || !std::isfinite(it->second)) {
        throw ConfigError("layer " + id.name() + " lacks a finite " + std::to_string(b) +
                          "-bit score");
      }
    }
  }
  if (!std::isfinite(budget_bits)) throw ConfigError("budget must be finite");
}

double average_bits(const std::map<LayerId, unsigned>& bits,
                    const std::map<LayerId, std::uint64_t>& params) {
  double num = 0.0, den = 0.0;
  for (const auto& [id, b] : bits) {
    const double m = static_cast<double>(params.at(id));
    num += b * m;
    den += m;
  }
  return num / den;
}

BudgetSolver::BudgetSolver(const BudgetProblem& problem) {
  problem.validate();
  layers_ = problem.layers;
  std::sort(layers_.begin(), layers_.end());
  if (std::adjacent_find(layers_.begin(), layers_.end()) != layers_.end()) {
    throw ConfigError("budget problem lists a layer twice");
  }
  bits_ = problem.bits;
  params_ = problem.params;

  unit_ = 0;
  for (const auto& id : layers_) {
    unit_ = std::gcd(unit_, params_.at(id));
    total_params_ += params_.at(id);
  }

  std::int64_t max_units = 0;
  for (const auto& id : layers_) {
    max_units += static_cast<std::int64_t>((bits_.back() - bits_.front()) * (params_.at(id) / unit_));
  }
  const std::int64_t cap = std::min(units_at_most(problem.budget_bits), max_units);
  if (cap < 0) {
    std::ostringstream msg;
    msg << "budget of " << problem.budget_bits << " bits is below the smallest bitwidth "
        << bits_.front();
    throw InfeasibleError(msg.str());
  }

  using Cell = std::optional<std::pair<double, std::vector<std::uint8_t>>>;
  std::vector<Cell> row(static_cast<std::size_t>(cap) + 1);
  row[0] = std::make_pair(0.0, std::vector<std::uint8_t>{});
  for (const auto& id : layers_) {
    const auto& sc = problem.scores.at(id);
    const std::uint64_t u = params_.at(id) / unit_;
    std::vector<Cell> next(row.size());
    for (std::size_t at = 0; at < row.size(); ++at) {
      for (std::size_t j = 0; j < bits_.size(); ++j) {
        const std::uint64_t cost = (bits_[j] - bits_.front()) * u;
        if (cost > at || !row[at - cost]) continue;
        const auto& [prev_obj, prev_choice] = *row[at - cost];
        const double obj = prev_obj + sc.at(bits_[j]);
        auto& cell = next[at];
        if (cell) {
          if (obj > cell->first) continue;
          if (obj == cell->first) {
            // lexicographic compare of prev_choice + j against the incumbent
            const auto& inc = cell->second;
            const auto mis = std::mismatch(prev_choice.begin(), prev_choice.end(), inc.begin());
            const bool smaller = mis.first != prev_choice.end()
                                     ? *mis.first < *mis.second
                                     : j < inc.back();
            if (!smaller) continue;
          }
        }
        std::vector<std::uint8_t> choice = prev_choice;
        choice.push_back(static_cast<std::uint8_t>(j));
        cell = std::make_pair(obj, std::move(choice));
      }
    }
    row = std::move(next);
  }
  final_ = std::move(row);
}

std::int64_t BudgetSolver::units_at_most(double avg_bits) const {
  const double v = (avg_bits * (1.0 + kAccountingEps) - bits_.front()) *
                   static_cast<double>(total_params_) / static_cast<double>(unit_);
  return static_cast<std::int64_t>(std::floor(v));
}

std::int64_t BudgetSolver::units_at_least(double avg_bits) const {
  const double v = (avg_bits * (1.0 - kAccountingEps) - bits_.front()) *
                   static_cast<double>(total_params_) / static_cast<double>(unit_);
  return std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil(v)));
}

BitAssignment BudgetSolver::make(const std::vector<std::uint8_t>& choice, double objective) const {
  BitAssignment a;
  for (std::size_t i = 0; i < layers_.size(); ++i) a.bits[layers_[i]] = bits_[choice[i]];
  a.achieved_avg = average_bits(a.bits, params_);
  a.objective = objective;
  return a;
}

BitAssignment BudgetSolver::best(std::optional<double> lower_bound_bits) const {
  const std::size_t from =
      lower_bound_bits ? static_cast<std::size_t>(units_at_least(*lower_bound_bits)) : 0;
  const std::pair<double, std::vector<std::uint8_t>>* pick = nullptr;
  for (std::size_t at = from; at < final_.size(); ++at) {
    if (!final_[at]) continue;
    const auto& cand = *final_[at];
    if (pick == nullptr || cand.first < pick->first ||
        (cand.first == pick->first && cand.second < pick->second)) {
      pick = &cand;
    }
  }
  if (pick == nullptr) {
    std::ostringstream msg;
    msg << "no assignment reaches the lower bound of " << *lower_bound_bits
        << " bits within the budget";
    throw InfeasibleError(msg.str());
  }
  auto a = make(pick->second, pick->first);
  a.lower_bound_used = lower_bound_bits;
  return a;
}

BitAssignment solve(const BudgetProblem& problem) {
  return BudgetSolver(problem).best(problem.lower_bound_bits);
}

BudgetProblem make_problem(const SensitivityProfile& profile, const BitPlaneStore& store,
                           ScoreKind kind, double budget_bits, std::vector<unsigned> bits) {
  BudgetProblem p;
  if (bits.empty()) {
    for (unsigned b = store.b_min(); b <= store.n_bits(); ++b) bits.push_back(b);
  }
  p.bits = std::move(bits);
  p.budget_bits = budget_bits;
  const auto& table = profile.table(kind);
  for (const auto& [id, layer] : store.layers()) {
    p.layers.push_back(id);
    p.params[id] = static_cast<std::uint64_t>(layer.rows()) * layer.cols();
    const auto it = table.find(id);
    if (it == table.end()) throw ConfigError("profile has no scores for " + id.name());
    p.scores[id] = it->second;
  }
  return p;
}

BitAssignment max_precision_plan(const SensitivityProfile& profile, const BitPlaneStore& store,
                                 double budget_bits) {
  return solve(make_problem(profile, store, ScoreKind::SecondOrder, budget_bits));
}

BitAssignment static_plan_sweep(const BudgetProblem& problem, double target_bits) {
  constexpr double kStep = 0.01;
  constexpr double kWindow = 0.005;
  BudgetProblem upper = problem;
  upper.budget_bits = target_bits;
  upper.lower_bound_bits.reset();
  const BudgetSolver solver(upper);

  std::optional<BitAssignment> best_effort;
  for (int k = 0;; ++k) {
    const double lb = k * kStep;
    if (lb > target_bits * (1.0 + kAccountingEps)) break;
    BitAssignment a;
    try {
      a = solver.best(lb);
    } catch (const InfeasibleError&) {
      break;
    }
    const double gap = std::abs(a.achieved_avg - target_bits);
    if (gap <= kWindow * (1.0 + kAccountingEps)) return a;
    if (!best_effort || gap < std::abs(best_effort->achieved_avg - target_bits)) {
      best_effort = a;
    }
  }
  if (!best_effort) best_effort = solver.best(std::nullopt);
  best_effort->warning = true;
  std::ostringstream msg;
  msg << "lower-bound sweep did not reach within " << kWindow << " bits of " << target_bits
      << "; best achieved " << best_effort->achieved_avg;
  best_effort->note = msg.str();
  return *best_effort;
}

BitAssignment static_plan_llm_mq(const SensitivityProfile& profile, const BitPlaneStore& store,
                                 double target_bits) {
  return static_plan_sweep(make_problem(profile, store, ScoreKind::FirstOrder, target_bits),
                           target_bits);
}

BitAssignment static_plan_hawq(const SensitivityProfile& profile, const BitPlaneStore& store,
                               double target_bits) {
  return static_plan_sweep(make_problem(profile, store, ScoreKind::Hawq, target_bits),
                           target_bits);
}

}  // namespace dpllm
