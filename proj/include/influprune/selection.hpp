#pragma once

#include "influprune/influence.hpp"
#include "influprune/surrogate.hpp"
#include "influprune/target_model.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace influprune {

struct ScoreRecord {
  std::string id;
  double influence = 0.0;  // stored influence term: (1/n) grad^T ihvp
  double effort = 0.0;
  double overall = 0.0;    // (1/n) * influence + lambda * effort
  int group = -1;
};

enum class Strategy { DealRec, Random, GraNd, El2n, Ccs };

Strategy parse_strategy(const std::string& name);
std::string strategy_name(Strategy s);

struct SelectionConfig {
  std::optional<double> ratio;        // r in (0,1]
  std::optional<std::size_t> count;   // absolute budget; wins over ratio
  int n_groups = 50;                  // K
  double lambda = 0.5;
  Strategy strategy = Strategy::DealRec;
  std::uint64_t seed = 1;

  std::size_t resolve_budget(std::size_t n) const;
};

struct GroupTally {
  double lo = 0.0, hi = 0.0;
  std::size_t size = 0, taken = 0;
};

struct Subset {
  std::vector<std::string> selected;  // sample ids, selection order
  std::vector<GroupTally> groups;
  std::string strategy;
  std::uint64_t seed = 0;
  std::size_t budget = 0;
};

/// Combines the two score maps per sample. The id sets must match exactly.
std::vector<ScoreRecord> overall_scores(const InfluenceResult& influence,
                                        const EffortResult& effort, double lambda,
                                        std::size_t n);

/// Stratified coverage sampling: K equal-width bins over the overall-score
/// range, then repeatedly drain the smallest remaining group with a budget
/// of floor(remaining budget / remaining groups), topping up uniformly if
/// the floors leave a shortfall.
Subset coverage_select(const std::vector<ScoreRecord>& records, const SelectionConfig& cfg);

/// random / grand / el2n / ccs. The surrogate is required for all but random.
Subset baseline_select(Strategy strategy, const SurrogateModel* surrogate,
                       std::span<const UserSequence> train, const SelectionConfig& cfg);

}  // namespace influprune
