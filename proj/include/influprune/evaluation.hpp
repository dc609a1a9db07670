#pragma once

#include "influprune/dataset.hpp"
#include "influprune/influence.hpp"
#include "influprune/selection.hpp"
#include "influprune/target_model.hpp"

#include <map>
#include <string>
#include <vector>

namespace influprune {

struct RankingMetrics {
  std::map<int, double> recall;  // K -> mean recall@K
  std::map<int, double> ndcg;    // K -> mean ndcg@K
  std::size_t n_evaluated = 0;
  std::size_t n_skipped = 0;  // target item missing from catalog
};

/// Full-catalog ranking per test sequence, history items excluded from the
/// candidate list, ties broken by item index. Single-target recall/NDCG.
RankingMetrics rank_and_score(const TargetModel& model, std::span<const UserSequence> test,
                              const std::vector<int>& ks);

struct StrategyOutcome {
  std::string strategy;
  bool failed = false;
  std::string error;
  // metric -> K -> per-seed values.
  std::map<std::string, std::map<int, std::vector<double>>> per_seed;
  std::map<std::string, std::map<int, double>> mean;
  std::map<std::string, std::map<int, double>> stddev;
  double select_seconds = 0.0;
  double finetune_seconds = 0.0;
  double eval_seconds = 0.0;
};

struct EvalReport {
  std::vector<StrategyOutcome> strategies;
  std::vector<std::uint64_t> seeds;
  std::vector<int> ks;
};

struct CompareConfig {
  std::vector<Strategy> strategies;
  std::vector<std::uint64_t> seeds;
  std::vector<int> ks{10, 20};
  SelectionConfig selection;    // budget, K, lambda; seed overridden per run
  HvpConfig hvp;                // influence scoring settings
  TrainConfig finetune;
  bool include_full_finetune = false;
};

/// Runs the strategy x seed grid from a shared pretrained target: select,
/// fine-tune few-shot, rank. A failing strategy is marked and the rest
/// proceed.
EvalReport compare_selectors(const Dataset& data, const SurrogateModel& surrogate,
                             const TargetModel& pretrained, const InfluenceResult& influence,
                             const EffortResult& effort, const CompareConfig& cfg);

std::string report_to_json(const EvalReport& report);
std::string report_to_csv(const EvalReport& report);
/// Mean metrics as an aligned strategy-by-metric text table.
std::string report_to_table(const EvalReport& report);

}  // namespace influprune
