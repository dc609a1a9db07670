#include "influprune/evaluation.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <unordered_map>

namespace influprune {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

RankingMetrics rank_and_score(const TargetModel& model, std::span<const UserSequence> test,
                              const std::vector<int>& ks) {
  if (test.empty()) throw FatalError("empty test set");
  RankingMetrics m;
  for (int k : ks) {
    m.recall[k] = 0.0;
    m.ndcg[k] = 0.0;
  }

  std::vector<int> ranks(test.size(), -1);
  parallel_for(test.size(), [&](std::size_t i) {
    const UserSequence& s = test[i];
    if (s.target < 0 || s.target >= model.n_items()) return;  // skipped
    Vec z = model.item_logits(s.history);
    std::vector<char> in_history(model.n_items(), 0);
    for (int item : s.history) in_history[item] = 1;
    double zy = z[s.target];
    int rank = 1;
    for (int j = 0; j < model.n_items(); ++j) {
      if (j == s.target || in_history[j]) continue;
      if (z[j] > zy || (z[j] == zy && j < s.target)) ++rank;
    }
    ranks[i] = rank;
  });

  for (int rank : ranks) {
    if (rank < 0) {
      ++m.n_skipped;
      continue;
    }
    ++m.n_evaluated;
    for (int k : ks) {
      if (rank <= k) {
        m.recall[k] += 1.0;
        m.ndcg[k] += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
      }
    }
  }
  if (m.n_evaluated == 0) throw FatalError("no evaluable test sequences");
  for (int k : ks) {
    m.recall[k] /= static_cast<double>(m.n_evaluated);
    m.ndcg[k] /= static_cast<double>(m.n_evaluated);
  }
  return m;
}

EvalReport compare_selectors(const Dataset& data, const SurrogateModel& surrogate,
                             const TargetModel& pretrained, const InfluenceResult& influence,
                             const EffortResult& effort, const CompareConfig& cfg) {
  if (cfg.strategies.empty() && !cfg.include_full_finetune)
    throw FatalError("no strategies to compare");
  if (cfg.seeds.empty()) throw FatalError("need at least one seed");

  std::unordered_map<std::string, std::size_t> index_by_id;
  for (std::size_t i = 0; i < data.train.size(); ++i) index_by_id.emplace(data.train[i].id, i);

  EvalReport report;
  report.seeds = cfg.seeds;
  report.ks = cfg.ks;

  auto run_strategy = [&](const std::string& name,
                          auto&& pick_subset) {  // seed -> vector<UserSequence>
    StrategyOutcome out;
    out.strategy = name;
    try {
      for (std::uint64_t seed : cfg.seeds) {
        auto t0 = std::chrono::steady_clock::now();
        std::vector<UserSequence> subset = pick_subset(seed);
        out.select_seconds += seconds_since(t0);

        TrainConfig tcfg = cfg.finetune;
        tcfg.seed = seed;
        t0 = std::chrono::steady_clock::now();
        TargetModel tuned = finetune_fewshot(pretrained, subset, tcfg);
        out.finetune_seconds += seconds_since(t0);

        t0 = std::chrono::steady_clock::now();
        RankingMetrics m = rank_and_score(tuned, data.test, cfg.ks);
        out.eval_seconds += seconds_since(t0);
        for (int k : cfg.ks) {
          out.per_seed["recall"][k].push_back(m.recall.at(k));
          out.per_seed["ndcg"][k].push_back(m.ndcg.at(k));
        }
      }
      for (auto& [metric, by_k] : out.per_seed)
        for (auto& [k, vals] : by_k) {
          double mean = 0.0;
          for (double v : vals) mean += v;
          mean /= static_cast<double>(vals.size());
          double var = 0.0;
          for (double v : vals) var += (v - mean) * (v - mean);
          var /= static_cast<double>(vals.size());
          out.mean[metric][k] = mean;
          out.stddev[metric][k] = std::sqrt(var);
        }
    } catch (const std::exception& e) {
      out.failed = true;
      out.error = e.what();
    }
    report.strategies.push_back(std::move(out));
  };

  auto resolve = [&](const Subset& subset) {
    std::vector<UserSequence> seqs;
    seqs.reserve(subset.selected.size());
    for (const std::string& id : subset.selected) {
      auto it = index_by_id.find(id);
      if (it == index_by_id.end()) throw FatalError("selected id not in train set: " + id);
      seqs.push_back(data.train[it->second]);
    }
    return seqs;
  };

  for (Strategy strategy : cfg.strategies) {
    run_strategy(strategy_name(strategy), [&, strategy](std::uint64_t seed) {
      SelectionConfig scfg = cfg.selection;
      scfg.seed = seed;
      scfg.strategy = strategy;
      if (strategy == Strategy::DealRec) {
        auto records = overall_scores(influence, effort, scfg.lambda, data.train.size());
        return resolve(coverage_select(records, scfg));
      }
      return resolve(baseline_select(strategy, &surrogate, data.train, scfg));
    });
  }
  if (cfg.include_full_finetune)
    run_strategy("full", [&](std::uint64_t) { return data.train; });
  return report;
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["seeds"] = report.seeds;
  j["ks"] = report.ks;
  j["strategies"] = nlohmann::json::array();
  for (const StrategyOutcome& s : report.strategies) {
    nlohmann::json js;
    js["strategy"] = s.strategy;
    js["failed"] = s.failed;
    if (s.failed) js["error"] = s.error;
    for (const auto& [metric, by_k] : s.mean)
      for (const auto& [k, v] : by_k) {
        std::string key = metric + "@" + std::to_string(k);
        js["mean"][key] = v;
        js["stddev"][key] = s.stddev.at(metric).at(k);
        js["per_seed"][key] = s.per_seed.at(metric).at(k);
      }
    js["wallclock_s"] = {{"select", s.select_seconds},
                         {"finetune", s.finetune_seconds},
                         {"evaluate", s.eval_seconds}};
    j["strategies"].push_back(std::move(js));
  }
  return j.dump(2);
}

std::string report_to_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "strategy,seed,metric,K,value,wallclock_s\n";
  for (const StrategyOutcome& s : report.strategies) {
    if (s.failed) continue;
    double wall = s.select_seconds + s.finetune_seconds + s.eval_seconds;
    for (const auto& [metric, by_k] : s.per_seed)
      for (const auto& [k, vals] : by_k)
        for (std::size_t i = 0; i < vals.size(); ++i)
          out << s.strategy << ',' << report.seeds[i] << ',' << metric << ',' << k << ','
              << vals[i] << ',' << wall << '\n';
  }
  return out.str();
}

std::string report_to_table(const EvalReport& report) {
  std::ostringstream out;
  out << std::left << std::setw(12) << "Method";
  for (int k : report.ks) out << std::setw(12) << ("R@" + std::to_string(k));
  for (int k : report.ks) out << std::setw(12) << ("N@" + std::to_string(k));
  out << '\n';
  for (const StrategyOutcome& s : report.strategies) {
    out << std::left << std::setw(12) << s.strategy;
    if (s.failed) {
      out << "FAILED: " << s.error << '\n';
      continue;
    }
    out << std::fixed << std::setprecision(4);
    for (int k : report.ks) out << std::setw(12) << s.mean.at("recall").at(k);
    for (int k : report.ks) out << std::setw(12) << s.mean.at("ndcg").at(k);
    out.unsetf(std::ios::fixed);
    out << '\n';
  }
  return out.str();
}

}  // namespace influprune
