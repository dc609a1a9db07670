#include "influprune/selection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

namespace influprune {

Strategy parse_strategy(const std::string& name) {
  if (name == "dealrec") return Strategy::DealRec;
  if (name == "random") return Strategy::Random;
  if (name == "grand") return Strategy::GraNd;
  if (name == "el2n") return Strategy::El2n;
  if (name == "ccs") return Strategy::Ccs;
  throw FatalError("unknown selection strategy: " + name);
}

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::DealRec: return "dealrec";
    case Strategy::Random: return "random";
    case Strategy::GraNd: return "grand";
    case Strategy::El2n: return "el2n";
    case Strategy::Ccs: return "ccs";
  }
  throw FatalError("unknown strategy value");
}

std::size_t SelectionConfig::resolve_budget(std::size_t n) const {
  std::size_t budget;
  if (count) {
    budget = *count;
  } else if (ratio) {
    if (*ratio <= 0.0 || *ratio > 1.0) throw FatalError("selection ratio must be in (0,1]");
    budget = static_cast<std::size_t>(*ratio * static_cast<double>(n));
    budget = std::max<std::size_t>(budget, 1);
  } else {
    throw FatalError("selection budget unset: give a ratio or a count");
  }
  if (budget < 1 || budget > n) {
    std::ostringstream msg;
    msg << "budget " << budget << " outside [1, " << n << "]";
    throw FatalError(msg.str());
  }
  return budget;
}

std::vector<ScoreRecord> overall_scores(const InfluenceResult& influence,
                                        const EffortResult& effort, double lambda,
                                        std::size_t n) {
  std::unordered_map<std::string, double> effort_by_id;
  for (const auto& [id, e] : effort.efforts) effort_by_id.emplace(id, e);
  if (effort_by_id.size() != influence.scores.size() ||
      influence.scores.size() != effort.efforts.size()) {
    std::ostringstream msg;
    msg << "influence/effort id sets differ (" << influence.scores.size() << " vs "
        << effort.efforts.size() << ")";
    throw FatalError(msg.str());
  }
  if (n == 0) throw FatalError("n must be positive");
  if (lambda < 0) throw FatalError("lambda must be >= 0");

  std::vector<ScoreRecord> records;
  records.reserve(influence.scores.size());
  std::vector<std::string> missing;
  for (const auto& [id, inf] : influence.scores) {
    auto it = effort_by_id.find(id);
    if (it == effort_by_id.end()) {
      missing.push_back(id);
      continue;
    }
    ScoreRecord r;
    r.id = id;
    r.influence = inf;
    r.effort = it->second;
    r.overall = inf / static_cast<double>(n) + lambda * it->second;
    if (!std::isfinite(r.overall)) throw FatalError("non-finite overall score for " + id);
    records.push_back(std::move(r));
  }
  if (!missing.empty()) {
    std::ostringstream msg;
    msg << "ids with influence but no effort:";
    for (const auto& id : missing) msg << ' ' << id;
    throw FatalError(msg.str());
  }
  return records;
}

Subset coverage_select(const std::vector<ScoreRecord>& records, const SelectionConfig& cfg) {
  if (records.empty()) throw FatalError("no records to select from");
  if (cfg.n_groups < 1) throw FatalError("n_groups must be >= 1");
  std::size_t n = records.size();
  std::size_t budget = cfg.resolve_budget(n);
  int k = cfg.n_groups;

  double lo = records[0].overall, hi = records[0].overall;
  for (const ScoreRecord& r : records) {
    lo = std::min(lo, r.overall);
    hi = std::max(hi, r.overall);
  }
  double width = (hi - lo) / static_cast<double>(k);

  Subset out;
  out.strategy = strategy_name(cfg.strategy);
  out.seed = cfg.seed;
  out.budget = budget;
  out.groups.resize(k);
  for (int g = 0; g < k; ++g) {
    out.groups[g].lo = lo + width * g;
    out.groups[g].hi = g + 1 == k ? hi : lo + width * (g + 1);
  }

  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < n; ++i) {
    int g = width > 0.0
                ? std::min(k - 1, static_cast<int>((records[i].overall - lo) / width))
                : 0;  // constant scores: single effective bin
    members[g].push_back(i);
    ++out.groups[g].size;
  }

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> selected;
  std::vector<int> remaining(k);
  std::iota(remaining.begin(), remaining.end(), 0);
  std::size_t per_group = budget / k;
  while (!remaining.empty()) {
    auto smallest = std::min_element(remaining.begin(), remaining.end(), [&](int a, int b) {
      return members[a].size() < members[b].size();  // ties keep lower index
    });
    int g = *smallest;
    remaining.erase(smallest);
    std::size_t take = std::min(per_group, members[g].size());
    std::shuffle(members[g].begin(), members[g].end(), rng);
    for (std::size_t i = 0; i < take; ++i) selected.push_back(members[g][i]);
    members[g].erase(members[g].begin(), members[g].begin() + take);
    out.groups[g].taken = take;
    if (!remaining.empty()) per_group = (budget - selected.size()) / remaining.size();
  }

  // The floors can leave a shortfall; top up uniformly from the unselected.
  if (selected.size() < budget) {
    std::vector<std::size_t> rest;
    for (auto& m : members) rest.insert(rest.end(), m.begin(), m.end());
    std::sort(rest.begin(), rest.end());
    std::shuffle(rest.begin(), rest.end(), rng);
    for (std::size_t i = 0; selected.size() < budget; ++i) selected.push_back(rest.at(i));
  }

  out.selected.reserve(budget);
  for (std::size_t i : selected) out.selected.push_back(records[i].id);
  return out;
}

Subset baseline_select(Strategy strategy, const SurrogateModel* surrogate,
                       std::span<const UserSequence> train, const SelectionConfig& cfg) {
  if (train.empty()) throw FatalError("empty train set");
  std::size_t n = train.size();
  std::size_t budget = cfg.resolve_budget(n);

  auto top_by = [&](const std::vector<double>& score) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
    Subset out;
    out.strategy = strategy_name(strategy);
    out.seed = cfg.seed;
    out.budget = budget;
    for (std::size_t i = 0; i < budget; ++i) out.selected.push_back(train[order[i]].id);
    return out;
  };

  switch (strategy) {
    case Strategy::Random: {
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 rng(cfg.seed);
      std::shuffle(order.begin(), order.end(), rng);
      Subset out;
      out.strategy = strategy_name(strategy);
      out.seed = cfg.seed;
      out.budget = budget;
      for (std::size_t i = 0; i < budget; ++i) out.selected.push_back(train[order[i]].id);
      return out;
    }
    case Strategy::GraNd: {
      if (!surrogate) throw FatalError("grand needs a trained surrogate");
      std::vector<double> score(n);
      parallel_for(n, [&](std::size_t i) { score[i] = surrogate->sample_gradient(train[i]).norm(); });
      return top_by(score);
    }
    case Strategy::El2n: {
      if (!surrogate) throw FatalError("el2n needs a trained surrogate");
      std::vector<double> score(n);
      parallel_for(n, [&](std::size_t i) {
        Vec p = surrogate->predict(train[i].history);
        p[train[i].target] -= 1.0;
        score[i] = p.norm();
      });
      return top_by(score);
    }
    case Strategy::Ccs: {
      if (!surrogate) throw FatalError("ccs needs a trained surrogate");
      std::vector<ScoreRecord> records(n);
      parallel_for(n, [&](std::size_t i) {
        Vec p = surrogate->predict(train[i].history);
        p[train[i].target] -= 1.0;
        records[i].id = train[i].id;
        records[i].overall = p.norm();
      });
      SelectionConfig ccs_cfg = cfg;
      ccs_cfg.strategy = Strategy::Ccs;
      return coverage_select(records, ccs_cfg);
    }
    case Strategy::DealRec:
      throw FatalError("dealrec is not a baseline: combine influence and effort scores instead");
  }
  throw FatalError("unknown strategy value");
}

}  // namespace influprune
