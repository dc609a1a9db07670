#include "influprune/influence.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <random>
#include <sstream>

namespace influprune {

InfluenceEstimator::InfluenceEstimator(const SurrogateModel& model,
                                       std::span<const UserSequence> train)
    : model_(model), train_(train) {
  if (train_.empty()) throw FatalError("influence estimation needs a non-empty train set");
}

Vec InfluenceEstimator::average_gradient() const {
  std::vector<Vec> grads(train_.size());
  parallel_for(train_.size(), [&](std::size_t i) { grads[i] = model_.sample_gradient(train_[i]); });
  Vec sum = Vec::Zero(model_.learnable_dim());
  for (const Vec& g : grads) sum += g;
  return sum / static_cast<double>(train_.size());
}

Vec lissa_ihvp(const std::function<Vec(std::size_t, const Vec&)>& hvp, std::size_t n_samples,
               const Vec& v, HvpConfig cfg, IhvpDiagnostics* diag, int* call_counter) {
  if (!v.allFinite()) throw FatalError("ihvp right-hand side is not finite");
  if (n_samples == 0) throw FatalError("ihvp needs a non-empty sample set");
  if (cfg.iterations < 0 || cfg.scale <= 0 || cfg.damping < 0 || cfg.repeats < 1 || cfg.batch < 1)
    throw FatalError("invalid HVP config");

  double vnorm = v.norm();
  if (vnorm == 0.0) {
    if (call_counter) *call_counter += cfg.repeats;
    if (diag) diag->scale_used = cfg.scale;
    return Vec::Zero(v.size());
  }

  std::uniform_int_distribution<std::size_t> pick(0, n_samples - 1);
  for (int attempt = 0; ; ++attempt) {
    bool diverged = false;
    Vec acc = Vec::Zero(v.size());
    IhvpDiagnostics local;
    local.scale_used = cfg.scale;
    local.retries = attempt;
    for (int rep = 0; rep < cfg.repeats && !diverged; ++rep) {
      std::mt19937_64 rng(cfg.seed + static_cast<std::uint64_t>(rep) * 0x9e3779b97f4a7c15ULL);
      Vec h = v;
      for (int t = 1; t <= cfg.iterations; ++t) {
        Vec hv = Vec::Zero(v.size());
        for (int b = 0; b < cfg.batch; ++b) hv += hvp(pick(rng), h);
        hv /= static_cast<double>(cfg.batch);
        h = v + h - (hv + cfg.damping * h) / cfg.scale;
        if (rep == 0 && t % 100 == 0) local.iterate_norms.push_back(h.norm());
        if (!h.allFinite() || h.norm() > cfg.divergence_factor * vnorm) {
          diverged = true;
          break;
        }
      }
      acc += h / cfg.scale;
    }
    if (!diverged) {
      if (call_counter) *call_counter += cfg.repeats;
      if (diag) *diag = std::move(local);
      return acc / static_cast<double>(cfg.repeats);
    }
    if (attempt >= cfg.max_scale_retries) {
      std::ostringstream msg;
      msg << "ihvp recursion diverged at scale " << cfg.scale
          << "; increase the scale parameter (it must exceed the largest Hessian eigenvalue)";
      throw FatalError(msg.str());
    }
    cfg.scale *= 2.0;
  }
}

Vec InfluenceEstimator::estimate_ihvp(const Vec& v, HvpConfig cfg, IhvpDiagnostics* diag) {
  return lissa_ihvp(
      [this](std::size_t i, const Vec& h) { return model_.hessian_vector(train_[i], h); },
      train_.size(), v, cfg, diag, &solver_calls_);
}

InfluenceResult InfluenceEstimator::influence_scores(const HvpConfig& cfg) {
  InfluenceResult res;
  int calls_before = solver_calls_;
  Vec vbar = average_gradient();
  res.ihvp = estimate_ihvp(vbar, cfg, &res.diagnostics);
  res.solver_calls = solver_calls_ - calls_before;

  double inv_n = 1.0 / static_cast<double>(train_.size());
  std::vector<double> vals(train_.size());
  parallel_for(train_.size(), [&](std::size_t i) {
    vals[i] = inv_n * model_.sample_gradient(train_[i]).dot(res.ihvp);
  });
  res.scores.reserve(train_.size());
  for (std::size_t i = 0; i < train_.size(); ++i) {
    if (!std::isfinite(vals[i])) throw FatalError("non-finite influence score for " + train_[i].id);
    res.scores.emplace_back(train_[i].id, vals[i]);
  }
  return res;
}

Vec InfluenceEstimator::parameter_change(const UserSequence& s, const HvpConfig& cfg) {
  Vec g = model_.sample_gradient(s);
  return estimate_ihvp(g, cfg) / static_cast<double>(train_.size());
}

Vec exact_ihvp_oracle(const SurrogateModel& model, std::span<const UserSequence> train,
                      const Vec& v, double damping) {
  if (model.learnable_dim() > 2000)
    throw FatalError("exact ihvp oracle refused: learnable dimension > 2000");
  if (train.empty()) throw FatalError("empty train set");
  int m = model.learnable_dim();
  Mat h = Mat::Zero(m, m);
  for (const UserSequence& s : train) h += model.sample_hessian(s);
  h /= static_cast<double>(train.size());
  h.diagonal().array() += damping;
  Vec x = h.ldlt().solve(v);
  if ((h * x - v).norm() > 1e-6 * (1.0 + v.norm()))
    throw FatalError("damped Hessian is numerically singular");
  return x;
}

LooResult loo_oracle(std::span<const UserSequence> train, int n_items,
                     const SurrogateConfig& cfg, const TrainConfig& tcfg,
                     std::span<const std::size_t> probe_indices) {
  SurrogateModel base = train_surrogate(train, n_items, cfg, tcfg);
  double base_risk = base.mean_loss(train);

  LooResult res;
  res.risk_changes.resize(probe_indices.size());
  std::vector<char> failed(probe_indices.size(), 0);
  parallel_for(probe_indices.size(), [&](std::size_t k) {
    std::size_t idx = probe_indices[k];
    if (idx >= train.size()) throw FatalError("probe index out of range");
    try {
      SurrogateModel refit = train_surrogate(train, n_items, cfg, tcfg, nullptr,
                                             static_cast<std::int64_t>(idx));
      res.risk_changes[k] = {train[idx].id, refit.mean_loss(train) - base_risk};
    } catch (const FatalError&) {
      failed[k] = 1;
      res.risk_changes[k] = {train[idx].id, std::numeric_limits<double>::quiet_NaN()};
    }
  });
  for (std::size_t k = 0; k < probe_indices.size(); ++k)
    if (failed[k]) res.failed.push_back(train[probe_indices[k]].id);
  return res;
}

}  // namespace influprune
