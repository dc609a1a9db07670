#pragma once

#include "influprune/surrogate.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace influprune {

struct HvpConfig {
  int iterations = 5000;   // T
  double damping = 0.01;   // mu, added to every per-sample Hessian draw
  double scale = 10.0;     // sigma, must dominate lambda_max(H) + mu
  int repeats = 1;         // R, independent recursions averaged
  int batch = 1;           // b, per-sample Hessian draws averaged per step
  std::uint64_t seed = 1;
  int max_scale_retries = 4;   // sigma doubled on divergence, up to this many times
  double divergence_factor = 1e6;
};

struct IhvpDiagnostics {
  std::vector<double> iterate_norms;  // ||h_t|| every 100 steps (first repeat)
  double scale_used = 0.0;
  int retries = 0;
};

struct InfluenceResult {
  // (sample id, score) in train order; score = (1/n) grad(s)^T ihvp.
  std::vector<std::pair<std::string, double>> scores;
  Vec ihvp;  // the shared (H + mu I)^{-1} v_bar solve
  IhvpDiagnostics diagnostics;
  int solver_calls = 0;
};

/// The damped, scaled stochastic Neumann recursion over an arbitrary
/// per-sample HVP callable (sample index, vector) -> H_s v. Each repeat
/// bumps *call_counter by one.
Vec lissa_ihvp(const std::function<Vec(std::size_t, const Vec&)>& hvp, std::size_t n_samples,
               const Vec& v, HvpConfig cfg, IhvpDiagnostics* diag = nullptr,
               int* call_counter = nullptr);

/// Influence estimation against a trained surrogate. Keeps a counter of
/// stochastic inverse-HVP recursions so the single-solve property is
/// checkable from tests.
class InfluenceEstimator {
 public:
  InfluenceEstimator(const SurrogateModel& model, std::span<const UserSequence> train);

  /// v_bar = (1/n) sum of per-sample gradients.
  Vec average_gradient() const;

  /// Damped, scaled stochastic Neumann recursion:
  ///   h_0 = v;  h_t = v + h_{t-1} - (1/sigma) (HVP_{s_t}(h_{t-1}) + mu h_{t-1})
  /// returning the average over repeats of h_T / sigma, an estimate of
  /// (H + mu I)^{-1} v. Divergence doubles sigma and restarts.
  Vec estimate_ihvp(const Vec& v, HvpConfig cfg, IhvpDiagnostics* diag = nullptr);

  /// One shared solve on v_bar, then an inner product per sample.
  InfluenceResult influence_scores(const HvpConfig& cfg);

  /// Predicted parameter change from removing s: (1/n) (H + mu I)^{-1} grad(s).
  Vec parameter_change(const UserSequence& s, const HvpConfig& cfg);

  int solver_calls() const { return solver_calls_; }

 private:
  const SurrogateModel& model_;
  std::span<const UserSequence> train_;
  int solver_calls_ = 0;
};

/// Assembles H = (1/n) sum of per-sample Hessians + damping I explicitly and
/// solves directly. Convex mode, learnable dimension <= 2000.
Vec exact_ihvp_oracle(const SurrogateModel& model, std::span<const UserSequence> train,
                      const Vec& v, double damping);

struct LooResult {
  // (sample id, risk change): mean train loss after retraining without the
  // sample, minus mean train loss of the base model.
  std::vector<std::pair<std::string, double>> risk_changes;
  std::vector<std::string> failed;  // probes whose retrain went non-finite
};

/// Ground-truth leave-one-out retraining for the probed train indices.
LooResult loo_oracle(std::span<const UserSequence> train, int n_items,
                     const SurrogateConfig& cfg, const TrainConfig& tcfg,
                     std::span<const std::size_t> probe_indices);

}  // namespace influprune
