#include "influprune/synthetic.hpp"

#include <cmath>
#include <random>

namespace influprune {

std::vector<Interaction> generate_synthetic(const SyntheticSpec& spec) {
  if (spec.n_users < 2 || spec.n_items < 2) throw FatalError("need at least 2 users and 2 items");
  if (spec.density <= 0.0 || spec.density > 1.0) throw FatalError("density must be in (0,1]");
  if (spec.drift < 0.0 || spec.drift > 1.0) throw FatalError("drift must be in [0,1]");

  constexpr int kLatent = 8;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  Mat user_f(spec.n_users, kLatent), item_f(spec.n_items, kLatent);
  for (int u = 0; u < spec.n_users; ++u)
    for (int k = 0; k < kLatent; ++k) user_f(u, k) = gauss(rng);
  for (int i = 0; i < spec.n_items; ++i)
    for (int k = 0; k < kLatent; ++k) item_f(i, k) = gauss(rng);

  // Zipf popularity over a shuffled item order.
  std::vector<int> perm(spec.n_items);
  for (int i = 0; i < spec.n_items; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  Vec log_pop(spec.n_items);
  for (int rank = 0; rank < spec.n_items; ++rank)
    log_pop[perm[rank]] = -std::log(static_cast<double>(rank + 1));

  auto total = static_cast<std::int64_t>(
      std::llround(spec.n_users * static_cast<double>(spec.n_items) * spec.density));
  if (total < 1) total = 1;

  std::uniform_int_distribution<int> pick_user(0, spec.n_users - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<Interaction> log;
  log.reserve(static_cast<std::size_t>(total));
  Vec affinity(spec.n_items);
  for (std::int64_t e = 0; e < total; ++e) {
    double tau = total > 1 ? static_cast<double>(e) / static_cast<double>(total - 1) : 0.0;
    // Drift rotates the first two latent dimensions linearly in time, so the
    // late distribution disagrees with the early one.
    double angle = spec.drift * tau * (M_PI / 2.0);
    double c = std::cos(angle), s = std::sin(angle);
    int u = pick_user(rng);
    for (int i = 0; i < spec.n_items; ++i) {
      double v0 = c * item_f(i, 0) - s * item_f(i, 1);
      double v1 = s * item_f(i, 0) + c * item_f(i, 1);
      double dot = user_f(u, 0) * v0 + user_f(u, 1) * v1;
      for (int k = 2; k < kLatent; ++k) dot += user_f(u, k) * item_f(i, k);
      affinity[i] = dot / std::sqrt(static_cast<double>(kLatent)) + log_pop[i];
    }
    // Gumbel-max draw from softmax(affinity).
    int best = 0;
    double best_val = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < spec.n_items; ++i) {
      double g = -std::log(-std::log(std::max(unit(rng), 1e-300)));
      if (affinity[i] + g > best_val) {
        best_val = affinity[i] + g;
        best = i;
      }
    }
    Interaction it;
    it.user_id = "u" + std::to_string(u);
    it.item_id = "i" + std::to_string(best);
    it.timestamp = e;
    log.push_back(std::move(it));
  }
  return log;
}

}  // namespace influprune
