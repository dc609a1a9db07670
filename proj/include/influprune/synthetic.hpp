#pragma once

#include "influprune/dataset.hpp"

#include <cstdint>
#include <vector>

namespace influprune {

struct SyntheticSpec {
  int n_users = 200;
  int n_items = 50;
  double density = 0.03;     // interactions = round(n_users * n_items * density)
  double drift = 0.0;        // in [0,1]; rotates item factors over the time axis
  std::uint64_t seed = 7;
};

/// Latent-factor interaction log: Zipf-skewed item popularity, softmax
/// affinity sampling, optional distribution drift so late interactions
/// differ from early ones. Deterministic per seed.
std::vector<Interaction> generate_synthetic(const SyntheticSpec& spec);

}  // namespace influprune
