#pragma once

#include <cstdint>
#include <vector>

namespace influprune {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 0.1;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
  // Convex mode only: Newton iterations after the gradient schedule, so the
  // returned parameters sit at the regularized optimum. Off by default.
  bool newton_polish = false;
  double polish_tol = 1e-10;
  int polish_max_iters = 50;
};

struct TrainTrace {
  std::vector<double> epoch_loss;  // mean train loss, entry 0 = before training
};

}  // namespace influprune
