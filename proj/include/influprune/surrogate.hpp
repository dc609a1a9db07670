#pragma once

#include "influprune/common.hpp"
#include "influprune/dataset.hpp"
#include "influprune/training.hpp"

#include <cstdint>
#include <span>

namespace influprune {

struct SurrogateConfig {
  int embed_dim = 8;
  bool convex_mode = true;  // input table frozen; loss convex in the output table
  double init_scale = 0.1;
  std::uint64_t seed = 1;
};

/// Mean-pool cross-entropy next-item model. For s = (x, y):
/// u = mean of input embeddings over x, logits z = B u, L = -log softmax(z)[y].
/// The learnable vector is B (convex mode) or [A; B] (full mode), row-major.
class SurrogateModel {
 public:
  SurrogateModel(int n_items, const SurrogateConfig& cfg);
  SurrogateModel(Mat input_table, Mat output_table, bool convex_mode);

  int n_items() const { return static_cast<int>(output_.rows()); }
  int embed_dim() const { return static_cast<int>(output_.cols()); }
  bool convex_mode() const { return convex_; }
  int learnable_dim() const;

  Vec learnable() const;
  void set_learnable(const Vec& theta);

  const Mat& input_table() const { return input_; }
  const Mat& output_table() const { return output_; }

  /// Mean-pooled input embedding for a history.
  Vec pool(std::span<const int> history) const;
  /// Softmax over item logits for a history.
  Vec predict(std::span<const int> history) const;

  double sample_loss(const UserSequence& s) const;
  Vec sample_gradient(const UserSequence& s) const;
  /// Analytic in convex mode; central differences of the gradient otherwise.
  Vec hessian_vector(const UserSequence& s, const Vec& v) const;
  /// Explicit per-sample Hessian, convex mode only (oracle use, small m).
  Mat sample_hessian(const UserSequence& s) const;

  double mean_loss(std::span<const UserSequence> samples) const;

 private:
  Mat input_;   // |I| x d
  Mat output_;  // |I| x d
  bool convex_;
};

/// Mini-batch gradient descent with weight decay, deterministic batch order.
/// `skip` excludes one training index (leave-one-out retraining).
SurrogateModel train_surrogate(std::span<const UserSequence> train, int n_items,
                               const SurrogateConfig& cfg, const TrainConfig& tcfg,
                               TrainTrace* trace = nullptr, std::int64_t skip = -1);

}  // namespace influprune
