#pragma once

#include "influprune/common.hpp"
#include "influprune/dataset.hpp"
#include "influprune/training.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace influprune {

enum class TargetArch { MpceLarge, TinyTransformer };
enum class LearnableSubset { All, AdaptersOnly };

struct TargetConfig {
  TargetArch arch = TargetArch::MpceLarge;
  int embed_dim = 32;
  int n_layers = 1;          // transformer only
  int max_positions = 20;    // transformer only; longer histories keep the tail
  LearnableSubset subset = LearnableSubset::All;
  int adapter_rank = 4;      // low-rank additive factors on the output projection
  double pretrain_fraction = 0.5;
  double init_scale = 0.1;
  std::uint64_t seed = 1;
};

struct EffortResult {
  // (sample id, gradient norm over the learnable subset), input order.
  std::vector<std::pair<std::string, double>> efforts;
};

/// The model being fine-tuned few-shot. Two architectures behind one
/// contract: next-item negative log-likelihood, learnable-subset gradients,
/// full-catalog logits for ranking. Output projection carries low-rank
/// adapter factors; adapters-only mode freezes everything else.
class TargetModel {
 public:
  TargetModel(int n_items, const TargetConfig& cfg);

  const TargetConfig& config() const { return cfg_; }
  int n_items() const { return n_items_; }
  int learnable_dim() const;

  Vec item_logits(std::span<const int> history) const;
  double sample_loss(const UserSequence& s) const;
  /// Gradient restricted to the learnable subset.
  Vec learnable_gradient(const UserSequence& s) const;
  /// Gradient over every parameter block (adapters included).
  Vec full_gradient(const UserSequence& s) const;

  Vec learnable() const;
  void set_learnable(const Vec& phi);
  /// Every parameter flattened, learnable or not (frozen-block comparisons).
  Vec all_params() const;
  void set_all_params(const Vec& params);

  double mean_loss(std::span<const UserSequence> samples) const;

 private:
  struct Layer {
    Mat wq, wk, wv, wo;  // d x d
    Mat w1;              // f x d
    Mat w2;              // d x f
  };
  struct Grads;

  std::vector<int> clip(std::span<const int> history) const;
  Vec forward_last_state(std::span<const int> history) const;
  void backward(const UserSequence& s, Grads& out) const;
  std::vector<std::pair<const Mat*, bool>> blocks() const;  // (block, learnable)
  std::vector<std::pair<Mat*, bool>> blocks();

  TargetConfig cfg_;
  int n_items_;
  Mat embed_;                 // |I| x d (input table / token embeddings)
  Mat pos_;                   // max_positions x d (transformer only)
  std::vector<Layer> layers_; // transformer only
  Mat out_;                   // |I| x d output projection
  Mat adapter_u_;             // |I| x r, zero-initialized
  Mat adapter_v_;             // d x r
};

/// Trains on the earliest pretrain_fraction of the train window, a temporal
/// prefix standing in for pre-existing knowledge.
TargetModel pretrain_target(const Dataset& data, const TargetConfig& cfg, const TrainConfig& tcfg,
                            TrainTrace* trace = nullptr);

EffortResult effort_scores(const TargetModel& model, std::span<const UserSequence> samples);

/// Optimizes only the learnable subset on the selected samples.
TargetModel finetune_fewshot(const TargetModel& pretrained, std::span<const UserSequence> subset,
                             const TrainConfig& tcfg, TrainTrace* trace = nullptr);

}  // namespace influprune
