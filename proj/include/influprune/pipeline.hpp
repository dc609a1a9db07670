#pragma once

#include "influprune/dataset.hpp"
#include "influprune/evaluation.hpp"
#include "influprune/influence.hpp"
#include "influprune/selection.hpp"
#include "influprune/surrogate.hpp"
#include "influprune/synthetic.hpp"
#include "influprune/target_model.hpp"

#include <optional>
#include <string>

namespace influprune {

/// Parsed pipeline configuration plus the canonical JSON it came from
/// (hashed into the stage manifest).
struct PipelineConfig {
  // dataset source: exactly one of path or synthetic
  std::optional<std::string> data_path;
  IngestFormat format = IngestFormat::Csv;
  std::optional<SyntheticSpec> synthetic;
  SplitSpec split;
  SequenceOptions sequences;

  SurrogateConfig surrogate;
  TrainConfig surrogate_train;
  HvpConfig hvp;
  TargetConfig target;
  TrainConfig target_pretrain;
  TrainConfig target_finetune;
  SelectionConfig selection;
  CompareConfig evaluation;

  std::optional<std::string> workdir;  // config-level default for --workdir
  std::string canonical_json;
};

PipelineConfig load_pipeline_config(const std::string& path);

/// Applies one seed to every stage seed field (the --seed flag).
void override_seeds(PipelineConfig& cfg, std::uint64_t seed);

// Exit codes: 0 success, 1 fatal, 2 missing prerequisite artifact,
// 3 config-hash mismatch against the manifest (unless forced).
inline constexpr int kExitFatal = 1;
inline constexpr int kExitMissingPrereq = 2;
inline constexpr int kExitConfigMismatch = 3;

int run_command(const std::string& command, const PipelineConfig& cfg,
                const std::string& workdir, bool force);

// Artifact readers shared by stages and tests.
InfluenceResult read_influence_jsonl(const std::string& path);
EffortResult read_effort_jsonl(const std::string& path);
Subset read_subset_json(const std::string& path);

}  // namespace influprune
