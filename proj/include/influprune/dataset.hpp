#pragma once

#include "influprune/common.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace influprune {

struct Interaction {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;
  std::optional<double> rating;
};

/// One training sample s = (x, y): a user's chronological history and the
/// next item. `id` is unique per sample (a user can contribute several).
struct UserSequence {
  std::string id;
  std::string user_id;
  std::vector<int> history;     // catalog indices, oldest first
  int target = -1;              // catalog index
  std::int64_t target_ts = 0;
};

struct Dataset {
  std::vector<std::string> items;                   // index -> item_id
  std::unordered_map<std::string, int> item_index;  // item_id -> index
  std::vector<UserSequence> train;
  std::vector<UserSequence> valid;
  std::vector<UserSequence> test;

  int n_items() const { return static_cast<int>(items.size()); }
};

struct SplitSpec {
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
  std::optional<double> rating_threshold = 4.0;
};

enum class IngestFormat { Csv, Jsonl };

struct IngestResult {
  std::vector<Interaction> interactions;
  std::size_t malformed = 0;
  std::vector<std::size_t> malformed_rows;  // 1-based row numbers
};

/// Parses CSV (user_id,item_id,timestamp[,rating]) or JSONL. More than 1%
/// malformed rows is fatal.
IngestResult ingest_interactions(const std::string& path, IngestFormat format);

struct SplitRanges {
  std::size_t train_end = 0;  // [0, train_end)
  std::size_t valid_end = 0;  // [train_end, valid_end)
  std::size_t total = 0;      // test = [valid_end, total)
};

/// Contiguous prefix/middle/suffix over a timestamp-sorted list:
/// floor(r0*N) / floor(r1*N) / remainder.
SplitRanges temporal_split(std::size_t n, const std::array<double, 3>& ratios);

struct SequenceOptions {
  int min_history = 3;
  int max_history = 20;
};

/// Rating filter, global timestamp sort (ties by user_id then item_id),
/// temporal split, per-user sequence construction.
Dataset build_sequences(std::vector<Interaction> interactions, const SplitSpec& spec,
                        const SequenceOptions& opts);

void save_dataset(const Dataset& data, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace influprune
