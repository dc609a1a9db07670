#include "influprune/dataset.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace influprune {

namespace {

bool parse_int64(std::string_view s, std::int64_t& out) {
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && p == s.data() + s.size();
}

bool parse_double(std::string_view s, double& out) {
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && p == s.data() + s.size();
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\r' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

bool parse_csv_row(std::string_view line, Interaction& out) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      fields.push_back(trim(line.substr(start, i - start)));
      start = i + 1;
    }
  }
  if (fields.size() != 3 && fields.size() != 4) return false;
  out.user_id = std::string(fields[0]);
  out.item_id = std::string(fields[1]);
  if (out.user_id.empty() || out.item_id.empty()) return false;
  if (!parse_int64(fields[2], out.timestamp) || out.timestamp < 0) return false;
  out.rating.reset();
  if (fields.size() == 4 && !fields[3].empty()) {
    double r;
    if (!parse_double(fields[3], r)) return false;
    out.rating = r;
  }
  return true;
}

bool parse_jsonl_row(const std::string& line, Interaction& out) {
  auto j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return false;
  if (!j.contains("user_id") || !j.contains("item_id") || !j.contains("timestamp")) return false;
  try {
    out.user_id = j.at("user_id").get<std::string>();
    out.item_id = j.at("item_id").get<std::string>();
    out.timestamp = j.at("timestamp").get<std::int64_t>();
    out.rating.reset();
    if (j.contains("rating") && !j.at("rating").is_null()) out.rating = j.at("rating").get<double>();
  } catch (const nlohmann::json::exception&) {
    return false;
  }
  return out.timestamp >= 0 && !out.user_id.empty() && !out.item_id.empty();
}

}  // namespace

IngestResult ingest_interactions(const std::string& path, IngestFormat format) {
  std::ifstream in(path);
  if (!in) throw FatalError("cannot read interaction file: " + path);

  IngestResult res;
  std::string line;
  std::size_t row = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++row;
    std::string_view sv = trim(line);
    if (sv.empty()) continue;
    // Tolerate a CSV header row.
    if (first && format == IngestFormat::Csv && sv.starts_with("user_id")) {
      first = false;
      continue;
    }
    first = false;
    Interaction it;
    bool ok = format == IngestFormat::Csv ? parse_csv_row(sv, it) : parse_jsonl_row(line, it);
    if (ok) {
      res.interactions.push_back(std::move(it));
    } else {
      ++res.malformed;
      res.malformed_rows.push_back(row);
    }
  }
  std::size_t total = res.interactions.size() + res.malformed;
  if (total > 0 && res.malformed * 100 > total) {
    std::ostringstream msg;
    msg << "too many malformed rows (" << res.malformed << "/" << total << "), first bad rows:";
    for (std::size_t i = 0; i < std::min<std::size_t>(res.malformed_rows.size(), 10); ++i)
      msg << ' ' << res.malformed_rows[i];
    throw FatalError(msg.str());
  }
  return res;
}

SplitRanges temporal_split(std::size_t n, const std::array<double, 3>& ratios) {
  double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9) throw FatalError("split ratios must sum to 1");
  if (n < 3) throw FatalError("need at least 3 interactions to split");
  SplitRanges r;
  r.train_end = static_cast<std::size_t>(ratios[0] * static_cast<double>(n));
  r.valid_end = r.train_end + static_cast<std::size_t>(ratios[1] * static_cast<double>(n));
  r.total = n;
  return r;
}

Dataset build_sequences(std::vector<Interaction> interactions, const SplitSpec& spec,
                        const SequenceOptions& opts) {
  if (spec.rating_threshold) {
    double thr = *spec.rating_threshold;
    std::erase_if(interactions, [thr](const Interaction& it) {
      return it.rating && *it.rating < thr;
    });
  }
  if (interactions.empty()) throw FatalError("empty after rating filter");

  std::sort(interactions.begin(), interactions.end(), [](const Interaction& a, const Interaction& b) {
    if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
    if (a.user_id != b.user_id) return a.user_id < b.user_id;
    return a.item_id < b.item_id;
  });

  SplitRanges split = temporal_split(interactions.size(), spec.ratios);

  Dataset data;
  for (const Interaction& it : interactions) {
    if (!data.item_index.contains(it.item_id)) {
      data.item_index.emplace(it.item_id, data.n_items());
      data.items.push_back(it.item_id);
    }
  }

  // Per-user chronological event lists, carrying the global split window.
  struct Event {
    int item;
    std::int64_t ts;
    int window;  // 0 train, 1 valid, 2 test
  };
  std::unordered_map<std::string, std::vector<Event>> by_user;
  std::vector<std::string> user_order;
  for (std::size_t i = 0; i < interactions.size(); ++i) {
    const Interaction& it = interactions[i];
    int window = i < split.train_end ? 0 : (i < split.valid_end ? 1 : 2);
    auto [pos, inserted] = by_user.try_emplace(it.user_id);
    if (inserted) user_order.push_back(it.user_id);
    pos->second.push_back({data.item_index.at(it.item_id), it.timestamp, window});
  }

  auto take_history = [&](const std::vector<Event>& ev, std::size_t upto, bool train_only) {
    std::vector<int> hist;
    for (std::size_t k = 0; k < upto; ++k) {
      if (train_only && ev[k].window != 0) continue;
      hist.push_back(ev[k].item);
    }
    if (static_cast<int>(hist.size()) > opts.max_history)
      hist.erase(hist.begin(), hist.end() - opts.max_history);
    return hist;
  };

  for (const std::string& uid : user_order) {
    const auto& ev = by_user.at(uid);
    std::size_t seq_no = 0;
    for (std::size_t t = 0; t < ev.size(); ++t) {
      // Train targets see only prior in-window items; valid/test targets see
      // everything earlier.
      std::vector<int> hist = take_history(ev, t, ev[t].window == 0);
      if (static_cast<int>(hist.size()) < opts.min_history) continue;
      UserSequence s;
      s.user_id = uid;
      s.id = uid + "#" + std::to_string(seq_no++);
      s.history = std::move(hist);
      s.target = ev[t].item;
      s.target_ts = ev[t].ts;
      switch (ev[t].window) {
        case 0: data.train.push_back(std::move(s)); break;
        case 1: data.valid.push_back(std::move(s)); break;
        default: data.test.push_back(std::move(s)); break;
      }
    }
  }

  auto by_time = [](const UserSequence& a, const UserSequence& b) {
    if (a.target_ts != b.target_ts) return a.target_ts < b.target_ts;
    return a.id < b.id;
  };
  std::sort(data.train.begin(), data.train.end(), by_time);
  std::sort(data.valid.begin(), data.valid.end(), by_time);
  std::sort(data.test.begin(), data.test.end(), by_time);

  if (data.train.empty()) throw FatalError("no training sequences after windowing");
  return data;
}

namespace {

void save_sequences(const std::vector<UserSequence>& seqs, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FatalError("cannot write " + path);
  for (const UserSequence& s : seqs) {
    out << s.id << '\t' << s.user_id << '\t';
    for (std::size_t i = 0; i < s.history.size(); ++i) {
      if (i) out << ' ';
      out << s.history[i];
    }
    out << '\t' << s.target << '\t' << s.target_ts << '\n';
  }
}

std::vector<UserSequence> load_sequences(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FatalError("cannot read " + path);
  std::vector<UserSequence> seqs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    UserSequence s;
    std::string hist;
    std::getline(ls, s.id, '\t');
    std::getline(ls, s.user_id, '\t');
    std::getline(ls, hist, '\t');
    std::string tgt, ts;
    std::getline(ls, tgt, '\t');
    std::getline(ls, ts, '\t');
    std::istringstream hs(hist);
    int item;
    while (hs >> item) s.history.push_back(item);
    s.target = std::stoi(tgt);
    s.target_ts = std::stoll(ts);
    seqs.push_back(std::move(s));
  }
  return seqs;
}

}  // namespace

void save_dataset(const Dataset& data, const std::string& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream cat(dir + "/catalog.tsv");
    if (!cat) throw FatalError("cannot write catalog in " + dir);
    for (int i = 0; i < data.n_items(); ++i) cat << data.items[i] << '\t' << i << '\n';
  }
  save_sequences(data.train, dir + "/train.tsv");
  save_sequences(data.valid, dir + "/valid.tsv");
  save_sequences(data.test, dir + "/test.tsv");
}

Dataset load_dataset(const std::string& dir) {
  Dataset data;
  std::ifstream cat(dir + "/catalog.tsv");
  if (!cat) throw FatalError("cannot read catalog in " + dir);
  std::string line;
  while (std::getline(cat, line)) {
    if (line.empty()) continue;
    auto tab = line.find('\t');
    std::string item = line.substr(0, tab);
    data.item_index.emplace(item, data.n_items());
    data.items.push_back(item);
  }
  data.train = load_sequences(dir + "/train.tsv");
  data.valid = load_sequences(dir + "/valid.tsv");
  data.test = load_sequences(dir + "/test.tsv");
  return data;
}

}  // namespace influprune
