#include "influprune/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace influprune {

namespace {

constexpr char kMagic[8] = {'I', 'P', 'C', 'K', 'P', 'T', '1', '\0'};

void write_i64(std::ofstream& out, std::int64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), 8);
}

std::int64_t read_i64(std::ifstream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<std::int64_t>(v);
}

void write_doubles(std::ofstream& out, const Vec& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    std::uint64_t bits;
    double d = v[i];
    std::memcpy(&bits, &d, 8);
    write_i64(out, static_cast<std::int64_t>(bits));
  }
}

Vec read_doubles(std::ifstream& in, std::int64_t n) {
  Vec v(n);
  for (std::int64_t i = 0; i < n; ++i) {
    auto bits = static_cast<std::uint64_t>(read_i64(in));
    double d;
    std::memcpy(&d, &bits, 8);
    v[i] = d;
  }
  if (!in) throw FatalError("checkpoint truncated");
  return v;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FatalError("cannot write checkpoint: " + path);
  out.write(kMagic, 8);
  return out;
}

std::ifstream open_in(const std::string& path, char expected_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FatalError("cannot read checkpoint: " + path);
  char magic[8], kind;
  in.read(magic, 8);
  in.read(&kind, 1);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw FatalError("bad checkpoint magic: " + path);
  if (kind != expected_kind) throw FatalError("checkpoint kind mismatch: " + path);
  return in;
}

}  // namespace

void save_surrogate(const SurrogateModel& model, const std::string& path) {
  std::ofstream out = open_out(path);
  out.put('S');
  out.put(model.convex_mode() ? 1 : 0);
  write_i64(out, model.n_items());
  write_i64(out, model.embed_dim());
  Vec flat(2L * model.n_items() * model.embed_dim());
  Eigen::Index off = 0;
  for (int i = 0; i < model.n_items(); ++i)
    for (int k = 0; k < model.embed_dim(); ++k) flat[off++] = model.input_table()(i, k);
  for (int i = 0; i < model.n_items(); ++i)
    for (int k = 0; k < model.embed_dim(); ++k) flat[off++] = model.output_table()(i, k);
  write_doubles(out, flat);
  if (!out) throw FatalError("failed writing checkpoint: " + path);
}

SurrogateModel load_surrogate(const std::string& path) {
  std::ifstream in = open_in(path, 'S');
  bool convex = in.get() == 1;
  std::int64_t n_items = read_i64(in);
  std::int64_t d = read_i64(in);
  if (n_items < 1 || d < 1) throw FatalError("bad checkpoint shape: " + path);
  Vec flat = read_doubles(in, 2 * n_items * d);
  Mat a(n_items, d), b(n_items, d);
  Eigen::Index off = 0;
  for (std::int64_t i = 0; i < n_items; ++i)
    for (std::int64_t k = 0; k < d; ++k) a(i, k) = flat[off++];
  for (std::int64_t i = 0; i < n_items; ++i)
    for (std::int64_t k = 0; k < d; ++k) b(i, k) = flat[off++];
  return SurrogateModel(std::move(a), std::move(b), convex);
}

void save_target(const TargetModel& model, const std::string& path) {
  std::ofstream out = open_out(path);
  out.put('T');
  const TargetConfig& cfg = model.config();
  out.put(cfg.arch == TargetArch::TinyTransformer ? 1 : 0);
  out.put(cfg.subset == LearnableSubset::AdaptersOnly ? 1 : 0);
  write_i64(out, model.n_items());
  write_i64(out, cfg.embed_dim);
  write_i64(out, cfg.n_layers);
  write_i64(out, cfg.max_positions);
  write_i64(out, cfg.adapter_rank);
  Vec params = model.all_params();
  write_i64(out, params.size());
  write_doubles(out, params);
  if (!out) throw FatalError("failed writing checkpoint: " + path);
}

TargetModel load_target(const std::string& path) {
  std::ifstream in = open_in(path, 'T');
  TargetConfig cfg;
  cfg.arch = in.get() == 1 ? TargetArch::TinyTransformer : TargetArch::MpceLarge;
  cfg.subset = in.get() == 1 ? LearnableSubset::AdaptersOnly : LearnableSubset::All;
  std::int64_t n_items = read_i64(in);
  cfg.embed_dim = static_cast<int>(read_i64(in));
  cfg.n_layers = static_cast<int>(read_i64(in));
  cfg.max_positions = static_cast<int>(read_i64(in));
  cfg.adapter_rank = static_cast<int>(read_i64(in));
  std::int64_t n_params = read_i64(in);
  if (n_items < 2 || cfg.embed_dim < 1 || n_params < 1) throw FatalError("bad checkpoint shape: " + path);
  Vec params = read_doubles(in, n_params);
  TargetModel model(static_cast<int>(n_items), cfg);
  model.set_all_params(params);
  return model;
}

}  // namespace influprune
