#include "influprune/pipeline.hpp"

#include "influprune/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

namespace influprune {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct MissingPrereq : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

TrainConfig parse_train(const json& j, TrainConfig base = {}) {
  base.epochs = j.value("epochs", base.epochs);
  base.batch_size = j.value("batch_size", base.batch_size);
  base.learning_rate = j.value("learning_rate", base.learning_rate);
  base.weight_decay = j.value("weight_decay", base.weight_decay);
  base.seed = j.value("seed", base.seed);
  base.newton_polish = j.value("newton_polish", base.newton_polish);
  if (base.epochs < 0 || base.batch_size < 1 || base.learning_rate <= 0 || base.weight_decay < 0)
    throw FatalError("invalid training config");
  return base;
}

std::string hash_hex(std::uint64_t h) {
  std::ostringstream out;
  out << std::hex << h;
  return out.str();
}

std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FatalError("cannot hash missing file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return hash_hex(fnv1a64(buf.str()));
}

}  // namespace

PipelineConfig load_pipeline_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FatalError("cannot read config: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FatalError(std::string("config parse error: ") + e.what());
  }

  PipelineConfig cfg;
  cfg.canonical_json = j.dump();

  if (!j.contains("dataset")) throw FatalError("config needs a dataset section");
  const json& d = j.at("dataset");
  if (d.contains("synthetic")) {
    const json& s = d.at("synthetic");
    SyntheticSpec spec;
    spec.n_users = s.value("n_users", spec.n_users);
    spec.n_items = s.value("n_items", spec.n_items);
    spec.density = s.value("density", spec.density);
    spec.drift = s.value("drift", spec.drift);
    spec.seed = s.value("seed", spec.seed);
    cfg.synthetic = spec;
  } else if (d.contains("path")) {
    cfg.data_path = d.at("path").get<std::string>();
    std::string fmt = d.value("format", "csv");
    if (fmt == "csv") cfg.format = IngestFormat::Csv;
    else if (fmt == "jsonl") cfg.format = IngestFormat::Jsonl;
    else throw FatalError("unknown ingest format: " + fmt);
  } else {
    throw FatalError("dataset section needs either a path or a synthetic spec");
  }
  if (d.contains("ratios")) {
    auto r = d.at("ratios").get<std::vector<double>>();
    if (r.size() != 3) throw FatalError("ratios must have 3 entries");
    cfg.split.ratios = {r[0], r[1], r[2]};
  }
  if (d.contains("rating_threshold")) {
    if (d.at("rating_threshold").is_null()) cfg.split.rating_threshold.reset();
    else cfg.split.rating_threshold = d.at("rating_threshold").get<double>();
  }
  cfg.sequences.min_history = d.value("min_history", cfg.sequences.min_history);
  cfg.sequences.max_history = d.value("max_history", cfg.sequences.max_history);

  if (j.contains("surrogate")) {
    const json& s = j.at("surrogate");
    cfg.surrogate.embed_dim = s.value("embed_dim", cfg.surrogate.embed_dim);
    cfg.surrogate.convex_mode = s.value("convex_mode", cfg.surrogate.convex_mode);
    cfg.surrogate.init_scale = s.value("init_scale", cfg.surrogate.init_scale);
    cfg.surrogate.seed = s.value("seed", cfg.surrogate.seed);
    if (s.contains("train")) cfg.surrogate_train = parse_train(s.at("train"), cfg.surrogate_train);
  }
  if (j.contains("influence")) {
    const json& s = j.at("influence");
    cfg.hvp.iterations = s.value("iterations", cfg.hvp.iterations);
    cfg.hvp.damping = s.value("damping", cfg.hvp.damping);
    cfg.hvp.scale = s.value("scale", cfg.hvp.scale);
    cfg.hvp.repeats = s.value("repeats", cfg.hvp.repeats);
    cfg.hvp.batch = s.value("batch", cfg.hvp.batch);
    cfg.hvp.seed = s.value("seed", cfg.hvp.seed);
  }
  if (j.contains("target")) {
    const json& t = j.at("target");
    std::string arch = t.value("architecture", "mpce-large");
    if (arch == "mpce-large") cfg.target.arch = TargetArch::MpceLarge;
    else if (arch == "tiny-transformer") cfg.target.arch = TargetArch::TinyTransformer;
    else throw FatalError("unknown target architecture: " + arch);
    cfg.target.embed_dim = t.value("embed_dim", cfg.target.embed_dim);
    cfg.target.n_layers = t.value("n_layers", cfg.target.n_layers);
    cfg.target.max_positions = t.value("max_positions", cfg.target.max_positions);
    std::string subset = t.value("learnable_subset", "all");
    if (subset == "all") cfg.target.subset = LearnableSubset::All;
    else if (subset == "adapters-only") cfg.target.subset = LearnableSubset::AdaptersOnly;
    else throw FatalError("unknown learnable_subset: " + subset);
    cfg.target.adapter_rank = t.value("adapter_rank", cfg.target.adapter_rank);
    cfg.target.pretrain_fraction = t.value("pretrain_fraction", cfg.target.pretrain_fraction);
    cfg.target.init_scale = t.value("init_scale", cfg.target.init_scale);
    cfg.target.seed = t.value("seed", cfg.target.seed);
    if (t.contains("pretrain")) cfg.target_pretrain = parse_train(t.at("pretrain"), cfg.target_pretrain);
    if (t.contains("finetune")) cfg.target_finetune = parse_train(t.at("finetune"), cfg.target_finetune);
  }
  if (j.contains("selection")) {
    const json& s = j.at("selection");
    if (s.contains("ratio")) cfg.selection.ratio = s.at("ratio").get<double>();
    if (s.contains("count")) cfg.selection.count = s.at("count").get<std::size_t>();
    cfg.selection.n_groups = s.value("n_groups", cfg.selection.n_groups);
    cfg.selection.lambda = s.value("lambda", cfg.selection.lambda);
    cfg.selection.strategy = parse_strategy(s.value("strategy", "dealrec"));
    cfg.selection.seed = s.value("seed", cfg.selection.seed);
  }
  if (!cfg.selection.ratio && !cfg.selection.count) cfg.selection.ratio = 0.02;

  cfg.evaluation.selection = cfg.selection;
  cfg.evaluation.hvp = cfg.hvp;
  cfg.evaluation.finetune = cfg.target_finetune;
  cfg.evaluation.strategies = {Strategy::DealRec, Strategy::Random};
  cfg.evaluation.seeds = {1, 2, 3};
  if (j.contains("evaluation")) {
    const json& e = j.at("evaluation");
    if (e.contains("ks")) cfg.evaluation.ks = e.at("ks").get<std::vector<int>>();
    if (e.contains("seeds")) cfg.evaluation.seeds = e.at("seeds").get<std::vector<std::uint64_t>>();
    if (e.contains("strategies")) {
      cfg.evaluation.strategies.clear();
      for (const auto& name : e.at("strategies"))
        cfg.evaluation.strategies.push_back(parse_strategy(name.get<std::string>()));
    }
    cfg.evaluation.include_full_finetune = e.value("include_full", false);
  }
  if (j.contains("workdir")) cfg.workdir = j.at("workdir").get<std::string>();
  return cfg;
}

void override_seeds(PipelineConfig& cfg, std::uint64_t seed) {
  if (cfg.synthetic) cfg.synthetic->seed = seed;
  cfg.surrogate.seed = seed;
  cfg.surrogate_train.seed = seed;
  cfg.hvp.seed = seed;
  cfg.target.seed = seed;
  cfg.target_pretrain.seed = seed;
  cfg.target_finetune.seed = seed;
  cfg.selection.seed = seed;
  cfg.evaluation.selection.seed = seed;
  cfg.evaluation.hvp.seed = seed;
  cfg.evaluation.finetune.seed = seed;
  cfg.canonical_json += "#seed=" + std::to_string(seed);
}

namespace {

class StageRunner {
 public:
  StageRunner(const PipelineConfig& cfg, std::string workdir, bool force)
      : cfg_(cfg), dir_(std::move(workdir)), force_(force) {
    fs::create_directories(dir_);
    config_hash_ = hash_hex(fnv1a64(cfg_.canonical_json));
    std::ifstream in(manifest_path());
    if (in) {
      manifest_ = json::parse(in, nullptr, false);
      if (manifest_.is_discarded()) manifest_ = json::object();
    } else {
      manifest_ = json::object();
    }
    if (!manifest_.contains("stages")) manifest_["stages"] = json::object();
  }

  std::string path(const std::string& rel) const { return dir_ + "/" + rel; }

  void require(const std::string& rel, const std::string& producing_stage) {
    if (!fs::exists(path(rel)))
      throw MissingPrereq("missing artifact '" + rel + "': run the '" + producing_stage +
                          "' stage first");
    if (force_) return;
    const json& stages = manifest_.at("stages");
    if (stages.contains(producing_stage)) {
      std::string prev = stages.at(producing_stage).value("config_hash", "");
      if (!prev.empty() && prev != config_hash_)
        throw ConfigMismatch("config hash changed since '" + producing_stage +
                             "' ran; rerun it or pass --force");
    }
  }

  template <typename Fn>
  void run_stage(const std::string& name, const std::vector<std::string>& outputs, Fn&& body) {
    auto t0 = std::chrono::steady_clock::now();
    body();
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    json entry;
    entry["config_hash"] = config_hash_;
    entry["seconds"] = secs;
    entry["outputs"] = json::object();
    for (const std::string& rel : outputs) entry["outputs"][rel] = file_hash(path(rel));
    manifest_["stages"][name] = std::move(entry);
    std::ofstream out(manifest_path());
    out << manifest_.dump(2) << '\n';
    std::cout << "[" << name << "] done in " << secs << "s\n";
  }

  const PipelineConfig& cfg_;

 private:
  std::string manifest_path() const { return dir_ + "/manifest.json"; }

  std::string dir_;
  bool force_;
  std::string config_hash_;
  json manifest_;
};

void write_scores_jsonl(const std::string& path,
                        const std::vector<std::pair<std::string, double>>& scores,
                        const std::string& key) {
  std::ofstream out(path);
  if (!out) throw FatalError("cannot write " + path);
  for (const auto& [id, v] : scores) {
    json line = {{"user_id", id}, {key, v}};
    out << line.dump() << '\n';
  }
}

std::vector<std::pair<std::string, double>> read_scores_jsonl(const std::string& path,
                                                              const std::string& key) {
  std::ifstream in(path);
  if (!in) throw FatalError("cannot read " + path);
  std::vector<std::pair<std::string, double>> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    out.emplace_back(j.at("user_id").get<std::string>(), j.at(key).get<double>());
  }
  return out;
}

void stage_ingest(StageRunner& r) {
  r.run_stage("ingest", {"dataset/catalog.tsv", "dataset/train.tsv", "dataset/valid.tsv", "dataset/test.tsv"}, [&] {
    std::vector<Interaction> interactions;
    if (r.cfg_.synthetic) {
      interactions = generate_synthetic(*r.cfg_.synthetic);
    } else {
      IngestResult res = ingest_interactions(*r.cfg_.data_path, r.cfg_.format);
      if (res.interactions.empty())
        std::cerr << "warning: interaction file is empty\n";
      if (res.malformed > 0)
        std::cerr << "warning: " << res.malformed << " malformed rows skipped\n";
      interactions = std::move(res.interactions);
    }
    Dataset data = build_sequences(std::move(interactions), r.cfg_.split, r.cfg_.sequences);
    save_dataset(data, r.path("dataset"));
    std::cout << "  items=" << data.n_items() << " train=" << data.train.size()
              << " valid=" << data.valid.size() << " test=" << data.test.size() << '\n';
  });
}

void stage_train_surrogate(StageRunner& r) {
  r.require("dataset/train.tsv", "ingest");
  r.run_stage("train-surrogate", {"surrogate.ckpt", "surrogate_trace.json"}, [&] {
    Dataset data = load_dataset(r.path("dataset"));
    TrainTrace trace;
    SurrogateModel model =
        train_surrogate(data.train, data.n_items(), r.cfg_.surrogate, r.cfg_.surrogate_train, &trace);
    save_surrogate(model, r.path("surrogate.ckpt"));
    std::ofstream out(r.path("surrogate_trace.json"));
    out << json{{"epoch_loss", trace.epoch_loss}}.dump(2) << '\n';
    std::cout << "  train loss " << trace.epoch_loss.front() << " -> " << trace.epoch_loss.back()
              << '\n';
  });
}

void stage_score_influence(StageRunner& r) {
  r.require("dataset/train.tsv", "ingest");
  r.require("surrogate.ckpt", "train-surrogate");
  r.run_stage("score-influence", {"influence.jsonl", "influence_diagnostics.json"}, [&] {
    Dataset data = load_dataset(r.path("dataset"));
    SurrogateModel model = load_surrogate(r.path("surrogate.ckpt"));
    InfluenceEstimator est(model, data.train);
    InfluenceResult res = est.influence_scores(r.cfg_.hvp);
    write_scores_jsonl(r.path("influence.jsonl"), res.scores, "influence");
    std::ofstream out(r.path("influence_diagnostics.json"));
    out << json{{"iterate_norms", res.diagnostics.iterate_norms},
                {"scale_used", res.diagnostics.scale_used},
                {"retries", res.diagnostics.retries},
                {"solver_calls", res.solver_calls}}
               .dump(2)
        << '\n';
  });
}

void stage_score_effort(StageRunner& r) {
  r.require("dataset/train.tsv", "ingest");
  r.run_stage("score-effort", {"target_pretrained.ckpt", "effort.jsonl"}, [&] {
    Dataset data = load_dataset(r.path("dataset"));
    TrainTrace trace;
    TargetModel model = pretrain_target(data, r.cfg_.target, r.cfg_.target_pretrain, &trace);
    save_target(model, r.path("target_pretrained.ckpt"));
    EffortResult efforts = effort_scores(model, data.train);
    write_scores_jsonl(r.path("effort.jsonl"), efforts.efforts, "effort");
    std::cout << "  pretrain loss " << trace.epoch_loss.front() << " -> " << trace.epoch_loss.back()
              << '\n';
  });
}

void write_subset_json(const Subset& subset, const std::string& path) {
  json j;
  j["strategy"] = subset.strategy;
  j["seed"] = subset.seed;
  j["budget"] = subset.budget;
  j["selected"] = subset.selected;
  j["groups"] = json::array();
  for (const GroupTally& g : subset.groups)
    j["groups"].push_back({{"lo", g.lo}, {"hi", g.hi}, {"size", g.size}, {"taken", g.taken}});
  std::ofstream out(path);
  out << j.dump(2) << '\n';
}

void stage_select(StageRunner& r) {
  r.require("dataset/train.tsv", "ingest");
  Strategy strategy = r.cfg_.selection.strategy;
  if (strategy == Strategy::DealRec) {
    r.require("influence.jsonl", "score-influence");
    r.require("effort.jsonl", "score-effort");
  } else if (strategy != Strategy::Random) {
    r.require("surrogate.ckpt", "train-surrogate");
  }
  r.run_stage("select", {"subset.json"}, [&] {
    Dataset data = load_dataset(r.path("dataset"));
    Subset subset;
    if (strategy == Strategy::DealRec) {
      InfluenceResult influence = read_influence_jsonl(r.path("influence.jsonl"));
      EffortResult effort = read_effort_jsonl(r.path("effort.jsonl"));
      auto records = overall_scores(influence, effort, r.cfg_.selection.lambda, data.train.size());
      subset = coverage_select(records, r.cfg_.selection);
    } else if (strategy == Strategy::Random) {
      subset = baseline_select(strategy, nullptr, data.train, r.cfg_.selection);
    } else {
      SurrogateModel model = load_surrogate(r.path("surrogate.ckpt"));
      subset = baseline_select(strategy, &model, data.train, r.cfg_.selection);
    }
    write_subset_json(subset, r.path("subset.json"));
    std::cout << "  selected " << subset.selected.size() << " samples (" << subset.strategy << ")\n";
  });
}

void stage_finetune(StageRunner& r) {
  r.require("dataset/train.tsv", "ingest");
  r.require("subset.json", "select");
  r.require("target_pretrained.ckpt", "score-effort");
  r.run_stage("finetune", {"target_finetuned.ckpt"}, [&] {
    Dataset data = load_dataset(r.path("dataset"));
    Subset subset = read_subset_json(r.path("subset.json"));
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < data.train.size(); ++i) index.emplace(data.train[i].id, i);
    std::vector<UserSequence> samples;
    for (const std::string& id : subset.selected) {
      auto it = index.find(id);
      if (it == index.end()) throw FatalError("subset id not in train set: " + id);
      samples.push_back(data.train[it->second]);
    }
    TargetModel pretrained = load_target(r.path("target_pretrained.ckpt"));
    TrainTrace trace;
    TargetModel tuned = finetune_fewshot(pretrained, samples, r.cfg_.target_finetune, &trace);
    save_target(tuned, r.path("target_finetuned.ckpt"));
    std::cout << "  finetune loss " << trace.epoch_loss.front() << " -> " << trace.epoch_loss.back()
              << '\n';
  });
}

void stage_evaluate(StageRunner& r) {
  r.require("dataset/train.tsv", "ingest");
  r.require("surrogate.ckpt", "train-surrogate");
  r.require("target_pretrained.ckpt", "score-effort");
  bool needs_dealrec = std::any_of(r.cfg_.evaluation.strategies.begin(),
                                   r.cfg_.evaluation.strategies.end(),
                                   [](Strategy s) { return s == Strategy::DealRec; });
  if (needs_dealrec) {
    r.require("influence.jsonl", "score-influence");
    r.require("effort.jsonl", "score-effort");
  }
  r.run_stage("evaluate", {"report.json", "report.csv"}, [&] {
    Dataset data = load_dataset(r.path("dataset"));
    SurrogateModel surrogate = load_surrogate(r.path("surrogate.ckpt"));
    TargetModel pretrained = load_target(r.path("target_pretrained.ckpt"));
    InfluenceResult influence;
    EffortResult effort;
    if (needs_dealrec) {
      influence = read_influence_jsonl(r.path("influence.jsonl"));
      effort = read_effort_jsonl(r.path("effort.jsonl"));
    }
    EvalReport report = compare_selectors(data, surrogate, pretrained, influence, effort,
                                          r.cfg_.evaluation);
    std::ofstream(r.path("report.json")) << report_to_json(report) << '\n';
    std::ofstream(r.path("report.csv")) << report_to_csv(report);
    std::cout << report_to_table(report);
  });
}

void stage_validate(StageRunner& r) {
  r.run_stage("validate", {"validate.json"}, [&] {
    // Self-contained convex-toy oracle run: synthetic data, convex surrogate
    // trained to its regularized optimum, stochastic solve vs direct solve,
    // influence scores vs leave-one-out retraining.
    SyntheticSpec synth;
    synth.n_users = 200;
    synth.n_items = 50;
    synth.density = 0.2;
    synth.drift = 0.3;
    synth.seed = 11;
    SplitSpec split;
    split.rating_threshold.reset();
    SequenceOptions seq;
    seq.min_history = 2;
    Dataset data = build_sequences(generate_synthetic(synth), split, seq);

    SurrogateConfig scfg;
    scfg.embed_dim = 8;
    scfg.convex_mode = true;
    TrainConfig tcfg;
    tcfg.epochs = 15;
    tcfg.learning_rate = 0.5;
    tcfg.weight_decay = 0.01;
    tcfg.newton_polish = true;
    SurrogateModel model = train_surrogate(data.train, data.n_items(), scfg, tcfg);

    HvpConfig hvp = r.cfg_.hvp;
    hvp.damping = tcfg.weight_decay;
    InfluenceEstimator est(model, data.train);
    Vec vbar = est.average_gradient();
    Vec approx = est.estimate_ihvp(vbar, hvp);
    Vec exact = exact_ihvp_oracle(model, data.train, vbar, hvp.damping);
    double rel_err = (approx - exact).norm() / exact.norm();

    InfluenceResult scores = est.influence_scores(hvp);
    std::size_t n_probe = std::min<std::size_t>(30, data.train.size());
    std::vector<std::size_t> probes;
    std::mt19937_64 rng(13);
    std::vector<std::size_t> all(data.train.size());
    std::iota(all.begin(), all.end(), 0);
    std::shuffle(all.begin(), all.end(), rng);
    probes.assign(all.begin(), all.begin() + n_probe);
    LooResult loo = loo_oracle(data.train, data.n_items(), scfg, tcfg, probes);

    std::vector<double> predicted, actual;
    for (std::size_t k = 0; k < probes.size(); ++k) {
      predicted.push_back(scores.scores[probes[k]].second);
      actual.push_back(loo.risk_changes[k].second);
    }
    double rho = spearman(predicted, actual);

    std::cout << "ihvp relative error vs direct solve: " << rel_err << '\n';
    std::cout << "spearman(influence, leave-one-out risk change) over " << n_probe
              << " probes: " << rho << '\n';
    std::ofstream(r.path("validate.json"))
        << json{{"ihvp_relative_error", rel_err}, {"loo_spearman", rho}, {"probes", n_probe}}.dump(2)
        << '\n';
  });
}

}  // namespace

InfluenceResult read_influence_jsonl(const std::string& path) {
  InfluenceResult res;
  res.scores = read_scores_jsonl(path, "influence");
  return res;
}

EffortResult read_effort_jsonl(const std::string& path) {
  EffortResult res;
  res.efforts = read_scores_jsonl(path, "effort");
  return res;
}

Subset read_subset_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FatalError("cannot read " + path);
  json j = json::parse(in);
  Subset s;
  s.strategy = j.at("strategy").get<std::string>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.budget = j.at("budget").get<std::size_t>();
  s.selected = j.at("selected").get<std::vector<std::string>>();
  for (const auto& g : j.at("groups"))
    s.groups.push_back({g.at("lo").get<double>(), g.at("hi").get<double>(),
                        g.at("size").get<std::size_t>(), g.at("taken").get<std::size_t>()});
  return s;
}

int run_command(const std::string& command, const PipelineConfig& cfg, const std::string& workdir,
                bool force) {
  try {
    StageRunner runner(cfg, workdir, force);
    if (command == "ingest") stage_ingest(runner);
    else if (command == "train-surrogate") stage_train_surrogate(runner);
    else if (command == "score-influence") stage_score_influence(runner);
    else if (command == "score-effort") stage_score_effort(runner);
    else if (command == "select") stage_select(runner);
    else if (command == "finetune") stage_finetune(runner);
    else if (command == "evaluate") stage_evaluate(runner);
    else if (command == "validate") stage_validate(runner);
    else if (command == "all") {
      stage_ingest(runner);
      stage_train_surrogate(runner);
      stage_score_influence(runner);
      stage_score_effort(runner);
      stage_select(runner);
      stage_finetune(runner);
      stage_evaluate(runner);
    } else {
      std::cerr << "unknown command: " << command << '\n';
      return kExitFatal;
    }
    return 0;
  } catch (const MissingPrereq& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitMissingPrereq;
  } catch (const ConfigMismatch& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfigMismatch;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFatal;
  }
}

}  // namespace influprune
