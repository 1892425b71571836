#pragma once

// Experiment orchestration: the run configuration, the run manifest, and the
// pipeline stages (pretrain, prune, stage 1, stage 2, ablation, search
// comparison, report) with manifest-driven resume.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "safs/data.hpp"
#include "safs/error.hpp"
#include "safs/hpo.hpp"
#include "safs/network.hpp"
#include "safs/pruning.hpp"
#include "safs/rng.hpp"
#include "safs/search.hpp"
#include "safs/training.hpp"

namespace safs::experiment {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline constexpr std::string_view kCodeVersion = "0.1.0";

struct ModelConfig {
  std::string arch = "lenet5";
  std::vector<std::size_t> layers;  // MLP widths, input first
};

struct DataConfig {
  std::string source = "mnist";        // "mnist" or "synthetic"
  std::string dir;                     // IDX directory; SAFS_DATA_DIR overrides it
  std::size_t val_size = 6000;         // held out from the training file
  std::size_t train_size = 0;          // pretraining examples, 0 = all remaining
  std::size_t finetune_size = 0;       // fine-tuning examples, 0 = train_size
  std::size_t test_size = 0;           // 0 = whole test file
  std::size_t synthetic_per_class = 60;  // synthetic source only
};

struct PretrainConfig {
  int epochs = 20;
  std::size_t batch_size = 64;
  double learning_rate = 0.1;
};

struct PruningConfig {
  double ratio = 0.99;
  pruning::Scope scope = pruning::Scope::per_layer;
};

// Baseline fine-tuning recipe (vanilla and stage1-only runs) and the
// optimizer settings of stage-1 candidate evaluation.
struct FinetuneConfig {
  int epochs = 5;
  std::size_t batch_size = 64;
  double learning_rate = 0.1;
};

struct Stage1Config {
  search::Algorithm algorithm = search::Algorithm::lahc;
  std::size_t budget = 20;
  std::size_t history_length = 3;
  int fidelity_epochs = 3;
  bool random_init = false;
};

struct Stage2Config {
  std::size_t budget = 10;
  int epochs = 5;
  std::size_t batch_size = 64;
  bool kfold = false;
  std::size_t folds = 3;
  double lr_min = 1e-4;
  double lr_max = 1e-1;
};

struct CompareConfig {
  std::vector<search::Algorithm> algorithms{search::Algorithm::lahc, search::Algorithm::sa, search::Algorithm::rs};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t budget = 20;
  int fidelity_epochs = 1;
};

struct ExperimentConfig {
  ModelConfig model;
  std::uint64_t seed = 0;
  DataConfig data;
  PretrainConfig pretrain;
  PruningConfig pruning;
  FinetuneConfig finetune;
  Stage1Config stage1;
  Stage2Config stage2;
  CompareConfig compare;
  bool ablation = false;
  std::string output_dir = "runs/default";

  void validate() const {
    network::architecture_from_string(model.arch);
    if (model.arch == "mlp" && model.layers.size() < 2) throw ContractError("config: model.layers needs >= 2 widths for mlp");
    if (data.source != "mnist" && data.source != "synthetic")
      throw ContractError("config: data.source must be 'mnist' or 'synthetic'");
    if (data.val_size < 1) throw ContractError("config: data.val_size must be >= 1");
    if (!(pruning.ratio >= 0.0 && pruning.ratio < 1.0)) throw ContractError("config: pruning.ratio must lie in [0, 1)");
    if (pretrain.epochs < 1 || finetune.epochs < 1 || stage2.epochs < 1 || stage1.fidelity_epochs < 1 ||
        compare.fidelity_epochs < 1)
      throw ContractError("config: epoch counts must be >= 1");
    if (pretrain.batch_size < 1 || finetune.batch_size < 1 || stage2.batch_size < 1)
      throw ContractError("config: batch sizes must be >= 1");
    if (stage1.budget < 1 || stage2.budget < 1 || compare.budget < 1) throw ContractError("config: budgets must be >= 1");
    if (stage1.history_length < 1) throw ContractError("config: stage1.history_length must be >= 1");
    if (stage2.kfold && stage2.folds < 2) throw ContractError("config: stage2.folds must be >= 2");
    if (!(stage2.lr_min > 0 && stage2.lr_min <= stage2.lr_max)) throw ContractError("config: need 0 < lr_min <= lr_max");
    if (!(pretrain.learning_rate > 0 && finetune.learning_rate > 0)) throw ContractError("config: learning rates must be > 0");
    if (compare.algorithms.empty() || compare.seeds.empty())
      throw ContractError("config: compare needs at least one algorithm and one seed");
  }
};

// ---------------------------------------------------------------------------
// JSON (de)serialization. Unknown keys are rejected.

namespace detail {

inline void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw FormatError("config: '" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) throw FormatError("config: unknown key '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError("config: '" + (where.empty() ? std::string(key) : where + "." + key) + "' has the wrong type");
  }
}

inline std::string hex(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
  json algs = json::array();
  for (auto a : c.compare.algorithms) algs.push_back(std::string(search::to_string(a)));
  return {
      {"model", {{"arch", c.model.arch}, {"layers", c.model.layers}}},
      {"seed", c.seed},
      {"data",
       {{"source", c.data.source},
        {"dir", c.data.dir},
        {"val_size", c.data.val_size},
        {"train_size", c.data.train_size},
        {"finetune_size", c.data.finetune_size},
        {"test_size", c.data.test_size},
        {"synthetic_per_class", c.data.synthetic_per_class}}},
      {"pretrain",
       {{"epochs", c.pretrain.epochs}, {"batch_size", c.pretrain.batch_size}, {"learning_rate", c.pretrain.learning_rate}}},
      {"pruning", {{"ratio", c.pruning.ratio}, {"scope", std::string(pruning::to_string(c.pruning.scope))}}},
      {"finetune",
       {{"epochs", c.finetune.epochs}, {"batch_size", c.finetune.batch_size}, {"learning_rate", c.finetune.learning_rate}}},
      {"stage1",
       {{"algorithm", std::string(search::to_string(c.stage1.algorithm))},
        {"budget", c.stage1.budget},
        {"history_length", c.stage1.history_length},
        {"fidelity_epochs", c.stage1.fidelity_epochs},
        {"random_init", c.stage1.random_init}}},
      {"stage2",
       {{"budget", c.stage2.budget},
        {"epochs", c.stage2.epochs},
        {"batch_size", c.stage2.batch_size},
        {"kfold", c.stage2.kfold},
        {"folds", c.stage2.folds},
        {"lr_min", c.stage2.lr_min},
        {"lr_max", c.stage2.lr_max}}},
      {"compare",
       {{"algorithms", algs},
        {"seeds", c.compare.seeds},
        {"budget", c.compare.budget},
        {"fidelity_epochs", c.compare.fidelity_epochs}}},
      {"ablation", c.ablation},
      {"output_dir", c.output_dir},
  };
}

// Missing keys keep their defaults.
inline ExperimentConfig config_from_json(const json& j) {
  using detail::check_keys;
  using detail::read;
  ExperimentConfig c;
  check_keys(j, {"model", "seed", "data", "pretrain", "pruning", "finetune", "stage1", "stage2", "compare", "ablation",
                 "output_dir"},
             "");
  read(j, "seed", c.seed, "");
  read(j, "ablation", c.ablation, "");
  read(j, "output_dir", c.output_dir, "");
  if (j.contains("model")) {
    const auto& m = j["model"];
    check_keys(m, {"arch", "layers"}, "model");
    read(m, "arch", c.model.arch, "model");
    read(m, "layers", c.model.layers, "model");
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    check_keys(d, {"source", "dir", "val_size", "train_size", "finetune_size", "test_size", "synthetic_per_class"}, "data");
    read(d, "source", c.data.source, "data");
    read(d, "dir", c.data.dir, "data");
    read(d, "val_size", c.data.val_size, "data");
    read(d, "train_size", c.data.train_size, "data");
    read(d, "finetune_size", c.data.finetune_size, "data");
    read(d, "test_size", c.data.test_size, "data");
    read(d, "synthetic_per_class", c.data.synthetic_per_class, "data");
  }
  if (j.contains("pretrain")) {
    const auto& p = j["pretrain"];
    check_keys(p, {"epochs", "batch_size", "learning_rate"}, "pretrain");
    read(p, "epochs", c.pretrain.epochs, "pretrain");
    read(p, "batch_size", c.pretrain.batch_size, "pretrain");
    read(p, "learning_rate", c.pretrain.learning_rate, "pretrain");
  }
  if (j.contains("pruning")) {
    const auto& p = j["pruning"];
    check_keys(p, {"ratio", "scope"}, "pruning");
    read(p, "ratio", c.pruning.ratio, "pruning");
    std::string scope(pruning::to_string(c.pruning.scope));
    read(p, "scope", scope, "pruning");
    c.pruning.scope = pruning::scope_from_string(scope);
  }
  if (j.contains("finetune")) {
    const auto& f = j["finetune"];
    check_keys(f, {"epochs", "batch_size", "learning_rate"}, "finetune");
    read(f, "epochs", c.finetune.epochs, "finetune");
    read(f, "batch_size", c.finetune.batch_size, "finetune");
    read(f, "learning_rate", c.finetune.learning_rate, "finetune");
  }
  if (j.contains("stage1")) {
    const auto& s = j["stage1"];
    check_keys(s, {"algorithm", "budget", "history_length", "fidelity_epochs", "random_init"}, "stage1");
    std::string alg(search::to_string(c.stage1.algorithm));
    read(s, "algorithm", alg, "stage1");
    c.stage1.algorithm = search::algorithm_from_string(alg);
    read(s, "budget", c.stage1.budget, "stage1");
    read(s, "history_length", c.stage1.history_length, "stage1");
    read(s, "fidelity_epochs", c.stage1.fidelity_epochs, "stage1");
    read(s, "random_init", c.stage1.random_init, "stage1");
  }
  if (j.contains("stage2")) {
    const auto& s = j["stage2"];
    check_keys(s, {"budget", "epochs", "batch_size", "kfold", "folds", "lr_min", "lr_max"}, "stage2");
    read(s, "budget", c.stage2.budget, "stage2");
    read(s, "epochs", c.stage2.epochs, "stage2");
    read(s, "batch_size", c.stage2.batch_size, "stage2");
    read(s, "kfold", c.stage2.kfold, "stage2");
    read(s, "folds", c.stage2.folds, "stage2");
    read(s, "lr_min", c.stage2.lr_min, "stage2");
    read(s, "lr_max", c.stage2.lr_max, "stage2");
  }
  if (j.contains("compare")) {
    const auto& s = j["compare"];
    check_keys(s, {"algorithms", "seeds", "budget", "fidelity_epochs"}, "compare");
    if (s.contains("algorithms")) {
      std::vector<std::string> names;
      read(s, "algorithms", names, "compare");
      c.compare.algorithms.clear();
      for (const auto& n : names) c.compare.algorithms.push_back(search::algorithm_from_string(n));
    }
    read(s, "seeds", c.compare.seeds, "compare");
    read(s, "budget", c.compare.budget, "compare");
    read(s, "fidelity_epochs", c.compare.fidelity_epochs, "compare");
  }
  c.validate();
  return c;
}

inline ExperimentConfig parse_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config " + path.string());
  std::stringstream s;
  s << in.rdbuf();
  return parse_config(s.str());
}

// Applies "a.b.c=value" to a config; value is parsed as JSON, else taken as a string.
inline ExperimentConfig apply_overrides(const ExperimentConfig& base, const std::vector<std::string>& assignments) {
  json j = to_json(base);
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) throw FormatError("override '" + a + "' is not of the form key=value");
    std::string pointer = "/" + a.substr(0, eq);
    std::replace(pointer.begin(), pointer.end(), '.', '/');
    const std::string raw = a.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const nlohmann::json::parse_error&) {
      value = raw;
    }
    j[json::json_pointer(pointer)] = value;
  }
  return config_from_json(j);
}

// FNV-1a of the serialized configuration, excluding the output directory.
inline std::string config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  return detail::hex(fnv1a(j.dump()));
}

// ---------------------------------------------------------------------------
// Run manifest

struct StageRecord {
  std::string key;  // hash of the configuration the stage depends on
  std::string started;
  std::string finished;
  std::vector<std::string> artifacts;  // relative to the run directory
  json metrics = json::object();
};

struct RunManifest {
  std::string config_hash;
  std::string code_version{kCodeVersion};
  std::string created;
  std::string updated;
  json config = json::object();
  std::map<std::string, StageRecord> stages;
  json final_metrics = json::object();

  json to_json() const {
    json s = json::object();
    for (const auto& [name, r] : stages)
      s[name] = {{"key", r.key}, {"started", r.started}, {"finished", r.finished}, {"artifacts", r.artifacts},
                 {"metrics", r.metrics}};
    return {{"config_hash", config_hash}, {"code_version", code_version}, {"created", created}, {"updated", updated},
            {"config", config}, {"stages", s}, {"final_metrics", final_metrics}};
  }

  static RunManifest from_json(const json& j) {
    RunManifest m;
    m.config_hash = j.value("config_hash", "");
    m.code_version = j.value("code_version", "");
    m.created = j.value("created", "");
    m.updated = j.value("updated", "");
    m.config = j.value("config", json::object());
    m.final_metrics = j.value("final_metrics", json::object());
    if (j.contains("stages"))
      for (const auto& [name, r] : j["stages"].items())
        m.stages[name] = {r.value("key", ""), r.value("started", ""), r.value("finished", ""),
                          r.value("artifacts", std::vector<std::string>{}), r.value("metrics", json::object())};
    return m;
  }

  // Artifacts listed by completed stages that are missing on disk.
  std::vector<std::string> missing_artifacts(const fs::path& dir) const {
    std::vector<std::string> missing;
    for (const auto& [name, r] : stages)
      for (const auto& a : r.artifacts)
        if (!fs::exists(dir / a)) missing.push_back(a);
    return missing;
  }
};

inline constexpr const char* kManifestFile = "manifest.json";

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

inline json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline std::optional<RunManifest> load_manifest(const fs::path& dir) {
  if (!fs::exists(dir / kManifestFile)) return std::nullopt;
  return RunManifest::from_json(read_json(dir / kManifestFile));
}

// ---------------------------------------------------------------------------
// Data

struct Workspace {
  std::shared_ptr<const data::Dataset> train_file;
  std::shared_ptr<const data::Dataset> test_file;
  data::Split pretrain;  // dense training examples
  data::Split finetune;  // fine-tuning examples (a prefix of pretrain)
  data::Split val;       // held out from the training file
  data::Split test;
};

// SAFS_DATA_DIR wins over the configured directory.
inline fs::path resolve_data_dir(const ExperimentConfig& c) {
  if (const char* env = std::getenv("SAFS_DATA_DIR"); env && *env) return env;
  return c.data.dir;
}

inline data::Dataset synthetic_images(const ExperimentConfig& c, std::uint64_t seed, std::size_t per_class) {
  const bool lenet = c.model.arch == "lenet5";
  const std::size_t dims = lenet ? 28 * 28 : c.model.layers.front();
  const int classes = lenet ? 10 : static_cast<int>(c.model.layers.back());
  auto d = data::synthetic_blobs(per_class, classes, dims, 1.0, seed);
  if (lenet) d.sample_shape = {1, 28, 28};
  return d;
}

inline Workspace prepare_data(const ExperimentConfig& c) {
  Workspace w;
  if (c.data.source == "mnist") {
    const fs::path dir = resolve_data_dir(c);
    if (dir.empty()) throw ContractError("data: no MNIST directory (set data.dir or SAFS_DATA_DIR)");
    auto m = data::load_mnist(dir);
    w.train_file = m.train;
    w.test_file = m.test;
  } else {
    w.train_file = std::make_shared<const data::Dataset>(synthetic_images(c, c.seed, c.data.synthetic_per_class));
    w.test_file = std::make_shared<const data::Dataset>(
        synthetic_images(c, stream_seed(c.seed, "synthetic-test"), std::max<std::size_t>(1, c.data.synthetic_per_class / 3)));
  }
  const std::size_t n = w.train_file->size();
  if (c.data.val_size >= n) throw ContractError("data: val_size must be smaller than the training file");
  auto all = data::Split::all(w.train_file);
  Rng rng = make_rng(c.seed, "folds");
  shuffle(all.indices, rng);
  w.val = {w.train_file, {all.indices.end() - static_cast<std::ptrdiff_t>(c.data.val_size), all.indices.end()}};
  const data::Split rest{w.train_file, {all.indices.begin(), all.indices.end() - static_cast<std::ptrdiff_t>(c.data.val_size)}};
  w.pretrain = c.data.train_size ? rest.head(c.data.train_size) : rest;
  w.finetune = c.data.finetune_size ? w.pretrain.head(c.data.finetune_size) : w.pretrain;
  const auto test_all = data::Split::all(w.test_file);
  w.test = c.data.test_size ? test_all.head(c.data.test_size) : test_all;
  return w;
}

// ---------------------------------------------------------------------------
// Stage helpers

inline network::Model build_model(const ExperimentConfig& c) {
  network::ModelSpec spec;
  spec.arch = network::architecture_from_string(c.model.arch);
  spec.layer_sizes = c.model.layers;
  return network::build(spec, stream_seed(c.seed, "pretrain", {0}));
}

inline training::TrainConfig finetune_recipe(const ExperimentConfig& c, int epochs, std::uint64_t seed) {
  training::TrainConfig t;
  t.epochs = epochs;
  t.batch_size = c.finetune.batch_size;
  t.learning_rate = c.finetune.learning_rate;
  t.optimizer = training::OptimizerSpec::of(training::OptimizerKind::sgd);
  t.seed = seed;
  return t;
}

inline hpo::TrialSettings trial_settings(const ExperimentConfig& c) {
  return {c.stage2.epochs, c.stage2.batch_size, stream_seed(c.seed, "stage2", {1})};
}

inline hpo::ConfigSpace config_space(const ExperimentConfig& c) {
  hpo::ConfigSpace s;
  s.lr_min = c.stage2.lr_min;
  s.lr_max = c.stage2.lr_max;
  return s;
}

inline json chromosome_json(const search::Chromosome& c) {
  json a = json::array();
  for (auto g : c.genes) a.push_back(std::string(activations::to_string(g)));
  return a;
}

inline search::Chromosome chromosome_from_json(const json& j) {
  search::Chromosome c;
  for (const auto& g : j) c.genes.push_back(activations::operator_from_string(g.get<std::string>()));
  return c;
}

inline json scales_json(const std::vector<network::Scale>& s) {
  json a = json::array();
  for (const auto& p : s) a.push_back({{"alpha", p.alpha}, {"beta", p.beta}});
  return a;
}

inline json trial_config_json(const hpo::TrialConfig& t) {
  return {{"lr", t.learning_rate},
          {"scheduler", std::string(training::to_string(t.scheduler))},
          {"optimizer", std::string(training::to_string(t.optimizer))}};
}

inline std::string history_csv(const training::FitHistory& h) {
  std::ostringstream s;
  h.write_csv(s);
  return s.str();
}

inline std::string gradient_flow_csv(const training::FitHistory& h) {
  std::ostringstream s;
  h.write_gradient_flow_csv(s);
  return s.str();
}

// Test accuracy of a fine-tuning run; a diverged run scores 0.
struct FinetuneOutcome {
  double test_acc = 0.0;
  double val_acc = 0.0;
  bool diverged = false;
  std::optional<training::TrainResult> result;
};

// Stage-2 outcome for one chromosome: the incumbent trial and its test accuracy.
struct Stage2Outcome {
  hpo::HpoResult hpo;
  double test_acc = 0.0;
};

// ---------------------------------------------------------------------------
// Runner

class Runner {
 public:
  Runner(ExperimentConfig config, std::ostream& log = std::clog)
      : cfg_(std::move(config)), dir_(cfg_.output_dir), log_(log) {
    cfg_.validate();
    fs::create_directories(dir_);
    if (auto m = load_manifest(dir_)) {
      manifest_ = std::move(*m);
    } else {
      manifest_.created = detail::utc_now();
    }
    manifest_.config_hash = config_hash(cfg_);
    manifest_.code_version = std::string(kCodeVersion);
    manifest_.config = to_json(cfg_);
  }

  const ExperimentConfig& config() const noexcept { return cfg_; }
  const fs::path& dir() const noexcept { return dir_; }
  const RunManifest& manifest() const noexcept { return manifest_; }

  // Forces the named stages to run again even when their artifacts are current.
  void force(std::vector<std::string> stages) { forced_ = std::move(stages); }

  // Per-stage dependency key: a hash over the config sections the stage reads.
  std::string stage_key(std::string_view stage) const {
    const json c = to_json(cfg_);
    json k = {{"model", c["model"]}, {"seed", c["seed"]}, {"data", c["data"]}, {"pretrain", c["pretrain"]}};
    if (stage != "pretrain") k["pruning"] = c["pruning"];
    if (stage == "stage1" || stage == "stage2" || stage == "ablation") {
      k["finetune_batch"] = c["finetune"]["batch_size"];
      k["finetune_lr"] = c["finetune"]["learning_rate"];
      k["stage1"] = c["stage1"];
    }
    if (stage == "stage2" || stage == "ablation") k["stage2"] = c["stage2"];
    if (stage == "ablation") k["finetune"] = c["finetune"];
    if (stage == "compare") {
      k["compare"] = c["compare"];
      k["finetune"] = c["finetune"];
      k["stage1"] = c["stage1"];
    }
    return detail::hex(fnv1a(k.dump()));
  }

  // True when the stage completed under the current key and its artifacts exist.
  bool is_current(const std::string& stage) const {
    if (std::find(forced_.begin(), forced_.end(), stage) != forced_.end()) return false;
    const auto it = manifest_.stages.find(stage);
    if (it == manifest_.stages.end() || it->second.key != stage_key(stage) || it->second.finished.empty()) return false;
    for (const auto& a : it->second.artifacts)
      if (!fs::exists(dir_ / a)) return false;
    return true;
  }

  void pretrain() {
    if (skip("pretrain")) return;
    run_stage("pretrain", [&] { pretrain_body(); });
  }

  void prune() {
    pretrain();
    if (skip("prune")) return;
    run_stage("prune", [&] { prune_body(); });
  }

  void stage1() {
    prune();
    if (skip("stage1")) return;
    run_stage("stage1", [&] { stage1_body(); });
  }

  void stage2() {
    stage1();
    if (skip("stage2")) return;
    run_stage("stage2", [&] { stage2_body(); });
  }

  void pipeline() {
    stage2();
    if (cfg_.ablation) ablate();
    report();
  }

  // The five ablation columns: dense, vanilla pruning, stage 1 only, stage 2
  // only (default operator with learned scales and tuned hyperparameters), and
  // both stages.
  void ablate() {
    stage2();
    if (skip("ablation")) return;
    run_stage("ablation", [&] { ablate_body(); });
  }

  // Every algorithm in compare.algorithms under every seed in compare.seeds, on
  // the same pruned snapshot and fidelity.
  void compare_search() {
    prune();
    if (skip("compare")) return;
    run_stage("compare", [&] { compare_search_body(); });
  }

  void report() { write_report(dir_); }

  // Summary JSON and plottable CSVs built only from persisted artifacts.
  static void write_report(const fs::path& dir) {
    const auto manifest = load_manifest(dir);
    if (!manifest) throw ContractError("report: no manifest in " + dir.string());
    std::vector<std::string> missing = manifest->missing_artifacts(dir);
    for (const char* required : {"pretrain.json", "prune.json"})
      if (!fs::exists(dir / required) && std::find(missing.begin(), missing.end(), required) == missing.end())
        missing.push_back(required);
    if (!missing.empty()) {
      std::string names;
      for (const auto& m : missing) names += (names.empty() ? "" : ", ") + m;
      throw ContractError("report: missing artifacts: " + names);
    }
    const json pre = read_json(dir / "pretrain.json");
    const json pr = read_json(dir / "prune.json");
    json summary = {{"config_hash", manifest->config_hash},
                    {"code_version", manifest->code_version},
                    {"dense_test_acc", pre["dense_test_acc"]},
                    {"pruning",
                     {{"ratio", pr["ratio"]},
                      {"scope", pr["scope"]},
                      {"total", pr["total"]},
                      {"nonzero", pr["nonzero"]},
                      {"compression_ratio", pr["compression_ratio"]},
                      {"compression", compression_label(pr["compression_ratio"].get<double>())},
                      {"pruned_test_acc", pr["pruned_test_acc"]}}}};
    if (fs::exists(dir / "stage1.json")) {
      const json s1 = read_json(dir / "stage1.json");
      summary["stage1"] = {{"chromosome", s1["chromosome"]}, {"best_fitness", s1["best_fitness"]}};
    }
    if (fs::exists(dir / "stage2.json")) {
      const json s2 = read_json(dir / "stage2.json");
      summary["stage2"] = {{"config", s2["config"]}, {"scales", s2["scales"]}, {"val_acc", s2["val_acc"]},
                           {"test_acc", s2["test_acc"]}};
    }
    if (fs::exists(dir / "ablation.json")) {
      const json ab = read_json(dir / "ablation.json");
      summary["ablation"] = {{"dense", ab["dense"]}, {"vanilla", ab["vanilla"]}, {"stage1_only", ab["stage1_only"]},
                             {"stage2_only", ab["stage2_only"]}, {"combined", ab["combined"]}};
    }
    write_json(dir / "report/summary.json", summary);

    const std::vector<std::pair<std::string, std::string>> runs = {
        {"pretrain", "pretrain"}, {"vanilla", "vanilla"}, {"stage1_only", "stage1_only"},
        {"stage2_only", "stage2_only"}, {"safs", "stage2"}};
    std::string curves = "run,epoch,train_loss,train_acc,val_acc,lr,grad_flow\n";
    std::string flow;
    for (const auto& [run, prefix] : runs) {
      if (fs::exists(dir / (prefix + "_history.csv"))) curves += prefixed_rows(run, read_text(dir / (prefix + "_history.csv")));
      if (run != "pretrain" && fs::exists(dir / (prefix + "_gradient_flow.csv")))
        flow += activation_flow(run, read_text(dir / (prefix + "_gradient_flow.csv")), flow.empty());
    }
    write_text(dir / "report/curves.csv", curves);
    if (!flow.empty()) write_text(dir / "report/gradient_flow.csv", flow);
  }

 private:
  void pretrain_body() {
    const auto started = detail::utc_now();
    const auto& w = workspace();
    auto model = build_model(cfg_);
    training::TrainConfig t;
    t.epochs = cfg_.pretrain.epochs;
    t.batch_size = cfg_.pretrain.batch_size;
    t.learning_rate = cfg_.pretrain.learning_rate;
    t.seed = stream_seed(cfg_.seed, "pretrain", {1});
    log_ << "pretrain: " << w.pretrain.size() << " examples, " << t.epochs << " epochs\n";
    auto r = training::pretrain(model, w.pretrain, t, &w.val, [this](const training::EpochRecord& e) {
      log_ << "  epoch " << e.epoch << " loss " << e.train_loss << " val " << e.val_acc << '\n';
    });
    const double test_acc = training::evaluate(model, w.test).accuracy;
    network::save_snapshot(r.snapshot, dir_ / "dense.snap");
    write_text(dir_ / "pretrain_history.csv", history_csv(r.history));
    write_text(dir_ / "pretrain_gradient_flow.csv", gradient_flow_csv(r.history));
    const json metrics = {{"dense_test_acc", test_acc}, {"dense_val_acc", r.history.epochs.back().val_acc},
                          {"train_examples", w.pretrain.size()}, {"epochs", t.epochs}};
    write_json(dir_ / "pretrain.json", metrics);
    log_ << "pretrain: dense test accuracy " << test_acc << '\n';
    finish("pretrain", started, {"dense.snap", "pretrain_history.csv", "pretrain_gradient_flow.csv", "pretrain.json"},
           metrics);
  }

  void prune_body() {
    const auto started = detail::utc_now();
    const auto dense = network::load_snapshot(dir_ / "dense.snap");
    const auto mask = pruning::magnitude_prune(dense, cfg_.pruning.ratio, cfg_.pruning.scope);
    auto model = network::Model::from_snapshot(dense);
    pruning::apply_mask(model, mask);
    const auto rep = pruning::sparsity_report(model, mask);
    network::save_snapshot(model.snapshot(mask), dir_ / "pruned.snap");
    json layers = json::object();
    for (const auto& e : mask.entries) layers[e.name] = {{"kept", e.kept()}, {"total", e.keep.size()}};
    const json metrics = {{"ratio", cfg_.pruning.ratio},
                          {"scope", std::string(pruning::to_string(cfg_.pruning.scope))},
                          {"total", rep.total},
                          {"nonzero", rep.nonzero},
                          {"pruning_ratio", rep.pruning_ratio},
                          {"compression_ratio", rep.compression_ratio},
                          {"pruned_test_acc", training::evaluate(model, workspace().test).accuracy},
                          {"layers", layers}};
    write_json(dir_ / "prune.json", metrics);
    log_ << "prune: kept " << rep.nonzero << "/" << rep.total << " weights, compression " << rep.compression_ratio
         << "x, test accuracy " << metrics["pruned_test_acc"].get<double>() << '\n';
    finish("prune", started, {"pruned.snap", "prune.json"}, metrics);
  }

  void stage1_body() {
    const auto started = detail::utc_now();
    const auto snap = network::load_snapshot(dir_ / "pruned.snap");
    const auto& mask = *snap.mask;
    const auto& w = workspace();
    search::SearchSettings s;
    s.algorithm = cfg_.stage1.algorithm;
    s.iterations = cfg_.stage1.budget;
    s.history_length = cfg_.stage1.history_length;
    s.random_init = cfg_.stage1.random_init;
    const auto fidelity = finetune_recipe(cfg_, cfg_.stage1.fidelity_epochs, stream_seed(cfg_.seed, "stage1", {1}));
    Rng rng = make_rng(cfg_.seed, "stage1");
    auto r = search::run_search(objective(snap, mask, fidelity, w), snap.ops.size(), s, rng);
    std::ostringstream trace;
    r.trace.write_jsonl(trace);
    write_text(dir_ / "stage1_trace.jsonl", trace.str());
    const json metrics = {{"algorithm", std::string(search::to_string(s.algorithm))},
                          {"chromosome", chromosome_json(r.best)},
                          {"best_fitness", r.best_fitness},
                          {"evaluations", r.trace.records.size()}};
    write_json(dir_ / "stage1.json", metrics);
    log_ << "stage1: best [" << r.best.str() << "] fitness " << r.best_fitness << '\n';
    finish("stage1", started, {"stage1_trace.jsonl", "stage1.json"}, metrics);
  }

  void stage2_body() {
    const auto started = detail::utc_now();
    const auto snap = network::load_snapshot(dir_ / "pruned.snap");
    const auto chrom = chromosome_from_json(read_json(dir_ / "stage1.json")["chromosome"]);
    auto out = run_hpo(snap, chrom, "stage2");
    const auto& best = out.hpo.best_trial();
    std::ostringstream trials;
    hpo::write_trials_jsonl(out.hpo.trials, trials);
    write_text(dir_ / "stage2_trials.jsonl", trials.str());
    network::save_snapshot(*best.snapshot, dir_ / "safs.snap");
    write_text(dir_ / "stage2_history.csv", history_csv(best.history));
    write_text(dir_ / "stage2_gradient_flow.csv", gradient_flow_csv(best.history));
    const json metrics = {{"chromosome", chromosome_json(chrom)},
                          {"best_trial", best.index},
                          {"config", trial_config_json(best.config)},
                          {"scales", scales_json(best.scales)},
                          {"val_acc", best.val_acc},
                          {"fitness", best.fitness},
                          {"test_acc", out.test_acc}};
    write_json(dir_ / "stage2.json", metrics);
    log_ << "stage2: best trial " << best.index << " val " << best.val_acc << " test " << out.test_acc << '\n';
    manifest_.final_metrics["safs_test_acc"] = out.test_acc;
    finish("stage2", started, {"stage2_trials.jsonl", "safs.snap", "stage2_history.csv", "stage2_gradient_flow.csv",
                               "stage2.json"},
           metrics);
  }

  void ablate_body() {
    const auto started = detail::utc_now();
    const auto snap = network::load_snapshot(dir_ / "pruned.snap");
    const auto& mask = *snap.mask;
    const auto chrom = chromosome_from_json(read_json(dir_ / "stage1.json")["chromosome"]);
    const auto recipe = finetune_recipe(cfg_, cfg_.finetune.epochs, stream_seed(cfg_.seed, "finetune"));
    const search::Chromosome relu = search::uniform_chromosome(snap.ops.size(), activations::OperatorId::ReLU);
    std::vector<std::string> artifacts;

    auto baseline = [&](const std::string& name, const search::Chromosome& c) {
      log_ << "ablation: " << name << '\n';
      FinetuneOutcome o = finetune_and_test(snap, mask, c, recipe);
      if (o.result) {
        network::save_snapshot(o.result->snapshot, dir_ / (name + ".snap"));
        write_text(dir_ / (name + "_history.csv"), history_csv(o.result->history));
        write_text(dir_ / (name + "_gradient_flow.csv"), gradient_flow_csv(o.result->history));
        artifacts.insert(artifacts.end(), {name + ".snap", name + "_history.csv", name + "_gradient_flow.csv"});
      }
      return o;
    };
    const auto vanilla = baseline("vanilla", relu);
    const auto s1 = baseline("stage1_only", chrom);
    log_ << "ablation: stage2_only\n";
    const auto s2 = run_hpo(snap, relu, "stage2_only");
    {
      std::ostringstream trials;
      hpo::write_trials_jsonl(s2.hpo.trials, trials);
      write_text(dir_ / "stage2_only_trials.jsonl", trials.str());
      const auto& b = s2.hpo.best_trial();
      network::save_snapshot(*b.snapshot, dir_ / "stage2_only.snap");
      write_text(dir_ / "stage2_only_history.csv", history_csv(b.history));
      write_text(dir_ / "stage2_only_gradient_flow.csv", gradient_flow_csv(b.history));
      artifacts.insert(artifacts.end(), {"stage2_only_trials.jsonl", "stage2_only.snap", "stage2_only_history.csv",
                                         "stage2_only_gradient_flow.csv"});
    }
    const json metrics = {
        {"dense", read_json(dir_ / "pretrain.json")["dense_test_acc"]},
        {"vanilla", vanilla.test_acc},
        {"stage1_only", s1.test_acc},
        {"stage2_only", s2.test_acc},
        {"combined", read_json(dir_ / "stage2.json")["test_acc"]},
        {"diverged", {{"vanilla", vanilla.diverged}, {"stage1_only", s1.diverged}}},
        {"finetune_epochs", {{"baselines", cfg_.finetune.epochs}, {"stage2", cfg_.stage2.epochs}}},
    };
    write_json(dir_ / "ablation.json", metrics);
    artifacts.push_back("ablation.json");
    log_ << "ablation: " << metrics.dump() << '\n';
    manifest_.final_metrics["ablation"] = metrics;
    finish("ablation", started, artifacts, metrics);
  }

  void compare_search_body() {
    const auto started = detail::utc_now();
    const auto snap = network::load_snapshot(dir_ / "pruned.snap");
    const auto& mask = *snap.mask;
    const auto& w = workspace();
    std::vector<std::string> artifacts;
    std::ostringstream merged;
    merged << "iteration,algorithm,seed,best\n";
    merged.precision(17);
    json summary = json::array();
    for (const auto alg : cfg_.compare.algorithms) {
      for (auto seed : cfg_.compare.seeds) {
        search::SearchSettings s;
        s.algorithm = alg;
        s.iterations = cfg_.compare.budget;
        s.history_length = cfg_.stage1.history_length;
        s.random_init = cfg_.stage1.random_init;
        const auto fidelity = finetune_recipe(cfg_, cfg_.compare.fidelity_epochs, stream_seed(seed, "stage1", {1}));
        Rng rng = make_rng(seed, "stage1");
        log_ << "compare: " << search::to_string(alg) << " seed " << seed << '\n';
        const auto r = search::run_search(objective(snap, mask, fidelity, w), snap.ops.size(), s, rng);
        const std::string name =
            "compare/trace_" + std::string(search::to_string(alg)) + "_seed" + std::to_string(seed) + ".jsonl";
        std::ostringstream trace;
        r.trace.write_jsonl(trace);
        write_text(dir_ / name, trace.str());
        artifacts.push_back(name);
        for (const auto& rec : r.trace.records)
          merged << rec.iter << ',' << search::to_string(alg) << ',' << seed << ',' << rec.best << '\n';
        summary.push_back({{"algorithm", std::string(search::to_string(alg))}, {"seed", seed},
                           {"best_fitness", r.best_fitness}, {"chromosome", chromosome_json(r.best)}});
      }
    }
    write_text(dir_ / "compare/merged.csv", merged.str());
    write_json(dir_ / "compare/summary.json", summary);
    artifacts.insert(artifacts.end(), {"compare/merged.csv", "compare/summary.json"});
    finish("compare", started, artifacts, {{"traces", summary.size()}});
  }

  static std::string compression_label(double ratio) {
    std::ostringstream s;
    s << std::llround(ratio) << 'x';
    return s.str();
  }

  // CSV body lines (header dropped), each prefixed with "run,".
  static std::string prefixed_rows(const std::string& run, const std::string& csv) {
    std::istringstream in(csv);
    std::string line, out;
    std::getline(in, line);
    while (std::getline(in, line))
      if (!line.empty()) out += run + "," + line + "\n";
    return out;
  }

  // Per-weight-layer gradient flow re-labelled per activation layer: layer i
  // feeds activation i, and the output layer (feeding none) is dropped.
  static std::string activation_flow(const std::string& run, const std::string& csv, bool header) {
    std::istringstream in(csv);
    std::string line, out;
    std::getline(in, line);
    const auto split = [](const std::string& s) {
      std::vector<std::string> cells;
      std::stringstream ss(s);
      std::string cell;
      while (std::getline(ss, cell, ',')) cells.push_back(cell);
      return cells;
    };
    const std::size_t layers = split(line).size() - 2;
    if (header) {
      out += "run,epoch";
      for (std::size_t i = 0; i + 1 < layers; ++i) out += ",act" + std::to_string(i);
      out += ",global\n";
    }
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto cells = split(line);
      out += run + "," + cells[0];
      for (std::size_t i = 1; i < layers; ++i) out += "," + cells[i];
      out += "," + cells.back() + "\n";
    }
    return out;
  }

  const Workspace& workspace() {
    if (!ws_) ws_ = prepare_data(cfg_);
    return *ws_;
  }

  bool skip(const std::string& stage) {
    if (!is_current(stage)) return false;
    log_ << stage << ": up to date, skipped\n";
    return true;
  }

  template <typename Fn>
  void run_stage(const std::string& stage, Fn&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      save_manifest();
      throw std::runtime_error("stage '" + stage + "' failed: " + e.what());
    }
  }

  void finish(const std::string& stage, const std::string& started, std::vector<std::string> artifacts, json metrics) {
    manifest_.stages[stage] = {stage_key(stage), started, detail::utc_now(), std::move(artifacts), std::move(metrics)};
    save_manifest();
  }

  void save_manifest() {
    manifest_.updated = detail::utc_now();
    write_json(dir_ / kManifestFile, manifest_.to_json());
  }

  search::Objective objective(const network::NetworkSnapshot& snap, const pruning::PruningMask& mask,
                              const training::TrainConfig& fidelity, const Workspace& w) {
    return [this, &snap, &mask, fidelity, &w](const search::Chromosome& c) {
      const auto s = search::evaluate_candidate(c, snap, mask, fidelity, w.finetune, &w.val);
      log_ << "  [" << c.str() << "] loss " << s.fitness << " val " << s.val_acc << '\n';
      return s;
    };
  }

  FinetuneOutcome finetune_and_test(const network::NetworkSnapshot& snap, const pruning::PruningMask& mask,
                                    const search::Chromosome& chrom, const training::TrainConfig& recipe) {
    FinetuneOutcome o;
    const auto& w = workspace();
    try {
      auto r = training::fine_tune(snap, mask, {chrom, std::nullopt}, recipe, false, w.finetune, &w.val);
      o.val_acc = r.history.epochs.back().val_acc;
      o.test_acc = training::evaluate(network::Model::from_snapshot(r.snapshot), w.test).accuracy;
      o.result = std::move(r);
    } catch (const DivergedTraining& e) {
      log_ << "  diverged: " << e.what() << '\n';
      o.diverged = true;
    }
    log_ << "  test accuracy " << o.test_acc << '\n';
    return o;
  }

  // Random-search HPO over fine-tuning hyperparameters with trainable scales.
  // The sampler stream is shared by every caller so different chromosomes see
  // the same configurations.
  Stage2Outcome run_hpo(const network::NetworkSnapshot& snap, const search::Chromosome& chrom, const std::string& tag) {
    const auto& w = workspace();
    const auto& mask = *snap.mask;
    const auto settings = trial_settings(cfg_);
    hpo::Evaluator ev = [&](const hpo::TrialConfig& c, std::size_t i) {
      hpo::Trial t;
      if (cfg_.stage2.kfold) {
        const double acc = hpo::cross_validate(c, chrom, snap, mask, w.finetune, cfg_.stage2.folds, settings);
        t.index = i;
        t.config = c;
        t.val_acc = acc;
        t.fitness = 1.0 - acc;
      } else {
        t = hpo::evaluate_trial(c, i, chrom, snap, mask, w.finetune, w.val, settings);
      }
      log_ << "  " << tag << " trial " << i << " lr " << c.learning_rate << " " << training::to_string(c.scheduler)
           << " " << training::to_string(c.optimizer) << " val " << t.val_acc << '\n';
      return t;
    };
    Rng rng = make_rng(cfg_.seed, "stage2");
    Stage2Outcome out{hpo::hpo_loop(config_space(cfg_), ev, cfg_.stage2.budget, rng), 0.0};
    auto& best = out.hpo.trials[out.hpo.best];
    if (!best.snapshot) {
      // Cross-validated fitness carries no model: retrain the incumbent on the holdout.
      const double fitness = best.fitness, val = best.val_acc;
      best = hpo::evaluate_trial(best.config, best.index, chrom, snap, mask, w.finetune, w.val, settings);
      best.fitness = fitness;
      best.val_acc = val;
    }
    if (!best.snapshot) throw ContractError(tag + ": incumbent trial diverged; no model to evaluate");
    out.test_acc = hpo::final_evaluate(best, w.test);
    return out;
  }

  ExperimentConfig cfg_;
  fs::path dir_;
  std::ostream& log_;
  RunManifest manifest_;
  std::optional<Workspace> ws_;
  std::vector<std::string> forced_;
};

}  // namespace safs::experiment
