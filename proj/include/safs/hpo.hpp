#pragma once

// Stage-2 hyperparameter optimization: configuration space, trials that
// fine-tune with trainable activation scales, and a random-search minimizer.

#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "safs/chromosome.hpp"
#include "safs/data.hpp"
#include "safs/error.hpp"
#include "safs/network.hpp"
#include "safs/pruning.hpp"
#include "safs/rng.hpp"
#include "safs/training.hpp"

namespace safs::hpo {

using training::OptimizerKind;
using training::SchedulerKind;

struct ConfigSpace {
  double lr_min = 1e-4;
  double lr_max = 1e-1;
  std::vector<SchedulerKind> schedulers{training::kSchedulerKinds.begin(), training::kSchedulerKinds.end()};
  std::vector<OptimizerKind> optimizers{training::kOptimizerKinds.begin(), training::kOptimizerKinds.end()};

  void validate() const {
    if (!(lr_min > 0 && lr_min <= lr_max)) throw ContractError("config space: need 0 < lr_min <= lr_max");
    if (schedulers.empty() || optimizers.empty()) throw ContractError("config space: empty categorical");
  }
};

struct TrialConfig {
  double learning_rate = 1e-2;
  SchedulerKind scheduler = SchedulerKind::constant;
  OptimizerKind optimizer = OptimizerKind::sgd;
  friend bool operator==(const TrialConfig&, const TrialConfig&) = default;
};

// lr = 10^u with u uniform on [log10 lr_min, log10 lr_max]; categoricals uniform.
inline TrialConfig sample(const ConfigSpace& space, Rng& rng) {
  space.validate();
  const double lo = std::log10(space.lr_min), hi = std::log10(space.lr_max);
  TrialConfig c;
  c.learning_rate = std::clamp(std::pow(10.0, lo + (hi - lo) * uniform01(rng)), space.lr_min, space.lr_max);
  c.scheduler = space.schedulers[uniform_index(rng, space.schedulers.size())];
  c.optimizer = space.optimizers[uniform_index(rng, space.optimizers.size())];
  return c;
}

struct Trial {
  std::size_t index = 0;
  TrialConfig config;
  double fitness = 1.0;  // 1 - validation accuracy
  double val_acc = 0.0;
  bool diverged = false;
  double wall_seconds = 0.0;
  std::vector<network::Scale> scales;  // learned (alpha, beta) per slot
  std::optional<network::NetworkSnapshot> snapshot;
  training::FitHistory history;
};

// Inner-problem settings shared by every trial.
struct TrialSettings {
  int epochs = 3;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

inline training::TrainConfig train_config(const TrialConfig& c, const TrialSettings& s, std::size_t trial_index) {
  training::TrainConfig t;
  t.epochs = s.epochs;
  t.batch_size = s.batch_size;
  t.learning_rate = c.learning_rate;
  t.scheduler.kind = c.scheduler;
  t.optimizer = training::OptimizerSpec::of(c.optimizer);
  t.seed = stream_seed(s.seed, "trial", {trial_index});
  return t;
}

// Fine-tunes the pruned snapshot under `chromosome` with trainable scales
// starting from (1, 1) and scores 1 - validation accuracy.
inline Trial evaluate_trial(const TrialConfig& config, std::size_t trial_index, const search::Chromosome& chromosome,
                            const network::NetworkSnapshot& snapshot, const pruning::PruningMask& mask,
                            const data::Split& train, const data::Split& validation, const TrialSettings& settings) {
  if (!data::disjoint(train, validation)) throw ContractError("evaluate_trial: train and validation splits overlap");
  const auto t0 = std::chrono::steady_clock::now();
  Trial trial;
  trial.index = trial_index;
  trial.config = config;
  try {
    auto r = training::fine_tune(snapshot, mask, {chromosome, std::nullopt}, train_config(config, settings, trial_index),
                                 true, train, &validation);
    trial.val_acc = r.history.epochs.back().val_acc;
    trial.fitness = 1.0 - trial.val_acc;
    trial.scales = network::Model::from_snapshot(r.snapshot).scales();
    trial.snapshot = std::move(r.snapshot);
    trial.history = std::move(r.history);
  } catch (const DivergedTraining& e) {
    std::clog << "hpo: trial " << trial_index << " diverged: " << e.what() << '\n';
    trial.diverged = true;
    trial.fitness = 1.0;
    trial.val_acc = 0.0;
  }
  trial.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return trial;
}

// Mean validation accuracy of one configuration over a k-fold plan of `pool`.
inline double cross_validate(const TrialConfig& config, const search::Chromosome& chromosome,
                             const network::NetworkSnapshot& snapshot, const pruning::PruningMask& mask,
                             const data::Split& pool, std::size_t k, const TrialSettings& settings) {
  const auto plan = data::kfold(pool.size(), k, stream_seed(settings.seed, "cv"));
  double acc = 0.0;
  for (std::size_t f = 0; f < k; ++f) {
    const auto tr = data::subset(pool, plan.train[f]);
    const auto va = data::subset(pool, plan.validation[f]);
    acc += evaluate_trial(config, f, chromosome, snapshot, mask, tr, va, settings).val_acc;
  }
  return acc / static_cast<double>(k);
}

using Evaluator = std::function<Trial(const TrialConfig&, std::size_t trial_index)>;

struct HpoResult {
  std::size_t best = 0;  // index into trials
  std::vector<Trial> trials;
  const Trial& best_trial() const { return trials.at(best); }
};

// Random-search minimizer: exactly `budget` trials; earliest trial wins ties.
// With keep_snapshots=false only the incumbent's snapshot is retained.
inline HpoResult hpo_loop(const ConfigSpace& space, const Evaluator& evaluator, std::size_t budget, Rng& rng,
                          bool keep_snapshots = false) {
  if (budget < 1) throw ContractError("hpo_loop: budget must be >= 1");
  HpoResult out;
  for (std::size_t i = 0; i < budget; ++i) {
    const TrialConfig c = sample(space, rng);
    Trial t = evaluator(c, i);
    t.index = i;
    if (!std::isfinite(t.fitness)) t.fitness = 1.0;
    const bool better = i == 0 || t.fitness < out.trials[out.best].fitness;
    if (better && !keep_snapshots && i > 0) out.trials[out.best].snapshot.reset();
    if (!better && !keep_snapshots) t.snapshot.reset();
    out.trials.push_back(std::move(t));
    if (better) out.best = i;
  }
  return out;
}

// Test accuracy of the trial's trained network.
inline double final_evaluate(const Trial& best, const data::Split& test) {
  if (!best.snapshot) throw ContractError("final_evaluate: trial carries no trained snapshot");
  return training::evaluate(network::Model::from_snapshot(*best.snapshot), test).accuracy;
}

inline void write_trials_jsonl(const std::vector<Trial>& trials, std::ostream& out, bool include_wall = true) {
  for (const auto& t : trials) {
    nlohmann::json j;
    j["trial"] = t.index;
    j["lr"] = t.config.learning_rate;
    j["scheduler"] = std::string(training::to_string(t.config.scheduler));
    j["optimizer"] = std::string(training::to_string(t.config.optimizer));
    j["fitness"] = t.fitness;
    j["val_acc"] = t.val_acc;
    if (include_wall) j["wall_seconds"] = t.wall_seconds;
    out << j.dump() << '\n';
  }
}

}  // namespace safs::hpo
