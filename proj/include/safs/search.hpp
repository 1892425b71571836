#pragma once

// Stage-1 operator search: mutation, late-acceptance hill climbing, simulated
// annealing and random search over chromosomes, plus low-fidelity scoring.

#include <cmath>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "safs/activations.hpp"
#include "safs/chromosome.hpp"
#include "safs/data.hpp"
#include "safs/error.hpp"
#include "safs/network.hpp"
#include "safs/pruning.hpp"
#include "safs/rng.hpp"
#include "safs/training.hpp"

namespace safs::search {

using activations::OperatorId;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// Objective value of one candidate. val_acc is optional side information.
struct Score {
  double fitness = kInf;
  double val_acc = std::numeric_limits<double>::quiet_NaN();
  Score() = default;
  Score(double f, double v = std::numeric_limits<double>::quiet_NaN()) : fitness(f), val_acc(v) {}  // NOLINT
};

using Objective = std::function<Score(const Chromosome&)>;

inline Chromosome random_chromosome(std::size_t length, Rng& rng) {
  Chromosome c;
  c.genes.reserve(length);
  for (std::size_t i = 0; i < length; ++i) c.genes.push_back(activations::kCatalog[uniform_index(rng, activations::kCatalogSize)]);
  return c;
}

// Swap two distinct positions (skipped when L = 1), then redraw one position
// uniformly from the catalog.
inline Chromosome mutate(const Chromosome& parent, Rng& rng) {
  const std::size_t n = parent.size();
  if (n == 0) throw ContractError("mutate: empty chromosome");
  Chromosome child = parent;
  if (n > 1) {
    const std::size_t i = uniform_index(rng, n);
    std::size_t j = uniform_index(rng, n - 1);
    if (j >= i) ++j;
    std::swap(child.genes[i], child.genes[j]);
  }
  const std::size_t pos = uniform_index(rng, n);
  child.genes[pos] = activations::kCatalog[uniform_index(rng, activations::kCatalogSize)];
  return child;
}

struct TraceRecord {
  std::size_t iter = 0;
  Chromosome genes;
  double fitness = kInf;
  bool accepted = false;
  double best = kInf;
  double val_acc = std::numeric_limits<double>::quiet_NaN();
};

struct SearchTrace {
  std::vector<TraceRecord> records;
  std::size_t non_finite = 0;  // candidates whose objective was not finite

  void write_jsonl(std::ostream& out) const {
    for (const auto& r : records) {
      nlohmann::json j;
      j["iter"] = r.iter;
      auto genes = nlohmann::json::array();
      for (auto g : r.genes.genes) genes.push_back(std::string(activations::to_string(g)));
      j["genes"] = genes;
      j["fitness"] = std::isfinite(r.fitness) ? nlohmann::json(r.fitness) : nlohmann::json(nullptr);
      j["accepted"] = r.accepted;
      j["best"] = std::isfinite(r.best) ? nlohmann::json(r.best) : nlohmann::json(nullptr);
      if (std::isfinite(r.val_acc)) j["val_acc"] = r.val_acc;
      out << j.dump() << '\n';
    }
  }
};

struct SearchResult {
  Chromosome best;
  double best_fitness = kInf;
  SearchTrace trace;
};

namespace detail {
// Evaluates and records one candidate; non-finite values become +inf.
class Recorder {
 public:
  Recorder(const Objective& objective, SearchResult& result) : objective_(objective), result_(result) {}

  Score score(const Chromosome& c) {
    Score s = objective_(c);
    if (!std::isfinite(s.fitness)) {
      ++result_.trace.non_finite;
      std::clog << "search: non-finite fitness for [" << c.str() << "], treated as +inf\n";
      s.fitness = kInf;
    }
    return s;
  }

  void record(const Chromosome& c, const Score& s, bool accepted) {
    if (result_.trace.records.empty() || s.fitness < result_.best_fitness) {
      result_.best = c;
      result_.best_fitness = s.fitness;
    }
    result_.trace.records.push_back(
        {result_.trace.records.size(), c, s.fitness, accepted, result_.best_fitness, s.val_acc});
  }

 private:
  const Objective& objective_;
  SearchResult& result_;
};
}  // namespace detail

// Late-acceptance state: a ring of Lh fitness values seeded with the initial fitness.
struct LahcState {
  std::vector<double> history;
  Chromosome current;
  double current_fitness = kInf;
  std::size_t iteration = 0;

  static LahcState start(Chromosome init, double fitness, std::size_t history_length) {
    if (history_length < 1) throw ContractError("lahc: history length must be >= 1");
    return {std::vector<double>(history_length, fitness), std::move(init), fitness, 0};
  }

  // Accept iff candidate <= history[t mod Lh] or candidate <= current; the
  // slot then stores the (possibly updated) current fitness.
  bool consider(const Chromosome& candidate, double fitness) {
    const std::size_t slot = iteration % history.size();
    const bool accept = fitness <= history[slot] || fitness <= current_fitness;
    if (accept) {
      current = candidate;
      current_fitness = fitness;
    }
    history[slot] = current_fitness;
    ++iteration;
    return accept;
  }
};

inline SearchResult lahc_search(const Objective& objective, const Chromosome& init, std::size_t iterations,
                                std::size_t history_length, Rng& rng) {
  if (iterations < 1) throw ContractError("lahc_search: iterations must be >= 1");
  SearchResult result;
  detail::Recorder rec(objective, result);
  const Score s0 = rec.score(init);
  rec.record(init, s0, true);
  LahcState state = LahcState::start(init, s0.fitness, history_length);
  for (std::size_t t = 0; t < iterations; ++t) {
    Chromosome cand = mutate(state.current, rng);
    const Score s = rec.score(cand);
    const bool accepted = state.consider(cand, s.fitness);
    rec.record(cand, s, accepted);
  }
  return result;
}

// Greedy hill climbing with the same mutation stream: accept iff candidate <= current.
inline SearchResult hill_climb(const Objective& objective, const Chromosome& init, std::size_t iterations, Rng& rng) {
  if (iterations < 1) throw ContractError("hill_climb: iterations must be >= 1");
  SearchResult result;
  detail::Recorder rec(objective, result);
  Score cur = rec.score(init);
  rec.record(init, cur, true);
  Chromosome current = init;
  for (std::size_t t = 0; t < iterations; ++t) {
    Chromosome cand = mutate(current, rng);
    const Score s = rec.score(cand);
    const bool accepted = s.fitness <= cur.fitness;
    if (accepted) {
      current = cand;
      cur = s;
    }
    rec.record(cand, s, accepted);
  }
  return result;
}

struct AnnealingSchedule {
  std::optional<double> initial_temperature;  // estimated from probes when absent
  double cooling = 0.95;                      // geometric factor per iteration
  std::size_t probes = 3;                     // random chromosomes used for the estimate
};

// Metropolis acceptance: always for delta <= 0, else with probability exp(-delta/T).
inline bool metropolis_accept(double delta, double temperature, Rng& rng) {
  if (delta <= 0) return true;
  if (!(temperature > 0) || !std::isfinite(delta)) return false;
  return uniform01(rng) < std::exp(-delta / temperature);
}

// Simulated annealing. Temperature probes are drawn from the iteration budget,
// so the objective is called exactly iterations + 1 times.
inline SearchResult sa_search(const Objective& objective, const Chromosome& init, std::size_t iterations,
                              const AnnealingSchedule& schedule, Rng& rng) {
  if (iterations < 1) throw ContractError("sa_search: iterations must be >= 1");
  if (!(schedule.cooling > 0 && schedule.cooling <= 1)) throw ContractError("sa_search: cooling must lie in (0, 1]");
  SearchResult result;
  detail::Recorder rec(objective, result);
  Score cur = rec.score(init);
  rec.record(init, cur, true);
  Chromosome current = init;

  std::size_t t = 0;
  double temperature = 0.0;
  if (schedule.initial_temperature) {
    temperature = *schedule.initial_temperature;
  } else {
    double lo = cur.fitness, hi = cur.fitness;
    const std::size_t probes = std::min(schedule.probes, iterations);
    for (; t < probes; ++t) {
      Chromosome probe = random_chromosome(init.size(), rng);
      const Score s = rec.score(probe);
      rec.record(probe, s, false);
      if (std::isfinite(s.fitness)) {
        lo = std::min(lo, s.fitness);
        hi = std::max(hi, s.fitness);
      }
    }
    temperature = std::isfinite(hi - lo) ? hi - lo : 0.0;
  }
  for (; t < iterations; ++t) {
    Chromosome cand = mutate(current, rng);
    const Score s = rec.score(cand);
    const bool accepted = metropolis_accept(s.fitness - cur.fitness, temperature, rng);
    if (accepted) {
      current = cand;
      cur = s;
    }
    rec.record(cand, s, accepted);
    temperature *= schedule.cooling;
  }
  return result;
}

// Independent uniform chromosomes; `accepted` marks a new best.
inline SearchResult random_search(const Objective& objective, std::size_t length, std::size_t iterations, Rng& rng) {
  if (iterations < 1) throw ContractError("random_search: iterations must be >= 1");
  if (length < 1) throw ContractError("random_search: chromosome length must be >= 1");
  SearchResult result;
  detail::Recorder rec(objective, result);
  for (std::size_t t = 0; t < iterations; ++t) {
    Chromosome c = random_chromosome(length, rng);
    const Score s = rec.score(c);
    const bool improved = t == 0 || s.fitness < result.best_fitness;
    rec.record(c, s, improved);
  }
  return result;
}

enum class Algorithm { lahc, sa, rs };

inline std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::lahc: return "lahc";
    case Algorithm::sa: return "sa";
    case Algorithm::rs: return "rs";
  }
  return "?";
}

inline Algorithm algorithm_from_string(std::string_view s) {
  for (auto a : {Algorithm::lahc, Algorithm::sa, Algorithm::rs})
    if (to_string(a) == s) return a;
  throw FormatError("unknown search algorithm '" + std::string(s) + "'");
}

struct SearchSettings {
  Algorithm algorithm = Algorithm::lahc;
  std::size_t iterations = 20;
  std::size_t history_length = 3;
  AnnealingSchedule annealing;
  bool random_init = false;  // otherwise every gene starts as ReLU6
};

inline SearchResult run_search(const Objective& objective, std::size_t length, const SearchSettings& s, Rng& rng) {
  const Chromosome init =
      s.random_init ? random_chromosome(length, rng) : uniform_chromosome(length, OperatorId::ReLU6);
  switch (s.algorithm) {
    case Algorithm::lahc: return lahc_search(objective, init, s.iterations, s.history_length, rng);
    case Algorithm::sa: return sa_search(objective, init, s.iterations, s.annealing, rng);
    case Algorithm::rs: return random_search(objective, length, s.iterations, rng);
  }
  throw ContractError("run_search: unknown algorithm");
}

// Low-fidelity score of a chromosome on the pruned network: scales reset to
// (1, 1), fixed-mask training for fidelity.epochs, fitness = final-epoch
// training loss. The snapshot is not modified.
inline Score evaluate_candidate(const Chromosome& chromosome, const network::NetworkSnapshot& snapshot,
                                const pruning::PruningMask& mask, const training::TrainConfig& fidelity,
                                const data::Split& train, const data::Split* validation = nullptr) {
  if (fidelity.epochs < 1) throw ContractError("evaluate_candidate: fidelity must be >= 1 epoch");
  for (auto g : chromosome.genes)
    if (!activations::in_catalog(g)) throw ContractError("evaluate_candidate: gene outside the catalog");
  try {
    auto r = training::fine_tune(snapshot, mask, {chromosome, std::nullopt}, fidelity, false, train, validation);
    const auto& last = r.history.epochs.back();
    return {last.train_loss, last.val_acc};
  } catch (const DivergedTraining& e) {
    std::clog << "search: candidate [" << chromosome.str() << "] diverged: " << e.what() << '\n';
    return {kInf};
  }
}

}  // namespace safs::search
