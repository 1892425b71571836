#pragma once

// Loss, optimizers, learning-rate schedules, dense pre-training, masked
// fine-tuning (optionally with trainable activation scales) and gradient flow.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "safs/data.hpp"
#include "safs/engine.hpp"
#include "safs/error.hpp"
#include "safs/network.hpp"
#include "safs/pruning.hpp"
#include "safs/rng.hpp"

namespace safs::training {

using engine::Tensor;

enum class SchedulerKind { constant, step, linear, cosine_annealing, exp_mod20, plateau, cosine_warm_restarts };

inline constexpr std::array<SchedulerKind, 7> kSchedulerKinds = {
    SchedulerKind::constant,  SchedulerKind::step,    SchedulerKind::linear,
    SchedulerKind::cosine_annealing, SchedulerKind::exp_mod20, SchedulerKind::plateau,
    SchedulerKind::cosine_warm_restarts,
};

inline std::string_view to_string(SchedulerKind k) {
  switch (k) {
    case SchedulerKind::constant: return "constant";
    case SchedulerKind::step: return "step";
    case SchedulerKind::linear: return "linear";
    case SchedulerKind::cosine_annealing: return "cosine-annealing";
    case SchedulerKind::exp_mod20: return "exp-mod20";
    case SchedulerKind::plateau: return "plateau";
    case SchedulerKind::cosine_warm_restarts: return "cosine-warm-restarts";
  }
  return "?";
}

inline SchedulerKind scheduler_from_string(std::string_view s) {
  for (auto k : kSchedulerKinds)
    if (to_string(k) == s) return k;
  throw FormatError("unknown scheduler kind '" + std::string(s) + "'");
}

struct SchedulerSpec {
  SchedulerKind kind = SchedulerKind::constant;
  // step
  int step_size = 5;
  double step_gamma = 0.5;
  // exp-mod20: scale * decay^(epoch % period), independent of the base rate
  double exp_scale = 0.001;
  double exp_decay = 0.5;
  int exp_period = 20;
  // plateau (reduce on plateau, relative threshold, minimizing the monitored loss)
  double plateau_factor = 0.05;
  int plateau_patience = 2;
  double plateau_threshold = 1e-4;
  double plateau_min_lr = 0.0;
  double plateau_eps = 1e-8;
  // cosine-warm-restarts (period counted in epochs)
  int restart_period = 12;
  double restart_min_lr = 5e-5;
  // cosine-annealing
  double cosine_min_lr = 0.0;

  friend bool operator==(const SchedulerSpec&, const SchedulerSpec&) = default;
};

struct ScheduleSignals {
  int total_epochs = 1;
  // Monitored loss after each completed epoch; only entries before the
  // queried epoch are read.
  std::span<const double> metrics{};
};

// Learning rate for `epoch` (0-based). Stateful kinds are replayed from the
// metric history, so the value is a pure function of the arguments.
inline double scheduler_lr(const SchedulerSpec& spec, int epoch, double base_lr, const ScheduleSignals& signals = {}) {
  if (epoch < 0) throw ContractError("scheduler_lr: negative epoch");
  const double pi = 3.141592653589793;
  const int total = std::max(1, signals.total_epochs);
  const int e_clamped = std::min(epoch, total - 1);
  switch (spec.kind) {
    case SchedulerKind::constant:
      return base_lr;
    case SchedulerKind::step:
      return base_lr * std::pow(spec.step_gamma, epoch / std::max(1, spec.step_size));
    case SchedulerKind::linear:
      return base_lr * static_cast<double>(total - e_clamped) / static_cast<double>(total);
    case SchedulerKind::cosine_annealing:
      return spec.cosine_min_lr +
             (base_lr - spec.cosine_min_lr) * (1.0 + std::cos(pi * e_clamped / static_cast<double>(total))) / 2.0;
    case SchedulerKind::exp_mod20:
      return spec.exp_scale * std::pow(spec.exp_decay, epoch % std::max(1, spec.exp_period));
    case SchedulerKind::cosine_warm_restarts: {
      const int t = epoch % std::max(1, spec.restart_period);
      return spec.restart_min_lr + (base_lr - spec.restart_min_lr) *
                                       (1.0 + std::cos(pi * t / static_cast<double>(spec.restart_period))) / 2.0;
    }
    case SchedulerKind::plateau: {
      double lr = base_lr;
      double best = std::numeric_limits<double>::infinity();
      int bad = 0;
      const auto seen = std::min<std::size_t>(static_cast<std::size_t>(epoch), signals.metrics.size());
      for (std::size_t i = 0; i < seen; ++i) {
        const double m = signals.metrics[i];
        if (m < best * (1.0 - spec.plateau_threshold)) {
          best = m;
          bad = 0;
        } else {
          ++bad;
        }
        if (bad > spec.plateau_patience) {
          const double next = std::max(lr * spec.plateau_factor, spec.plateau_min_lr);
          if (lr - next > spec.plateau_eps) lr = next;
          bad = 0;
        }
      }
      return lr;
    }
  }
  throw ContractError("scheduler_lr: unknown kind");
}

enum class OptimizerKind { sgd, sgd_momentum, adam };

inline constexpr std::array<OptimizerKind, 3> kOptimizerKinds = {OptimizerKind::sgd, OptimizerKind::sgd_momentum,
                                                                 OptimizerKind::adam};

inline std::string_view to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::sgd_momentum: return "sgd-momentum";
    case OptimizerKind::adam: return "adam";
  }
  return "?";
}

inline OptimizerKind optimizer_from_string(std::string_view s) {
  for (auto k : kOptimizerKinds)
    if (to_string(k) == s) return k;
  throw FormatError("unknown optimizer kind '" + std::string(s) + "'");
}

struct OptimizerSpec {
  OptimizerKind kind = OptimizerKind::sgd;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  // Defaults per kind: momentum 0.9 with weight decay 5e-4 for sgd-momentum.
  static OptimizerSpec of(OptimizerKind kind) {
    OptimizerSpec s;
    s.kind = kind;
    if (kind == OptimizerKind::sgd_momentum) s.weight_decay = 5e-4;
    return s;
  }

  void validate() const {
    if (momentum < 0 || momentum >= 1) throw ContractError("optimizer: momentum must lie in [0, 1)");
    if (weight_decay < 0) throw ContractError("optimizer: weight decay must be non-negative");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ContractError("optimizer: Adam betas must lie in [0, 1)");
    if (!(eps > 0)) throw ContractError("optimizer: eps must be positive");
  }

  friend bool operator==(const OptimizerSpec&, const OptimizerSpec&) = default;
};

struct TrainConfig {
  int epochs = 1;
  std::size_t batch_size = 64;
  double learning_rate = 0.1;
  SchedulerSpec scheduler;
  OptimizerSpec optimizer;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ContractError("train config: epochs must be >= 1");
    if (batch_size < 1) throw ContractError("train config: batch size must be >= 1");
    if (!(learning_rate > 0)) throw ContractError("train config: learning rate must be positive");
    optimizer.validate();
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// One trainable tensor as seen by the optimizer.
struct ParamSlot {
  Tensor tensor;
  const std::vector<std::uint8_t>* keep = nullptr;  // pruning keep-mask, if any
  bool decay = true;                                // subject to weight decay
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerSpec spec) : spec_(spec) { spec_.validate(); }

  const OptimizerSpec& spec() const noexcept { return spec_; }

  // One update of every slot from its accumulated gradient. Masked gradient
  // entries are zeroed before the update and masked weights are re-zeroed after it.
  void step(std::vector<ParamSlot>& slots, double lr) {
    if (state_.size() < slots.size()) state_.resize(slots.size());
    ++t_;
    for (std::size_t s = 0; s < slots.size(); ++s) {
      ParamSlot& slot = slots[s];
      auto w = slot.tensor.data();
      std::vector<double> g(w.size(), 0.0);
      if (slot.tensor.has_grad()) std::copy(slot.tensor.grad().begin(), slot.tensor.grad().end(), g.begin());
      if (slot.keep)
        for (std::size_t i = 0; i < g.size(); ++i)
          if (!(*slot.keep)[i]) g[i] = 0.0;
      if (slot.decay && spec_.weight_decay > 0)
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += spec_.weight_decay * w[i];

      State& st = state_[s];
      switch (spec_.kind) {
        case OptimizerKind::sgd:
          for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
          break;
        case OptimizerKind::sgd_momentum:
          if (st.m.empty()) st.m.assign(w.size(), 0.0);
          for (std::size_t i = 0; i < w.size(); ++i) {
            st.m[i] = spec_.momentum * st.m[i] + g[i];
            w[i] -= lr * st.m[i];
          }
          break;
        case OptimizerKind::adam: {
          if (st.m.empty()) {
            st.m.assign(w.size(), 0.0);
            st.v.assign(w.size(), 0.0);
          }
          const double c1 = 1.0 - std::pow(spec_.beta1, static_cast<double>(t_));
          const double c2 = 1.0 - std::pow(spec_.beta2, static_cast<double>(t_));
          for (std::size_t i = 0; i < w.size(); ++i) {
            st.m[i] = spec_.beta1 * st.m[i] + (1.0 - spec_.beta1) * g[i];
            st.v[i] = spec_.beta2 * st.v[i] + (1.0 - spec_.beta2) * g[i] * g[i];
            w[i] -= lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + spec_.eps);
          }
          break;
        }
      }
      if (slot.keep)
        for (std::size_t i = 0; i < w.size(); ++i)
          if (!(*slot.keep)[i]) w[i] = 0.0;
    }
  }

 private:
  struct State {
    std::vector<double> m, v;
  };
  OptimizerSpec spec_;
  std::vector<State> state_;
  long t_ = 0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = std::numeric_limits<double>::quiet_NaN();
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double lr = 0.0;
  double grad_flow = 0.0;
  std::vector<double> layer_grad_flow;  // one entry per weight layer
};

struct FitHistory {
  std::vector<EpochRecord> epochs;

  void write_csv(std::ostream& out) const {
    out << "epoch,train_loss,train_acc,val_acc,lr,grad_flow\n";
    out.precision(17);
    for (const auto& r : epochs)
      out << r.epoch << ',' << r.train_loss << ',' << r.train_acc << ',' << r.val_acc << ',' << r.lr << ','
          << r.grad_flow << '\n';
  }

  void write_gradient_flow_csv(std::ostream& out) const {
    const std::size_t layers = epochs.empty() ? 0 : epochs.front().layer_grad_flow.size();
    out << "epoch";
    for (std::size_t l = 0; l < layers; ++l) out << ",layer" << l;
    out << ",global\n";
    out.precision(17);
    for (const auto& r : epochs) {
      out << r.epoch;
      for (double v : r.layer_grad_flow) out << ',' << v;
      out << ',' << r.grad_flow << '\n';
    }
  }
};

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

inline std::size_t argmax_row(std::span<const double> logits, std::size_t row, std::size_t classes) {
  const double* z = logits.data() + row * classes;
  return static_cast<std::size_t>(std::max_element(z, z + classes) - z);
}

// Mean loss and accuracy over a split; no gradients are recorded.
inline Evaluation evaluate(const network::Model& model, const data::Split& split, std::size_t batch_size = 500) {
  if (split.size() == 0) throw ContractError("evaluate: empty split");
  Evaluation ev;
  std::vector<std::size_t> pos;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    const std::size_t end = std::min(split.size(), start + batch_size);
    pos.resize(end - start);
    std::iota(pos.begin(), pos.end(), start);
    auto batch = data::gather(split, pos);
    engine::Tape tape(engine::GradMode::disabled);
    Tensor logits = model.forward(tape, batch.inputs);
    Tensor loss = engine::softmax_cross_entropy(tape, logits, batch.labels);
    ev.loss += loss.item() * static_cast<double>(pos.size());
    const std::size_t classes = logits.dim(1);
    for (std::size_t i = 0; i < pos.size(); ++i)
      if (argmax_row(logits.data(), i, classes) == static_cast<std::size_t>(batch.labels[i])) ++correct;
  }
  ev.loss /= static_cast<double>(split.size());
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(split.size());
  return ev;
}

struct GradientFlow {
  double global = 0.0;
  std::vector<double> per_layer;  // per weight layer; a slot's scales count toward its feeding layer
};

// Squared gradient norm of the batch loss over all trainable parameters;
// masked coordinates contribute nothing. Leaves the model's gradients cleared.
inline GradientFlow gradient_flow(network::Model& model, const data::Batch& batch,
                                  const pruning::PruningMask* mask = nullptr) {
  if (batch.labels.empty()) throw ContractError("gradient_flow: empty batch");
  model.zero_grad();
  engine::Tape tape;
  Tensor loss = engine::softmax_cross_entropy(tape, model.forward(tape, batch.inputs), batch.labels);
  tape.backward(loss);

  auto sq = [&](const network::NamedTensor& p) {
    if (!p.tensor.has_grad()) return 0.0;
    const pruning::MaskEntry* e = mask ? mask->find(p.name) : nullptr;
    const auto* keep = p.tensor.keep_mask();
    auto g = p.tensor.grad();
    double s = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if ((e && !e->keep[i]) || (keep && !(*keep)[i])) continue;
      s += g[i] * g[i];
    }
    return s;
  };
  GradientFlow gf;
  const auto scales = model.scale_parameters();
  for (const auto& layer : model.layers()) {
    double s = sq({layer.name + ".weight", layer.weight}) + sq({layer.name + ".bias", layer.bias});
    if (model.scales_trainable() && layer.activation_slot >= 0) {
      const auto slot = static_cast<std::size_t>(layer.activation_slot);
      s += sq(scales[2 * slot]) + sq(scales[2 * slot + 1]);
    }
    gf.global += s;
    gf.per_layer.push_back(s);
  }
  model.zero_grad();
  return gf;
}

// Installs the mask: zeroes pruned weights and marks them as structural zeros.
inline void install_mask(network::Model& model, const pruning::PruningMask& mask) {
  pruning::apply_mask(model, mask);
  for (auto& p : model.parameters())
    if (const auto* e = mask.find(p.name)) p.tensor.set_keep_mask(e->keep);
}

using EpochHook = std::function<void(const EpochRecord&)>;

struct FitOptions {
  const pruning::PruningMask* mask = nullptr;
  bool train_scales = false;
  const data::Split* validation = nullptr;
  std::size_t probe_size = 256;  // examples in the gradient-flow probe batch
  EpochHook on_epoch;            // called after each completed epoch
};

// Generic training loop behind pretrain and fine_tune. Deterministic given
// (model, data order, config).
inline FitHistory fit(network::Model& model, const data::Split& train, const TrainConfig& cfg, const FitOptions& opts = {}) {
  cfg.validate();
  if (train.size() == 0) throw ContractError("fit: empty training split");
  model.set_scales_trainable(opts.train_scales);
  if (opts.mask) install_mask(model, *opts.mask);

  std::vector<ParamSlot> slots;
  for (auto& p : model.parameters()) slots.push_back({p.tensor, p.tensor.keep_mask(), true});
  if (opts.train_scales)
    for (auto& p : model.scale_parameters()) slots.push_back({p.tensor, nullptr, false});
  Optimizer opt(cfg.optimizer);

  Rng order_rng = make_rng(cfg.seed, "shuffle");
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::size_t> probe_pos(std::min(opts.probe_size, train.size()));
  std::iota(probe_pos.begin(), probe_pos.end(), std::size_t{0});
  const data::Batch probe = data::gather(train, probe_pos);

  FitHistory history;
  std::vector<double> monitored;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = scheduler_lr(cfg.scheduler, epoch, cfg.learning_rate, {cfg.epochs, monitored});
    shuffle(order, order_rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      auto batch = data::gather(train, std::span<const std::size_t>(order.data() + start, end - start));
      model.zero_grad();
      engine::Tape tape;
      Tensor logits = model.forward(tape, batch.inputs);
      Tensor loss = engine::softmax_cross_entropy(tape, logits, batch.labels);
      if (!std::isfinite(loss.item())) throw DivergedTraining(epoch);
      tape.backward(loss);
      opt.step(slots, lr);
      loss_sum += loss.item() * static_cast<double>(end - start);
      const std::size_t classes = logits.dim(1);
      for (std::size_t i = 0; i < end - start; ++i)
        if (argmax_row(logits.data(), i, classes) == static_cast<std::size_t>(batch.labels[i])) ++correct;
    }
    model.zero_grad();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(train.size());
    if (!std::isfinite(rec.train_loss)) throw DivergedTraining(epoch);
    if (opts.validation && opts.validation->size() > 0) {
      const auto ev = evaluate(model, *opts.validation);
      rec.val_acc = ev.accuracy;
      rec.val_loss = ev.loss;
    }
    const auto gf = gradient_flow(model, probe, opts.mask);
    rec.grad_flow = gf.global;
    rec.layer_grad_flow = gf.per_layer;
    monitored.push_back(std::isfinite(rec.val_loss) ? rec.val_loss : rec.train_loss);
    if (opts.on_epoch) opts.on_epoch(rec);
    history.epochs.push_back(std::move(rec));
  }
  return history;
}

struct TrainResult {
  network::NetworkSnapshot snapshot;
  FitHistory history;
};

// Dense training from the model's current parameters (no mask).
inline TrainResult pretrain(network::Model& model, const data::Split& train, const TrainConfig& cfg,
                            const data::Split* validation = nullptr, const EpochHook& on_epoch = {}) {
  for (const auto& p : model.parameters())
    if (p.tensor.keep_mask()) throw ContractError("pretrain: model carries a pruning mask");
  FitOptions opts;
  opts.validation = validation;
  opts.on_epoch = on_epoch;
  auto history = fit(model, train, cfg, opts);
  return {model.snapshot(), std::move(history)};
}

// Operators (and optionally scales) to install before fine-tuning. An empty
// chromosome keeps the snapshot's own assignment.
struct ActivationAssignment {
  search::Chromosome chromosome;
  std::optional<std::vector<network::Scale>> scales;
};

// Masked retraining of a pruned snapshot. With train_scales every slot's
// (alpha, beta) is optimized jointly with the surviving weights.
inline TrainResult fine_tune(const network::NetworkSnapshot& snapshot, const pruning::PruningMask& mask,
                             const ActivationAssignment& acts, const TrainConfig& cfg, bool train_scales,
                             const data::Split& train, const data::Split* validation = nullptr) {
  network::Model model = network::Model::from_snapshot(snapshot);
  if (!acts.chromosome.genes.empty()) model.set_activations(acts.chromosome, acts.scales);
  try {
    pruning::apply_mask(model, mask);
  } catch (const DimensionError& e) {
    throw ContractError(std::string("fine_tune: mask does not match model: ") + e.what());
  }
  FitOptions opts;
  opts.mask = &mask;
  opts.train_scales = train_scales;
  opts.validation = validation;
  auto history = fit(model, train, cfg, opts);
  return {model.snapshot(mask), std::move(history)};
}

// The training recipe of the reference dense LeNet-5: SGD, lr 0.1, no schedule.
inline TrainConfig lenet5_recipe(int epochs, std::uint64_t seed) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 64;
  c.learning_rate = 0.1;
  c.optimizer = OptimizerSpec::of(OptimizerKind::sgd);
  c.seed = seed;
  return c;
}

}  // namespace safs::training
