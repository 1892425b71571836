#pragma once

// Unstructured magnitude pruning and sparsity accounting.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "safs/error.hpp"
#include "safs/mask.hpp"
#include "safs/network.hpp"

namespace safs::pruning {

// Weight tensors are prunable; biases and activation scales never are.
inline bool is_prunable(std::string_view name) { return name.ends_with(".weight"); }

// floor(ratio * n), robust to representation error in products like 0.29 * 100.
inline std::size_t prune_count(double ratio, std::size_t n) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
}

namespace detail {
struct Candidate {
  std::size_t entry;
  std::size_t index;
  std::size_t order;  // enumeration index across the candidate pool
  double magnitude;
};

// Masks out the `count` smallest magnitudes; among equal magnitudes the later
// enumeration index is removed first.
inline void drop_smallest(std::vector<Candidate>& pool, std::size_t count, std::vector<MaskEntry>& entries) {
  std::sort(pool.begin(), pool.end(), [](const Candidate& a, const Candidate& b) {
    if (a.magnitude != b.magnitude) return a.magnitude < b.magnitude;
    return a.order > b.order;
  });
  for (std::size_t i = 0; i < count; ++i) entries[pool[i].entry].keep[pool[i].index] = 0;
}
}  // namespace detail

inline PruningMask magnitude_prune(const std::vector<network::NamedTensor>& tensors, double ratio,
                                   Scope scope = Scope::per_layer) {
  if (!(ratio >= 0.0 && ratio < 1.0))
    throw ContractError("magnitude_prune: ratio " + std::to_string(ratio) + " outside [0, 1)");
  PruningMask mask{ratio, scope, {}};
  for (const auto& t : tensors)
    if (is_prunable(t.name))
      mask.entries.push_back({t.name, t.tensor.shape(), std::vector<std::uint8_t>(t.tensor.numel(), 1)});
  if (mask.entries.empty()) throw ContractError("magnitude_prune: no prunable tensors");

  std::vector<const network::NamedTensor*> sources;
  for (const auto& t : tensors)
    if (is_prunable(t.name)) sources.push_back(&t);

  if (scope == Scope::per_layer) {
    for (std::size_t e = 0; e < sources.size(); ++e) {
      auto w = sources[e]->tensor.data();
      std::vector<detail::Candidate> pool(w.size());
      for (std::size_t i = 0; i < w.size(); ++i) pool[i] = {e, i, i, std::abs(w[i])};
      detail::drop_smallest(pool, prune_count(ratio, w.size()), mask.entries);
    }
  } else {
    std::vector<detail::Candidate> pool;
    std::size_t order = 0;
    for (std::size_t e = 0; e < sources.size(); ++e) {
      auto w = sources[e]->tensor.data();
      for (std::size_t i = 0; i < w.size(); ++i) pool.push_back({e, i, order++, std::abs(w[i])});
    }
    const std::size_t n = pool.size();
    detail::drop_smallest(pool, prune_count(ratio, n), mask.entries);
  }
  return mask;
}

inline PruningMask magnitude_prune(const network::NetworkSnapshot& snapshot, double ratio,
                                   Scope scope = Scope::per_layer) {
  return magnitude_prune(snapshot.tensors, ratio, scope);
}

inline PruningMask magnitude_prune(const network::Model& model, double ratio, Scope scope = Scope::per_layer) {
  return magnitude_prune(model.parameters(), ratio, scope);
}

// Zeroes every masked weight of the model.
inline void apply_mask(network::Model& model, const PruningMask& mask) {
  for (auto& p : model.parameters()) {
    const MaskEntry* e = mask.find(p.name);
    if (!e) {
      if (is_prunable(p.name)) throw ContractError("apply_mask: mask has no entry for '" + p.name + "'");
      continue;
    }
    if (e->shape != p.tensor.shape())
      throw DimensionError("apply_mask: mask '" + p.name + "' has shape " + engine::shape_str(e->shape) +
                           ", tensor has " + engine::shape_str(p.tensor.shape()));
    auto w = p.tensor.data();
    for (std::size_t i = 0; i < w.size(); ++i)
      if (!e->keep[i]) w[i] = 0.0;
  }
  for (const auto& e : mask.entries) {
    bool found = false;
    for (const auto& p : model.parameters()) found = found || p.name == e.name;
    if (!found) throw ContractError("apply_mask: model has no tensor '" + e.name + "'");
  }
}

struct SparsityReport {
  std::size_t total = 0;    // prunable weights
  std::size_t nonzero = 0;  // surviving (nonzero) prunable weights
  std::size_t bias_total = 0;
  double pruning_ratio = 0.0;      // 1 - nonzero / total
  double compression_ratio = 0.0;  // total / nonzero
};

// Counts over the prunable weight tensors of a masked model.
inline SparsityReport sparsity_report(const network::Model& model, const PruningMask& mask) {
  SparsityReport r;
  for (const auto& p : model.parameters()) {
    if (!is_prunable(p.name)) {
      r.bias_total += p.tensor.numel();
      continue;
    }
    const MaskEntry* e = mask.find(p.name);
    auto w = p.tensor.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      ++r.total;
      if (w[i] != 0.0 && (!e || e->keep[i])) ++r.nonzero;
    }
  }
  r.pruning_ratio = r.total ? 1.0 - static_cast<double>(r.nonzero) / static_cast<double>(r.total) : 0.0;
  r.compression_ratio =
      r.nonzero ? static_cast<double>(r.total) / static_cast<double>(r.nonzero) : std::numeric_limits<double>::infinity();
  return r;
}

}  // namespace safs::pruning
