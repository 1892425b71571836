#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "safs/engine.hpp"

namespace safs::pruning {

enum class Scope { per_layer, global };

inline std::string_view to_string(Scope s) { return s == Scope::global ? "global" : "per-layer"; }
inline Scope scope_from_string(std::string_view s) {
  if (s == "global") return Scope::global;
  if (s == "per-layer" || s == "per_layer") return Scope::per_layer;
  throw FormatError("unknown pruning scope '" + std::string(s) + "'");
}

struct MaskEntry {
  std::string name;
  engine::Shape shape;
  std::vector<std::uint8_t> keep;  // 1 = weight survives

  std::size_t kept() const {
    std::size_t n = 0;
    for (auto k : keep) n += k;
    return n;
  }
  friend bool operator==(const MaskEntry&, const MaskEntry&) = default;
};

// Binary keep-mask over the prunable tensors of a model. Immutable once built.
struct PruningMask {
  double ratio = 0.0;
  Scope scope = Scope::per_layer;
  std::vector<MaskEntry> entries;

  const MaskEntry* find(std::string_view name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.keep.size();
    return n;
  }
  std::size_t kept() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.kept();
    return n;
  }
  friend bool operator==(const PruningMask&, const PruningMask&) = default;
};

}  // namespace safs::pruning
