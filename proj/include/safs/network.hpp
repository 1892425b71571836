#pragma once

// Model definitions (LeNet-5, MLP), activation slots and parameter snapshots.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "safs/activations.hpp"
#include "safs/chromosome.hpp"
#include "safs/engine.hpp"
#include "safs/error.hpp"
#include "safs/mask.hpp"
#include "safs/rng.hpp"

namespace safs::network {

using activations::OperatorId;
using activations::ParametricActivation;
using engine::Tensor;

enum class Architecture { lenet5, mlp };

inline std::string_view to_string(Architecture a) { return a == Architecture::lenet5 ? "lenet5" : "mlp"; }
inline Architecture architecture_from_string(std::string_view s) {
  if (s == "lenet5") return Architecture::lenet5;
  if (s == "mlp") return Architecture::mlp;
  throw FormatError("unknown architecture '" + std::string(s) + "'");
}

struct ModelSpec {
  Architecture arch = Architecture::lenet5;
  std::vector<std::size_t> layer_sizes;  // MLP widths, input first; empty for LeNet-5
  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

enum class LayerKind { conv, dense };

struct Layer {
  LayerKind kind = LayerKind::dense;
  std::string name;
  Tensor weight;  // conv: [c_out, c_in, kh, kw]; dense: [in, out]
  Tensor bias;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool flatten_before = false;
  int activation_slot = -1;  // index into the model's slots, or -1 for none
  bool pool_after = false;   // 2x2 max pooling after the activation
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Scale {
  double alpha = 1.0;
  double beta = 1.0;
  friend bool operator==(const Scale&, const Scale&) = default;
};

struct NetworkSnapshot;

class Model {
 public:
  Model() = default;

  const ModelSpec& spec() const noexcept { return spec_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  std::vector<Layer>& layers() noexcept { return layers_; }

  // L: number of hidden activation slots.
  std::size_t depth() const noexcept { return ops_.size(); }

  const activations::OperatorConstants& constants() const noexcept { return constants_; }
  void set_constants(const activations::OperatorConstants& c) { constants_ = c; }

  Tensor forward(engine::Tape& tape, const Tensor& input) const {
    Tensor x = input;
    for (const Layer& layer : layers_) {
      if (layer.flatten_before) x = engine::flatten(tape, x);
      x = layer.kind == LayerKind::conv
              ? engine::conv2d(tape, x, layer.weight, layer.bias, layer.stride, layer.padding)
              : engine::dense(tape, x, layer.weight, layer.bias);
      if (layer.activation_slot >= 0) {
        const auto s = static_cast<std::size_t>(layer.activation_slot);
        x = engine::activation(tape, x, ops_[s], alpha_[s], beta_[s], constants_);
      }
      if (layer.pool_after) x = engine::max_pool2d(tape, x, 2);
    }
    return x;
  }

  // Weights and biases in stable enumeration order (layer order, weight before bias).
  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> out;
    for (const Layer& l : layers_) {
      out.push_back({l.name + ".weight", l.weight});
      out.push_back({l.name + ".bias", l.bias});
    }
    return out;
  }

  // Per-slot alpha/beta tensors, slot order, alpha before beta.
  std::vector<NamedTensor> scale_parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < ops_.size(); ++i) {
      out.push_back({"act" + std::to_string(i) + ".alpha", alpha_[i]});
      out.push_back({"act" + std::to_string(i) + ".beta", beta_[i]});
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  std::vector<ParametricActivation> activations() const {
    std::vector<ParametricActivation> out;
    for (std::size_t i = 0; i < ops_.size(); ++i)
      out.push_back({ops_[i], alpha_[i].item(), beta_[i].item(), scales_trainable_});
    return out;
  }

  search::Chromosome chromosome() const { return {ops_}; }

  std::vector<Scale> scales() const {
    std::vector<Scale> out;
    for (std::size_t i = 0; i < ops_.size(); ++i) out.push_back({alpha_[i].item(), beta_[i].item()});
    return out;
  }

  // Installs one operator per slot. Without explicit scales every slot is reset to (1, 1).
  void set_activations(const search::Chromosome& chromosome, const std::optional<std::vector<Scale>>& scales = {}) {
    if (chromosome.size() != depth())
      throw ContractError("set_activations: chromosome length " + std::to_string(chromosome.size()) +
                          " != model depth " + std::to_string(depth()));
    if (scales && scales->size() != depth())
      throw ContractError("set_activations: " + std::to_string(scales->size()) + " scale pairs for depth " +
                          std::to_string(depth()));
    for (std::size_t i = 0; i < depth(); ++i) {
      ops_[i] = chromosome.genes[i];
      const Scale s = scales ? (*scales)[i] : Scale{};
      if (!std::isfinite(s.alpha) || !std::isfinite(s.beta))
        throw ContractError("set_activations: non-finite scaling factor in slot " + std::to_string(i));
      alpha_[i].data()[0] = s.alpha;
      beta_[i].data()[0] = s.beta;
      alpha_[i].zero_grad();
      beta_[i].zero_grad();
    }
  }

  bool scales_trainable() const noexcept { return scales_trainable_; }
  void set_scales_trainable(bool on) {
    scales_trainable_ = on;
    for (std::size_t i = 0; i < depth(); ++i) {
      alpha_[i].set_requires_grad(on);
      beta_[i].set_requires_grad(on);
    }
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
    for (auto& p : scale_parameters()) p.tensor.zero_grad();
  }

  NetworkSnapshot snapshot(const std::optional<pruning::PruningMask>& mask = {}) const;
  static Model from_snapshot(const NetworkSnapshot& snap);

  // Structure only; weights zero, slots ReLU.
  static Model skeleton(const ModelSpec& spec);

 private:
  void add_slot() {
    ops_.push_back(OperatorId::ReLU);
    alpha_.push_back(Tensor::scalar(1.0));
    beta_.push_back(Tensor::scalar(1.0));
  }

  ModelSpec spec_;
  std::vector<Layer> layers_;
  std::vector<OperatorId> ops_;
  std::vector<Tensor> alpha_, beta_;
  bool scales_trainable_ = false;
  activations::OperatorConstants constants_;
};

inline Model Model::skeleton(const ModelSpec& spec) {
  Model m;
  m.spec_ = spec;
  auto conv = [&](std::string name, std::size_t cin, std::size_t cout, std::size_t k, std::size_t pad) {
    Layer l;
    l.kind = LayerKind::conv;
    l.name = std::move(name);
    l.weight = Tensor::zeros({cout, cin, k, k}, true);
    l.bias = Tensor::zeros({cout}, true);
    l.padding = pad;
    return l;
  };
  auto dense = [&](std::string name, std::size_t in, std::size_t out) {
    Layer l;
    l.name = std::move(name);
    l.weight = Tensor::zeros({in, out}, true);
    l.bias = Tensor::zeros({out}, true);
    return l;
  };
  auto with_slot = [&](Layer l) {
    l.activation_slot = static_cast<int>(m.ops_.size());
    m.add_slot();
    return l;
  };

  if (spec.arch == Architecture::lenet5) {
    Layer c1 = with_slot(conv("conv1", 1, 6, 5, 2));
    c1.pool_after = true;
    Layer c2 = with_slot(conv("conv2", 6, 16, 5, 0));
    c2.pool_after = true;
    Layer f1 = with_slot(dense("fc1", 16 * 5 * 5, 120));
    f1.flatten_before = true;
    Layer f2 = with_slot(dense("fc2", 120, 84));
    Layer f3 = dense("fc3", 84, 10);
    m.layers_ = {c1, c2, f1, f2, f3};
  } else {
    const auto& sz = spec.layer_sizes;
    if (sz.size() < 2) throw ContractError("build_mlp: need at least 2 layer sizes, got " + std::to_string(sz.size()));
    for (std::size_t i = 0; i + 1 < sz.size(); ++i) {
      Layer l = dense("fc" + std::to_string(i + 1), sz[i], sz[i + 1]);
      if (i == 0) l.flatten_before = true;
      if (i + 2 < sz.size()) l = with_slot(std::move(l));
      m.layers_.push_back(std::move(l));
    }
  }
  return m;
}

namespace detail {
// Kaiming-uniform (fan-in, ReLU gain) weights; biases stay zero.
inline void kaiming_init(Model& m, std::uint64_t seed) {
  Rng rng = make_rng(seed, "init");
  for (Layer& l : m.layers()) {
    const auto& s = l.weight.shape();
    const std::size_t fan_in = l.kind == LayerKind::conv ? s[1] * s[2] * s[3] : s[0];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& w : l.weight.data()) w = (2.0 * uniform01(rng) - 1.0) * bound;
  }
}
}  // namespace detail

inline Model build_lenet5(std::uint64_t seed) {
  Model m = Model::skeleton({Architecture::lenet5, {}});
  detail::kaiming_init(m, seed);
  return m;
}

inline Model build_mlp(const std::vector<std::size_t>& layer_sizes, std::uint64_t seed) {
  Model m = Model::skeleton({Architecture::mlp, layer_sizes});
  detail::kaiming_init(m, seed);
  return m;
}

inline Model build(const ModelSpec& spec, std::uint64_t seed) {
  return spec.arch == Architecture::lenet5 ? build_lenet5(seed) : build_mlp(spec.layer_sizes, seed);
}

// Parameters, activation assignment and (optionally) the pruning mask of a model.
struct NetworkSnapshot {
  ModelSpec spec;
  std::vector<NamedTensor> tensors;  // weights/biases, then act*.alpha / act*.beta
  std::vector<OperatorId> ops;
  bool scales_trainable = false;
  std::optional<pruning::PruningMask> mask;

  const NamedTensor* find(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline NetworkSnapshot Model::snapshot(const std::optional<pruning::PruningMask>& mask) const {
  NetworkSnapshot s;
  s.spec = spec_;
  for (const auto& p : parameters()) s.tensors.push_back({p.name, Tensor(p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()})});
  for (const auto& p : scale_parameters())
    s.tensors.push_back({p.name, Tensor(p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()})});
  s.ops = ops_;
  s.scales_trainable = scales_trainable_;
  s.mask = mask;
  return s;
}

inline Model Model::from_snapshot(const NetworkSnapshot& snap) {
  Model m = skeleton(snap.spec);
  auto load = [&](const NamedTensor& dst) {
    const NamedTensor* src = snap.find(dst.name);
    if (!src) throw FormatError("snapshot lacks tensor '" + dst.name + "'");
    if (src->tensor.shape() != dst.tensor.shape())
      throw DimensionError("snapshot tensor '" + dst.name + "' has shape " + engine::shape_str(src->tensor.shape()) +
                           ", model expects " + engine::shape_str(dst.tensor.shape()));
    Tensor t = dst.tensor;
    std::copy(src->tensor.data().begin(), src->tensor.data().end(), t.data().begin());
  };
  for (const auto& p : m.parameters()) load(p);
  for (const auto& p : m.scale_parameters()) load(p);
  if (snap.ops.size() != m.depth())
    throw FormatError("snapshot carries " + std::to_string(snap.ops.size()) + " activation slots, model has " +
                      std::to_string(m.depth()));
  m.ops_ = snap.ops;
  m.set_scales_trainable(snap.scales_trainable);
  return m;
}

// Binary snapshot container:
//   bytes 0..7   magic "SAFSNET\0"
//   u32 LE       format version
//   u64 LE       header length H
//   H bytes      JSON header: model spec, activation slots, tensor manifest, mask manifest
//   payload      each manifest tensor as little-endian float64, in manifest order
//   masks        each mask entry as an LSB-first bitset of ceil(n/8) bytes, in manifest order
inline constexpr char kSnapshotMagic[8] = {'S', 'A', 'F', 'S', 'N', 'E', 'T', '\0'};
inline constexpr std::uint32_t kSnapshotVersion = 1;

namespace detail {
template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof v);
  }
  return v;
}
template <typename T>
void put_le(std::ostream& out, T v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <typename T>
T get_le(std::istream& in, const std::string& what) {
  T v;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError("snapshot truncated while reading " + what);
  return to_little(v);
}
}  // namespace detail

inline nlohmann::json snapshot_header(const NetworkSnapshot& s) {
  using nlohmann::json;
  json h;
  h["format_version"] = kSnapshotVersion;
  h["model"] = {{"arch", to_string(s.spec.arch)}, {"layer_sizes", s.spec.layer_sizes}};
  json slots = json::array();
  for (auto op : s.ops) slots.push_back(activations::to_string(op));
  h["activations"] = slots;
  h["scales_trainable"] = s.scales_trainable;
  json tensors = json::array();
  for (const auto& t : s.tensors) tensors.push_back({{"name", t.name}, {"shape", t.tensor.shape()}});
  h["tensors"] = tensors;
  if (s.mask) {
    json entries = json::array();
    for (const auto& e : s.mask->entries) entries.push_back({{"name", e.name}, {"shape", e.shape}});
    h["mask"] = {{"ratio", s.mask->ratio}, {"scope", pruning::to_string(s.mask->scope)}, {"entries", entries}};
  } else {
    h["mask"] = nullptr;
  }
  return h;
}

inline void write_snapshot(const NetworkSnapshot& s, std::ostream& out) {
  const std::string header = snapshot_header(s).dump();
  out.write(kSnapshotMagic, sizeof kSnapshotMagic);
  detail::put_le<std::uint32_t>(out, kSnapshotVersion);
  detail::put_le<std::uint64_t>(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& t : s.tensors)
    for (double v : t.tensor.data()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  if (s.mask) {
    for (const auto& e : s.mask->entries) {
      std::vector<char> bits((e.keep.size() + 7) / 8, 0);
      for (std::size_t i = 0; i < e.keep.size(); ++i)
        if (e.keep[i]) bits[i / 8] = static_cast<char>(bits[i / 8] | (1 << (i % 8)));
      out.write(bits.data(), static_cast<std::streamsize>(bits.size()));
    }
  }
}

inline NetworkSnapshot read_snapshot(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kSnapshotMagic, 8) != 0) throw FormatError("not a snapshot file (bad magic)");
  const auto version = detail::get_le<std::uint32_t>(in, "version");
  if (version != kSnapshotVersion) throw FormatError("unsupported snapshot version " + std::to_string(version));
  const auto hlen = detail::get_le<std::uint64_t>(in, "header length");
  std::string header(hlen, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(hlen))) throw FormatError("snapshot truncated in header");
  const auto h = nlohmann::json::parse(header);

  NetworkSnapshot s;
  s.spec.arch = architecture_from_string(h.at("model").at("arch").get<std::string>());
  s.spec.layer_sizes = h.at("model").at("layer_sizes").get<std::vector<std::size_t>>();
  for (const auto& op : h.at("activations")) s.ops.push_back(activations::operator_from_string(op.get<std::string>()));
  s.scales_trainable = h.at("scales_trainable").get<bool>();
  for (const auto& t : h.at("tensors")) {
    engine::Shape shape = t.at("shape").get<engine::Shape>();
    std::vector<double> v(engine::shape_numel(shape));
    for (double& x : v) x = std::bit_cast<double>(detail::get_le<std::uint64_t>(in, "tensor payload"));
    s.tensors.push_back({t.at("name").get<std::string>(), Tensor(std::move(shape), std::move(v))});
  }
  if (!h.at("mask").is_null()) {
    const auto& jm = h.at("mask");
    pruning::PruningMask m;
    m.ratio = jm.at("ratio").get<double>();
    m.scope = pruning::scope_from_string(jm.at("scope").get<std::string>());
    for (const auto& je : jm.at("entries")) {
      pruning::MaskEntry e;
      e.name = je.at("name").get<std::string>();
      e.shape = je.at("shape").get<engine::Shape>();
      const std::size_t n = engine::shape_numel(e.shape);
      std::vector<char> bits((n + 7) / 8);
      if (!in.read(bits.data(), static_cast<std::streamsize>(bits.size()))) throw FormatError("snapshot truncated in mask '" + e.name + "'");
      e.keep.resize(n);
      for (std::size_t i = 0; i < n; ++i) e.keep[i] = (static_cast<unsigned char>(bits[i / 8]) >> (i % 8)) & 1u;
      m.entries.push_back(std::move(e));
    }
    s.mask = std::move(m);
  }
  return s;
}

inline void save_snapshot(const NetworkSnapshot& s, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  write_snapshot(s, out);
}

inline NetworkSnapshot load_snapshot(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_snapshot(in);
}

}  // namespace safs::network
