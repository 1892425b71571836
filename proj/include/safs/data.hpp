#pragma once

// MNIST IDX ingestion, deterministic splits, k-fold plans and synthetic data.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "safs/engine.hpp"
#include "safs/error.hpp"
#include "safs/rng.hpp"

namespace safs::data {

inline constexpr std::uint32_t kIdxImageMagic = 2051;
inline constexpr std::uint32_t kIdxLabelMagic = 2049;
inline constexpr double kMnistMean = 0.1307;
inline constexpr double kMnistStd = 0.3081;

struct Dataset {
  engine::Shape sample_shape;    // per-example shape, e.g. {1, 28, 28}
  std::vector<double> features;  // size() * sample_numel(), row-major
  std::vector<int> labels;
  int num_classes = 0;
  std::string split;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t sample_numel() const { return engine::shape_numel(sample_shape); }

  void validate() const {
    if (features.size() != size() * sample_numel())
      throw DimensionError("dataset '" + split + "': feature buffer does not match " + std::to_string(size()) +
                           " examples of shape " + engine::shape_str(sample_shape));
    for (int y : labels)
      if (y < 0 || y >= num_classes)
        throw FormatError("dataset '" + split + "': label " + std::to_string(y) + " outside [0, " +
                          std::to_string(num_classes) + ")");
  }
};

// A view of some examples of a shared dataset, by index.
struct Split {
  std::shared_ptr<const Dataset> data;
  std::vector<std::size_t> indices;

  std::size_t size() const noexcept { return indices.size(); }

  static Split all(std::shared_ptr<const Dataset> d) {
    std::vector<std::size_t> idx(d->size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return {std::move(d), std::move(idx)};
  }

  Split head(std::size_t n) const {
    return {data, std::vector<std::size_t>(indices.begin(), indices.begin() + std::min(n, indices.size()))};
  }
};

struct Batch {
  engine::Tensor inputs;
  std::vector<int> labels;
};

// Copies the examples at the given split positions into one batch.
inline Batch gather(const Split& split, std::span<const std::size_t> positions) {
  const Dataset& d = *split.data;
  const std::size_t m = d.sample_numel();
  engine::Shape shape{positions.size()};
  shape.insert(shape.end(), d.sample_shape.begin(), d.sample_shape.end());
  std::vector<double> x(positions.size() * m);
  std::vector<int> y(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const std::size_t ex = split.indices[positions[i]];
    std::copy_n(d.features.begin() + static_cast<std::ptrdiff_t>(ex * m), m, x.begin() + static_cast<std::ptrdiff_t>(i * m));
    y[i] = d.labels[ex];
  }
  return {engine::Tensor(std::move(shape), std::move(x)), std::move(y)};
}

namespace detail {
inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError(path + ": truncated IDX header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | std::uint32_t{b[3]};
}

inline std::ifstream open_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return in;
}
}  // namespace detail

struct IdxImages {
  std::uint32_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;
};

inline IdxImages read_idx_images(const std::filesystem::path& path) {
  auto in = detail::open_binary(path);
  const auto p = path.string();
  const std::uint32_t magic = detail::read_be32(in, p);
  if (magic != kIdxImageMagic)
    throw FormatError(p + ": bad image-file magic " + std::to_string(magic) + " (expected 2051)");
  IdxImages img;
  img.count = detail::read_be32(in, p);
  img.rows = detail::read_be32(in, p);
  img.cols = detail::read_be32(in, p);
  if (img.rows == 0 || img.cols == 0) throw FormatError(p + ": zero image dimension");
  const std::size_t bytes = std::size_t{img.count} * img.rows * img.cols;
  img.pixels.resize(bytes);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(in.gcount()) != bytes)
    throw FormatError(p + ": truncated payload, expected " + std::to_string(bytes) + " pixel bytes, got " +
                      std::to_string(in.gcount()));
  return img;
}

inline std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path) {
  auto in = detail::open_binary(path);
  const auto p = path.string();
  const std::uint32_t magic = detail::read_be32(in, p);
  if (magic != kIdxLabelMagic)
    throw FormatError(p + ": bad label-file magic " + std::to_string(magic) + " (expected 2049)");
  const std::uint32_t count = detail::read_be32(in, p);
  std::vector<std::uint8_t> labels(count);
  in.read(reinterpret_cast<char*>(labels.data()), count);
  if (static_cast<std::size_t>(in.gcount()) != count)
    throw FormatError(p + ": truncated payload, expected " + std::to_string(count) + " labels, got " +
                      std::to_string(in.gcount()));
  return labels;
}

inline double normalize_pixel(std::uint8_t p) { return (p / 255.0 - kMnistMean) / kMnistStd; }
inline double denormalize(double v) { return v * kMnistStd + kMnistMean; }

inline Dataset load_idx_pair(const std::filesystem::path& images, const std::filesystem::path& labels,
                             std::string split) {
  const IdxImages img = read_idx_images(images);
  const auto lab = read_idx_labels(labels);
  if (lab.size() != img.count)
    throw FormatError("image count " + std::to_string(img.count) + " != label count " + std::to_string(lab.size()) +
                      " (" + images.string() + ")");
  Dataset d;
  d.sample_shape = {1, img.rows, img.cols};
  d.num_classes = 10;
  d.split = std::move(split);
  d.features.resize(img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) d.features[i] = normalize_pixel(img.pixels[i]);
  d.labels.assign(lab.begin(), lab.end());
  d.validate();
  return d;
}

struct MnistPair {
  std::shared_ptr<const Dataset> train;
  std::shared_ptr<const Dataset> test;
};

inline MnistPair load_mnist(const std::filesystem::path& dir) {
  for (const char* f : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
                        "t10k-labels-idx1-ubyte"})
    if (!std::filesystem::exists(dir / f)) throw FormatError("missing MNIST file " + (dir / f).string());
  return {std::make_shared<const Dataset>(
              load_idx_pair(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", "train")),
          std::make_shared<const Dataset>(
              load_idx_pair(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte", "test"))};
}

// Train/validation split of a pool: the trailing `val_fraction` becomes validation.
inline std::pair<Split, Split> holdout(const Split& pool, double val_fraction = 0.1) {
  const std::size_t n_val = static_cast<std::size_t>(static_cast<double>(pool.size()) * val_fraction);
  const std::size_t n_train = pool.size() - n_val;
  Split tr{pool.data, {pool.indices.begin(), pool.indices.begin() + static_cast<std::ptrdiff_t>(n_train)}};
  Split va{pool.data, {pool.indices.begin() + static_cast<std::ptrdiff_t>(n_train), pool.indices.end()}};
  return {std::move(tr), std::move(va)};
}

struct FoldPlan {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::size_t>> train;
  std::vector<std::vector<std::size_t>> validation;
};

// Shuffled partition of [0, n) into k folds; the first n % k folds get one extra index.
inline FoldPlan kfold(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ContractError("kfold: k must be at least 2");
  if (k > n) throw ContractError("kfold: k (" + std::to_string(k) + ") exceeds example count (" + std::to_string(n) + ")");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, "folds");
  shuffle(order, rng);
  FoldPlan plan{k, seed, {}, {}};
  std::size_t start = 0;
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t len = n / k + (f < n % k ? 1 : 0);
    ranges.emplace_back(start, start + len);
    start += len;
  }
  for (std::size_t f = 0; f < k; ++f) {
    plan.validation.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(ranges[f].first),
                                 order.begin() + static_cast<std::ptrdiff_t>(ranges[f].second));
    std::vector<std::size_t> tr;
    tr.reserve(n - plan.validation.back().size());
    for (std::size_t g = 0; g < k; ++g)
      if (g != f)
        tr.insert(tr.end(), order.begin() + static_cast<std::ptrdiff_t>(ranges[g].first),
                  order.begin() + static_cast<std::ptrdiff_t>(ranges[g].second));
    plan.train.push_back(std::move(tr));
  }
  return plan;
}

inline FoldPlan kfold(const Dataset& dataset, std::size_t k, std::uint64_t seed) { return kfold(dataset.size(), k, seed); }

// Maps fold-local positions (indices into `pool`) back to dataset indices.
inline Split subset(const Split& pool, const std::vector<std::size_t>& positions) {
  Split s{pool.data, {}};
  s.indices.reserve(positions.size());
  for (auto p : positions) s.indices.push_back(pool.indices.at(p));
  return s;
}

// True when the two splits share no example of the same dataset.
inline bool disjoint(const Split& a, const Split& b) {
  if (a.data != b.data) return true;
  std::vector<std::size_t> x = a.indices, y = b.indices;
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  std::vector<std::size_t> both;
  std::set_intersection(x.begin(), x.end(), y.begin(), y.end(), std::back_inserter(both));
  return both.empty();
}

// Isotropic unit-variance Gaussian blobs. Class c is centred at
// +/- separation on axis (c mod dims); the sign flips every `dims` classes.
inline Dataset synthetic_blobs(std::size_t n_per_class, int classes, std::size_t dims, double separation,
                               std::uint64_t seed) {
  if (!(separation > 0)) throw ContractError("synthetic_blobs: separation must be positive");
  if (classes < 1 || dims < 1) throw ContractError("synthetic_blobs: need at least one class and one dimension");
  Dataset d;
  d.sample_shape = {dims};
  d.num_classes = classes;
  d.split = "synthetic";
  Rng rng = make_rng(seed, "blobs");
  for (int c = 0; c < classes; ++c) {
    std::vector<double> center(dims, 0.0);
    const std::size_t axis = static_cast<std::size_t>(c) % dims;
    center[axis] = ((static_cast<std::size_t>(c) / dims) % 2 == 0 ? 1.0 : -1.0) * separation;
    for (std::size_t i = 0; i < n_per_class; ++i) {
      for (std::size_t j = 0; j < dims; ++j) d.features.push_back(center[j] + standard_normal(rng));
      d.labels.push_back(c);
    }
  }
  return d;
}

inline void write_csv(const Dataset& d, std::ostream& out) {
  const std::size_t m = d.sample_numel();
  out << "label";
  for (std::size_t j = 0; j < m; ++j) out << ",x" << j;
  out << '\n';
  out.precision(17);
  for (std::size_t i = 0; i < d.size(); ++i) {
    out << d.labels[i];
    for (std::size_t j = 0; j < m; ++j) out << ',' << d.features[i * m + j];
    out << '\n';
  }
}

}  // namespace safs::data
