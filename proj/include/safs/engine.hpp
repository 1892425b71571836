#pragma once

// Minimal tape-based reverse-mode differentiation over dense float64 tensors.
//
// A Tape records one forward pass. Every op whose inputs require gradients
// appends a node with a backward closure; Tape::backward replays the nodes in
// reverse order and then discards them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "safs/activations.hpp"
#include "safs/error.hpp"

namespace safs::engine {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Shared handle to a buffer of float64 values plus optional gradient state.
// Copying a Tensor aliases the same storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    if (shape_numel(shape) != data.size())
      throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_numel(shape)) + " values but " +
                           std::to_string(data.size()) + " were supplied");
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (!on) impl_->grad.clear();
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Gradient buffer; empty span when nothing has been accumulated.
  std::span<double> grad() { return impl_->grad; }
  std::span<const double> grad() const { return impl_->grad; }

  // Allocates (zero-filled) on first use. Only legal for requires_grad tensors.
  // Const because a Tensor is a handle: gradient state lives in the shared storage.
  std::span<double> mutable_grad() const {
    if (!impl_->requires_grad) throw ContractError("gradient requested for a tensor without requires_grad");
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  Tensor clone() const {
    Tensor t(impl_->shape, impl_->data, impl_->requires_grad);
    t.impl_->keep = impl_->keep;
    return t;
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  // Frozen-zero pattern: entries with keep == 0 are structural zeros. Their
  // gradient is defined as 0 and ops may skip them entirely.
  void set_keep_mask(std::vector<std::uint8_t> keep) {
    if (keep.size() != numel())
      throw DimensionError("keep mask of " + std::to_string(keep.size()) + " entries for tensor of shape " +
                           shape_str(shape()));
    impl_->keep = std::make_shared<const std::vector<std::uint8_t>>(std::move(keep));
  }
  void clear_keep_mask() { impl_->keep.reset(); }
  const std::vector<std::uint8_t>* keep_mask() const { return impl_->keep.get(); }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::shared_ptr<const std::vector<std::uint8_t>> keep;
  };
  std::shared_ptr<Impl> impl_;
};

enum class GradMode { enabled, disabled };

// Ordered record of executed ops. Nodes are appended in execution order, so
// every node's inputs were produced by earlier nodes (or are leaves).
class Tape {
 public:
  explicit Tape(GradMode mode = GradMode::enabled) : mode_(mode) {}

  bool recording() const noexcept { return mode_ == GradMode::enabled; }

  bool wants_grad(std::initializer_list<const Tensor*> inputs) const {
    if (!recording()) return false;
    for (const Tensor* t : inputs)
      if (t && t->defined() && t->requires_grad()) return true;
    return false;
  }

  void record(std::vector<Tensor> inputs, Tensor output, std::function<void()> backward_fn) {
    nodes_.push_back({std::move(inputs), std::move(output), std::move(backward_fn)});
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and runs every node's backward once, newest
  // first. Gradients accumulate into existing buffers; the tape is emptied.
  void backward(Tensor loss) {
    if (loss.numel() != 1)
      throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    if (nodes_.empty()) return;
    if (!loss.requires_grad()) {
      nodes_.clear();
      return;
    }
    loss.mutable_grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output.has_grad()) it->backward();
    }
    nodes_.clear();
  }

 private:
  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };
  GradMode mode_;
  std::vector<Node> nodes_;
};

namespace detail {
inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": operand shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
}
inline void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
}
}  // namespace detail

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  const bool rg = tape.wants_grad({&a, &b});
  Tensor out = Tensor::zeros(a.shape(), rg);
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  if (rg) {
    tape.record({a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto d = t->mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  const bool rg = tape.wants_grad({&a, &b});
  Tensor out = Tensor::zeros(a.shape(), rg);
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  if (rg) {
    tape.record({a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto d = a.mutable_grad();
        auto y = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i];
      }
      if (b.requires_grad()) {
        auto d = b.mutable_grad();
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * x[i];
      }
    });
  }
  return out;
}

inline Tensor scale(Tape& tape, const Tensor& a, double c) {
  const bool rg = tape.wants_grad({&a});
  Tensor out = Tensor::zeros(a.shape(), rg);
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = c * x[i];
  if (rg) {
    tape.record({a}, out, [a, out, c]() mutable {
      auto g = out.grad();
      auto d = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += c * g[i];
    });
  }
  return out;
}

inline Tensor square(Tape& tape, const Tensor& a) { return mul(tape, a, a); }

inline Tensor sum(Tape& tape, const Tensor& a) {
  const bool rg = tape.wants_grad({&a});
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out({1}, {s}, rg);
  if (rg) {
    tape.record({a}, out, [a, out]() mutable {
      const double g = out.grad()[0];
      for (double& d : a.mutable_grad()) d += g;
    });
  }
  return out;
}

namespace detail {
// Four-way split accumulation; fixed order, so results are reproducible.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

// Eight independent partial sums, combined pairwise: vectorizes without
// reassociation and always sums in the same order.
inline double dot8(const double* a, const double* b, std::size_t n) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  for (std::size_t j = 0; i < n; ++i, ++j) acc[j] += a[i] * b[i];
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

inline std::size_t count_kept(const std::vector<std::uint8_t>& keep) {
  std::size_t n = 0;
  for (auto k : keep) n += k;
  return n;
}
}  // namespace detail

// input [batch, in] x weight [in, out] + bias [out].
// A weight keep mask makes masked entries structural zeros (no gradient);
// sufficiently sparse weights switch to a kept-entry kernel.
inline Tensor dense(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias) {
  detail::require_rank(input, 2, "dense", "input");
  detail::require_rank(weight, 2, "dense", "weight");
  detail::require_rank(bias, 1, "dense", "bias");
  const std::size_t batch = input.dim(0), in = input.dim(1), out_f = weight.dim(1);
  if (weight.dim(0) != in)
    throw DimensionError("dense: input axis 1 (" + std::to_string(in) + ") != weight axis 0 (" +
                         std::to_string(weight.dim(0)) + ")");
  if (bias.dim(0) != out_f)
    throw DimensionError("dense: bias axis 0 (" + std::to_string(bias.dim(0)) +
                         ") != weight axis 1 (" + std::to_string(out_f) + ")");

  struct Entry {
    std::size_t i, j;
  };
  std::shared_ptr<std::vector<Entry>> kept;
  if (const auto* keep = weight.keep_mask(); keep && detail::count_kept(*keep) * 4 < keep->size()) {
    kept = std::make_shared<std::vector<Entry>>();
    for (std::size_t i = 0; i < in; ++i)
      for (std::size_t j = 0; j < out_f; ++j)
        if ((*keep)[i * out_f + j]) kept->push_back({i, j});
  }

  const bool rg = tape.wants_grad({&input, &weight, &bias});
  Tensor out = Tensor::zeros({batch, out_f}, rg);
  auto o = out.data();
  auto x = input.data();
  auto w = weight.data();
  auto b = bias.data();
  for (std::size_t n = 0; n < batch; ++n) std::copy(b.begin(), b.end(), o.begin() + static_cast<std::ptrdiff_t>(n * out_f));
  if (kept) {
    for (const Entry& e : *kept) {
      const double wv = w[e.i * out_f + e.j];
      for (std::size_t n = 0; n < batch; ++n) o[n * out_f + e.j] += x[n * in + e.i] * wv;
    }
  } else {
    for (std::size_t n = 0; n < batch; ++n) {
      double* orow = o.data() + n * out_f;
      const double* xrow = x.data() + n * in;
      for (std::size_t i = 0; i < in; ++i) {
        const double xv = xrow[i];
        if (xv == 0.0) continue;
        const double* wrow = w.data() + i * out_f;
        for (std::size_t j = 0; j < out_f; ++j) orow[j] += xv * wrow[j];
      }
    }
  }
  if (rg) {
    tape.record({input, weight, bias}, out, [input, weight, bias, out, kept, batch, in, out_f]() {
      auto g = out.grad();
      if (bias.requires_grad()) {
        auto db = bias.mutable_grad();
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t j = 0; j < out_f; ++j) db[j] += g[n * out_f + j];
      }
      auto x = input.data();
      auto w = weight.data();
      if (kept) {
        if (weight.requires_grad()) {
          auto dw = weight.mutable_grad();
          for (const Entry& e : *kept) {
            double acc = 0.0;
            for (std::size_t n = 0; n < batch; ++n) acc += x[n * in + e.i] * g[n * out_f + e.j];
            dw[e.i * out_f + e.j] += acc;
          }
        }
        if (input.requires_grad()) {
          auto dx = input.mutable_grad();
          for (const Entry& e : *kept) {
            const double wv = w[e.i * out_f + e.j];
            for (std::size_t n = 0; n < batch; ++n) dx[n * in + e.i] += g[n * out_f + e.j] * wv;
          }
        }
        return;
      }
      if (weight.requires_grad()) {
        auto dw = weight.mutable_grad();
        const auto* keep = weight.keep_mask();
        for (std::size_t n = 0; n < batch; ++n) {
          const double* grow = g.data() + n * out_f;
          for (std::size_t i = 0; i < in; ++i) {
            const double xv = x[n * in + i];
            if (xv == 0.0) continue;
            double* dwrow = dw.data() + i * out_f;
            for (std::size_t j = 0; j < out_f; ++j) dwrow[j] += xv * grow[j];
          }
        }
        if (keep)
          for (std::size_t k = 0; k < dw.size(); ++k)
            if (!(*keep)[k]) dw[k] = 0.0;
      }
      if (input.requires_grad()) {
        auto dx = input.mutable_grad();
        // dx = g . W^T, computed against a transposed copy so each dot is contiguous.
        std::vector<double> wt(in * out_f);
        for (std::size_t i = 0; i < in; ++i)
          for (std::size_t j = 0; j < out_f; ++j) wt[j * in + i] = w[i * out_f + j];
        for (std::size_t n = 0; n < batch; ++n) {
          const double* grow = g.data() + n * out_f;
          double* dxrow = dx.data() + n * in;
          for (std::size_t j = 0; j < out_f; ++j) {
            const double gv = grow[j];
            if (gv == 0.0) continue;
            const double* wtrow = wt.data() + j * in;
            for (std::size_t i = 0; i < in; ++i) dxrow[i] += gv * wtrow[i];
          }
        }
      }
    });
  }
  return out;
}

// Cross-correlation of input [batch, c_in, h, w] with kernel [c_out, c_in, kh, kw],
// zero padding on all sides. Only kernel taps kept by the kernel's keep mask
// (all taps when it has none) are visited.
inline Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias,
                     std::size_t stride = 1, std::size_t padding = 0) {
  detail::require_rank(input, 4, "conv2d", "input");
  detail::require_rank(kernel, 4, "conv2d", "kernel");
  detail::require_rank(bias, 1, "conv2d", "bias");
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  const std::size_t batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != cin)
    throw DimensionError("conv2d: input channel axis 1 (" + std::to_string(cin) +
                         ") != kernel axis 1 (" + std::to_string(kernel.dim(1)) + ")");
  if (bias.dim(0) != cout)
    throw DimensionError("conv2d: bias axis 0 (" + std::to_string(bias.dim(0)) +
                         ") != kernel axis 0 (" + std::to_string(cout) + ")");
  const std::size_t hp = h + 2 * padding, wp = w + 2 * padding;
  if (hp < kh || wp < kw)
    throw DimensionError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " larger than padded input " + std::to_string(hp) + "x" + std::to_string(wp) +
                         " (axes 2,3)");
  const std::size_t oh = (hp - kh) / stride + 1, ow = (wp - kw) / stride + 1;

  struct Tap {
    std::size_t co, ci, ki, kj, index;
  };
  auto taps = std::make_shared<std::vector<Tap>>();
  {
    const auto* keep = kernel.keep_mask();
    std::size_t idx = 0;
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t ki = 0; ki < kh; ++ki)
          for (std::size_t kj = 0; kj < kw; ++kj, ++idx)
            if (!keep || (*keep)[idx]) taps->push_back({co, ci, ki, kj, idx});
  }

  // Zero-padded copy of the input so the inner loops carry no bounds checks.
  auto padded = std::make_shared<std::vector<double>>(batch * cin * hp * wp, 0.0);
  {
    auto x = input.data();
    for (std::size_t p = 0; p < batch * cin; ++p)
      for (std::size_t r = 0; r < h; ++r)
        std::copy_n(x.data() + (p * h + r) * w, w, padded->data() + (p * hp + r + padding) * wp + padding);
  }

  const bool rg = tape.wants_grad({&input, &kernel, &bias});
  Tensor out = Tensor::zeros({batch, cout, oh, ow}, rg);
  auto o = out.data();
  auto k = kernel.data();
  auto b = bias.data();
  const double* xp = padded->data();
  // With stride 1 every tap is one contiguous multiply-add over a "wide"
  // output plane of oh x wp values (columns >= ow are scratch and dropped).
  const std::size_t span_len = (oh - 1) * wp + ow;
  if (stride == 1) {
    std::vector<double> wide(oh * wp);
    for (std::size_t n = 0; n < batch; ++n) {
      for (std::size_t co = 0; co < cout; ++co) {
        std::fill(wide.begin(), wide.end(), b[co]);
        for (const Tap& t : *taps) {
          if (t.co != co) continue;
          const double kv = k[t.index];
          const double* src = xp + (n * cin + t.ci) * hp * wp + t.ki * wp + t.kj;
          double* dst = wide.data();
          for (std::size_t v = 0; v < span_len; ++v) dst[v] += kv * src[v];
        }
        double* oplane = o.data() + (n * cout + co) * oh * ow;
        for (std::size_t r = 0; r < oh; ++r) std::copy_n(wide.data() + r * wp, ow, oplane + r * ow);
      }
    }
  } else {
    for (std::size_t n = 0; n < batch; ++n) {
      for (std::size_t co = 0; co < cout; ++co)
        std::fill_n(o.data() + (n * cout + co) * oh * ow, oh * ow, b[co]);
      for (const Tap& t : *taps) {
        const double kv = k[t.index];
        const double* xplane = xp + (n * cin + t.ci) * hp * wp;
        double* oplane = o.data() + (n * cout + t.co) * oh * ow;
        for (std::size_t r = 0; r < oh; ++r) {
          const double* xrow = xplane + (r * stride + t.ki) * wp + t.kj;
          double* orow = oplane + r * ow;
          for (std::size_t c = 0; c < ow; ++c) orow[c] += kv * xrow[c * stride];
        }
      }
    }
  }

  if (rg) {
    tape.record({input, kernel, bias}, out,
                [input, kernel, bias, out, padded, taps, batch, cin, cout, h, w, hp, wp, oh, ow, stride, padding]() {
                  auto g = out.grad();
                  if (bias.requires_grad()) {
                    auto db = bias.mutable_grad();
                    for (std::size_t n = 0; n < batch; ++n)
                      for (std::size_t co = 0; co < cout; ++co) {
                        const double* gp = g.data() + (n * cout + co) * oh * ow;
                        double acc = 0.0;
                        for (std::size_t i = 0; i < oh * ow; ++i) acc += gp[i];
                        db[co] += acc;
                      }
                  }
                  const bool want_k = kernel.requires_grad();
                  const bool want_x = input.requires_grad();
                  if (!want_k && !want_x) return;
                  std::vector<double> dpad(want_x ? padded->size() : 0, 0.0);
                  std::span<double> dk = want_k ? kernel.mutable_grad() : std::span<double>{};
                  auto k = kernel.data();
                  const double* xp = padded->data();
                  if (stride == 1) {
                    // Gradient planes re-laid out wide (oh x wp, zero scratch columns).
                    const std::size_t span_len = (oh - 1) * wp + ow;
                    std::vector<double> gwide(batch * cout * oh * wp, 0.0);
                    for (std::size_t p = 0; p < batch * cout; ++p)
                      for (std::size_t r = 0; r < oh; ++r)
                        std::copy_n(g.data() + (p * oh + r) * ow, ow, gwide.data() + (p * oh + r) * wp);
                    for (const Tap& t : *taps) {
                      const double kv = k[t.index];
                      double s = 0.0;
                      for (std::size_t n = 0; n < batch; ++n) {
                        const double* gsrc = gwide.data() + (n * cout + t.co) * oh * wp;
                        const std::size_t off = (n * cin + t.ci) * hp * wp + t.ki * wp + t.kj;
                        if (want_k) s += detail::dot8(gsrc, xp + off, span_len);
                        if (want_x) {
                          double* d = dpad.data() + off;
                          for (std::size_t v = 0; v < span_len; ++v) d[v] += kv * gsrc[v];
                        }
                      }
                      if (want_k) dk[t.index] += s;
                    }
                  }
                  std::vector<double> acc(ow);
                  for (const Tap& t : *taps) {
                    if (stride == 1) break;
                    const double kv = k[t.index];
                    std::fill(acc.begin(), acc.end(), 0.0);
                    for (std::size_t n = 0; n < batch; ++n) {
                      const double* gplane = g.data() + (n * cout + t.co) * oh * ow;
                      const std::size_t plane = (n * cin + t.ci) * hp * wp;
                      for (std::size_t r = 0; r < oh; ++r) {
                        const std::size_t off = plane + (r * stride + t.ki) * wp + t.kj;
                        const double* grow = gplane + r * ow;
                        if (stride == 1) {
                          if (want_k) {
                            const double* xrow = xp + off;
                            for (std::size_t c = 0; c < ow; ++c) acc[c] += grow[c] * xrow[c];
                          }
                          if (want_x) {
                            double* drow = dpad.data() + off;
                            for (std::size_t c = 0; c < ow; ++c) drow[c] += kv * grow[c];
                          }
                        } else {
                          if (want_k) {
                            const double* xrow = xp + off;
                            for (std::size_t c = 0; c < ow; ++c) acc[c] += grow[c] * xrow[c * stride];
                          }
                          if (want_x) {
                            double* drow = dpad.data() + off;
                            for (std::size_t c = 0; c < ow; ++c) drow[c * stride] += kv * grow[c];
                          }
                        }
                      }
                    }
                    if (want_k) {
                      double s = 0.0;
                      for (double a : acc) s += a;
                      dk[t.index] += s;
                    }
                  }
                  if (want_x) {
                    auto dx = input.mutable_grad();
                    for (std::size_t p = 0; p < batch * cin; ++p)
                      for (std::size_t r = 0; r < h; ++r) {
                        const double* src = dpad.data() + (p * hp + r + padding) * wp + padding;
                        double* dst = dx.data() + (p * h + r) * w;
                        for (std::size_t c = 0; c < w; ++c) dst[c] += src[c];
                      }
                  }
                });
  }
  return out;
}

// Non-overlapping max pooling with a square window (stride == window).
// Ties resolve to the first maximal element in row-major window order.
inline Tensor max_pool2d(Tape& tape, const Tensor& input, std::size_t window = 2) {
  detail::require_rank(input, 4, "max_pool2d", "input");
  if (window == 0) throw ContractError("max_pool2d: window must be positive");
  const std::size_t batch = input.dim(0), ch = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h < window || w < window)
    throw DimensionError("max_pool2d: window " + std::to_string(window) + " exceeds input axes 2,3 (" +
                         std::to_string(h) + "x" + std::to_string(w) + ")");
  const std::size_t oh = h / window, ow = w / window;
  const bool rg = tape.wants_grad({&input});
  Tensor out = Tensor::zeros({batch, ch, oh, ow}, rg);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  auto x = input.data();
  auto o = out.data();
  for (std::size_t p = 0; p < batch * ch; ++p)
    for (std::size_t r = 0; r < oh; ++r)
      for (std::size_t c = 0; c < ow; ++c) {
        std::size_t best = (p * h + r * window) * w + c * window;
        for (std::size_t i = 0; i < window; ++i)
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = (p * h + r * window + i) * w + c * window + j;
            if (x[idx] > x[best]) best = idx;
          }
        const std::size_t oidx = (p * oh + r) * ow + c;
        o[oidx] = x[best];
        (*argmax)[oidx] = best;
      }
  if (rg) {
    tape.record({input}, out, [input, out, argmax]() mutable {
      auto g = out.grad();
      auto dx = input.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) dx[(*argmax)[i]] += g[i];
    });
  }
  return out;
}

// [batch, ...] -> [batch, prod(...)]
inline Tensor flatten(Tape& tape, const Tensor& input) {
  if (input.rank() < 1) throw DimensionError("flatten: input must have a batch axis");
  const std::size_t batch = input.dim(0);
  const std::size_t rest = batch ? input.numel() / batch : 0;
  const bool rg = tape.wants_grad({&input});
  Tensor out({batch, rest}, std::vector<double>(input.data().begin(), input.data().end()), rg);
  if (rg) {
    tape.record({input}, out, [input, out]() mutable {
      auto g = out.grad();
      auto dx = input.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    });
  }
  return out;
}

// Elementwise y = alpha * f(beta * x). alpha and beta are single-element
// tensors; they receive gradients when they require them.
inline Tensor activation(Tape& tape, const Tensor& input, activations::OperatorId op, const Tensor& alpha,
                         const Tensor& beta, const activations::OperatorConstants& constants = {}) {
  if (alpha.numel() != 1 || beta.numel() != 1)
    throw DimensionError("activation: alpha and beta must hold exactly one value");
  const double a = alpha.item(), b = beta.item();
  const bool rg = tape.wants_grad({&input, &alpha, &beta});
  Tensor out = Tensor::zeros(input.shape(), rg);
  auto x = input.data();
  auto o = out.data();
  std::shared_ptr<std::vector<double>> f, df;
  const bool keep_f = rg && alpha.requires_grad();
  if (rg) df = std::make_shared<std::vector<double>>(x.size());
  if (keep_f) f = std::make_shared<std::vector<double>>(x.size());
  const std::size_t n = x.size();
  const double* xp = x.data();
  double* op_ = o.data();
  activations::dispatch(op, [&](auto tag) {
    if (keep_f) {
      double* fp = f->data();
      double* dfp = df->data();
      for (std::size_t i = 0; i < n; ++i) {
        const auto vs = activations::unary(tag.value, b * xp[i], constants);
        op_[i] = a * vs.value;
        fp[i] = vs.value;
        dfp[i] = vs.slope;
      }
    } else if (rg) {
      double* dfp = df->data();
      for (std::size_t i = 0; i < n; ++i) {
        const auto vs = activations::unary(tag.value, b * xp[i], constants);
        op_[i] = a * vs.value;
        dfp[i] = vs.slope;
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) op_[i] = a * activations::unary(tag.value, b * xp[i], constants).value;
    }
  });
  if (rg) {
    tape.record({input, alpha, beta}, out, [input, alpha, beta, out, f, df, a, b]() mutable {
      auto g = out.grad();
      const std::size_t n = g.size();
      const double* gp = g.data();
      const double* dfp = df->data();
      if (input.requires_grad()) {
        double* dx = input.mutable_grad().data();
        const double ab = a * b;
        for (std::size_t i = 0; i < n; ++i) dx[i] += gp[i] * ab * dfp[i];
      }
      if (alpha.requires_grad()) {
        const double* fp = f->data();
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += gp[i] * fp[i];
        alpha.mutable_grad()[0] += acc;
      }
      if (beta.requires_grad()) {
        const double* xp = input.data().data();
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += gp[i] * xp[i] * dfp[i];
        beta.mutable_grad()[0] += a * acc;
      }
    });
  }
  return out;
}

// Row-wise softmax of logits [batch, classes].
inline std::vector<double> softmax_rows(std::span<const double> logits, std::size_t batch, std::size_t classes) {
  std::vector<double> p(logits.size());
  for (std::size_t n = 0; n < batch; ++n) {
    const double* z = logits.data() + n * classes;
    double* q = p.data() + n * classes;
    const double m = *std::max_element(z, z + classes);
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) s += (q[c] = std::exp(z[c] - m));
    for (std::size_t c = 0; c < classes; ++c) q[c] /= s;
  }
  return p;
}

// Mean softmax cross-entropy over the batch.
inline Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels) {
  detail::require_rank(logits, 2, "softmax_cross_entropy", "logits");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch)
    throw DimensionError("softmax_cross_entropy: logits axis 0 (" + std::to_string(batch) + ") != label count (" +
                         std::to_string(labels.size()) + ")");
  if (batch == 0) throw ContractError("softmax_cross_entropy: empty batch");
  auto z = logits.data();
  double loss = 0.0;
  for (std::size_t n = 0; n < batch; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= classes)
      throw ContractError("softmax_cross_entropy: label " + std::to_string(y) + " out of range");
    const double* row = z.data() + n * classes;
    const double m = *std::max_element(row, row + classes);
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) s += std::exp(row[c] - m);
    loss += m + std::log(s) - row[y];
  }
  loss /= static_cast<double>(batch);
  const bool rg = tape.wants_grad({&logits});
  Tensor out({1}, {loss}, rg);
  if (rg) {
    std::vector<int> y(labels.begin(), labels.end());
    tape.record({logits}, out, [logits, out, y = std::move(y), batch, classes]() mutable {
      const double g = out.grad()[0] / static_cast<double>(batch);
      auto p = softmax_rows(logits.data(), batch, classes);
      auto dz = logits.mutable_grad();
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t c = 0; c < classes; ++c) {
          const double onehot = static_cast<std::size_t>(y[n]) == c ? 1.0 : 0.0;
          dz[n * classes + c] += g * (p[n * classes + c] - onehot);
        }
    });
  }
  return out;
}

// Builds a scalar from a point on a fresh tape.
using ScalarFunction = std::function<Tensor(Tape&, const Tensor&)>;

// max over coordinates of |analytic - central difference| / max(1, |central difference|).
inline double grad_check(const ScalarFunction& fn, const Tensor& point, double step) {
  if (!(step > 0)) throw ContractError("grad_check: step must be positive");
  Tensor x = point.clone();
  x.set_requires_grad(true);
  x.zero_grad();
  Tape tape;
  Tensor y = fn(tape, x);
  if (!std::isfinite(y.item())) throw NumericError("grad_check: non-finite function value at point");
  tape.backward(y);
  std::vector<double> analytic(x.numel(), 0.0);
  if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());

  auto eval_at = [&](const std::vector<double>& v) {
    Tape t(GradMode::disabled);
    Tensor p(point.shape(), v);
    const double r = fn(t, p).item();
    if (!std::isfinite(r)) throw NumericError("grad_check: non-finite function value near point");
    return r;
  };
  std::vector<double> base(point.data().begin(), point.data().end());
  double worst = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto v = base;
    v[i] = base[i] + step;
    const double up = eval_at(v);
    v[i] = base[i] - step;
    const double down = eval_at(v);
    const double fd = (up - down) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

}  // namespace safs::engine
