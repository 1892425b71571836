#pragma once

// Unary operator catalog and the parametric activation y = alpha * f(beta * x).

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "safs/error.hpp"

namespace safs::activations {

enum class OperatorId : std::uint8_t {
  ReLU6,
  Acon,
  TanhSoft1,
  SRS,
  Symlog,
  Symexp,
  Swish,
  Tanh,
  HardSwish,
  ELU,
  GELU,
  Softplus,
  LogisticSigmoid,
  ReLU,  // baseline only; not part of the search catalog
};

inline constexpr std::size_t kCatalogSize = 13;

// Fixed order; chromosome serialization and random gene draws index into it.
inline constexpr std::array<OperatorId, kCatalogSize> kCatalog = {
    OperatorId::ReLU6,   OperatorId::Acon,     OperatorId::TanhSoft1, OperatorId::SRS,
    OperatorId::Symlog,  OperatorId::Symexp,   OperatorId::Swish,     OperatorId::Tanh,
    OperatorId::HardSwish, OperatorId::ELU,    OperatorId::GELU,      OperatorId::Softplus,
    OperatorId::LogisticSigmoid,
};

inline std::vector<OperatorId> catalog() { return {kCatalog.begin(), kCatalog.end()}; }

inline bool in_catalog(OperatorId op) {
  for (auto c : kCatalog)
    if (c == op) return true;
  return false;
}

inline std::string_view to_string(OperatorId op) {
  switch (op) {
    case OperatorId::ReLU6: return "ReLU6";
    case OperatorId::Acon: return "Acon";
    case OperatorId::TanhSoft1: return "TanhSoft1";
    case OperatorId::SRS: return "SRS";
    case OperatorId::Symlog: return "Symlog";
    case OperatorId::Symexp: return "Symexp";
    case OperatorId::Swish: return "Swish";
    case OperatorId::Tanh: return "Tanh";
    case OperatorId::HardSwish: return "HardSwish";
    case OperatorId::ELU: return "ELU";
    case OperatorId::GELU: return "GELU";
    case OperatorId::Softplus: return "Softplus";
    case OperatorId::LogisticSigmoid: return "LogisticSigmoid";
    case OperatorId::ReLU: return "ReLU";
  }
  return "?";
}

inline std::optional<OperatorId> parse_operator(std::string_view name) {
  for (auto op : kCatalog)
    if (to_string(op) == name) return op;
  if (name == "ReLU") return OperatorId::ReLU;
  return std::nullopt;
}

inline OperatorId operator_from_string(std::string_view name) {
  auto op = parse_operator(name);
  if (!op) throw FormatError("unknown activation operator '" + std::string(name) + "'");
  return *op;
}

// Internal shape constants of the composite operators. These are fixed
// per run and never trained; only the wrapper's alpha and beta are.
struct OperatorConstants {
  double srs_a = 2.0;
  double srs_b = 3.0;
  double acon_p1 = 1.0;
  double acon_p2 = 0.1;
  double acon_s = 1.0;
  double tanhsoft_c1 = 0.87;
  double tanhsoft_c2 = 0.6;
  double symexp_clamp = 30.0;
};

struct ParametricActivation {
  OperatorId op = OperatorId::ReLU;
  double alpha = 1.0;
  double beta = 1.0;
  bool trainable = false;

  friend bool operator==(const ParametricActivation&, const ParametricActivation&) = default;
};

namespace detail {
inline std::atomic<std::uint64_t>& symexp_saturations() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace detail

// Number of Symexp inputs clamped since process start (or the last reset).
inline std::uint64_t symexp_saturation_count() { return detail::symexp_saturations().load(); }
inline void reset_symexp_saturation_count() { detail::symexp_saturations().store(0); }

struct ValueAndSlope {
  double value;
  double slope;
};

// f(z) and f'(z) for the bare operator. At kinks the right-hand derivative is used.
[[gnu::always_inline]] inline ValueAndSlope unary(OperatorId op, double z, const OperatorConstants& k = {}) {
  switch (op) {
    case OperatorId::ReLU:
      return z >= 0 ? ValueAndSlope{z, 1.0} : ValueAndSlope{0.0, 0.0};
    case OperatorId::ReLU6:
      if (z < 0) return {0.0, 0.0};
      if (z >= 6) return {6.0, 0.0};
      return {z, 1.0};
    case OperatorId::Swish: {
      const double s = detail::sigmoid(z);
      return {z * s, s + z * s * (1.0 - s)};
    }
    case OperatorId::HardSwish:
      if (z < -3) return {0.0, 0.0};
      if (z >= 3) return {z, 1.0};
      return {z * (z + 3.0) / 6.0, (2.0 * z + 3.0) / 6.0};
    case OperatorId::Tanh: {
      const double t = std::tanh(z);
      return {t, 1.0 - t * t};
    }
    case OperatorId::ELU:
      if (z > 0) return {z, 1.0};
      return {std::expm1(z), std::exp(z)};
    case OperatorId::Softplus: {
      const double v = z > 30.0 ? z : std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
      return {v, detail::sigmoid(z)};
    }
    case OperatorId::LogisticSigmoid: {
      const double s = detail::sigmoid(z);
      return {s, s * (1.0 - s)};
    }
    case OperatorId::GELU: {
      constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
      constexpr double kCubic = 0.044715;
      const double u = kC * (z + kCubic * z * z * z);
      const double t = std::tanh(u);
      const double du = kC * (1.0 + 3.0 * kCubic * z * z);
      return {0.5 * z * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du};
    }
    case OperatorId::Symlog: {
      const double a = std::abs(z);
      return {std::copysign(std::log1p(a), z), 1.0 / (1.0 + a)};
    }
    case OperatorId::Symexp: {
      double a = std::abs(z);
      if (a > k.symexp_clamp) {
        detail::symexp_saturations().fetch_add(1, std::memory_order_relaxed);
        a = k.symexp_clamp;
        return {std::copysign(std::expm1(a), z), 0.0};
      }
      return {std::copysign(std::expm1(a), z), std::exp(a)};
    }
    case OperatorId::SRS: {
      const double q = -z / k.srs_b;
      if (q > 700.0) return {0.0, 0.0};
      const double e = std::exp(q);
      const double den = z / k.srs_a + e;
      return {z / den, e * (1.0 + z / k.srs_b) / (den * den)};
    }
    case OperatorId::Acon: {
      const double d = k.acon_p1 - k.acon_p2;
      const double s = detail::sigmoid(k.acon_s * d * z);
      return {d * z * s + k.acon_p2 * z, d * s + d * z * k.acon_s * d * s * (1.0 - s) + k.acon_p2};
    }
    case OperatorId::TanhSoft1: {
      const double p = k.tanhsoft_c2 * z;
      if (p > 50.0) return {z * std::tanh(k.tanhsoft_c1 * std::exp(50.0)), 1.0};
      const double u = k.tanhsoft_c1 * std::exp(p);
      const double t = std::tanh(u);
      return {z * t, t + z * (1.0 - t * t) * u * k.tanhsoft_c2};
    }
  }
  return {0.0, 0.0};
}

// Calls fn(std::integral_constant<OperatorId, op>{}) so hot loops can be
// instantiated once per operator instead of switching per element.
template <typename Fn>
decltype(auto) dispatch(OperatorId op, Fn&& fn) {
  using enum OperatorId;
  switch (op) {
    case ReLU6: return fn(std::integral_constant<OperatorId, ReLU6>{});
    case Acon: return fn(std::integral_constant<OperatorId, Acon>{});
    case TanhSoft1: return fn(std::integral_constant<OperatorId, TanhSoft1>{});
    case SRS: return fn(std::integral_constant<OperatorId, SRS>{});
    case Symlog: return fn(std::integral_constant<OperatorId, Symlog>{});
    case Symexp: return fn(std::integral_constant<OperatorId, Symexp>{});
    case Swish: return fn(std::integral_constant<OperatorId, Swish>{});
    case Tanh: return fn(std::integral_constant<OperatorId, Tanh>{});
    case HardSwish: return fn(std::integral_constant<OperatorId, HardSwish>{});
    case ELU: return fn(std::integral_constant<OperatorId, ELU>{});
    case GELU: return fn(std::integral_constant<OperatorId, GELU>{});
    case Softplus: return fn(std::integral_constant<OperatorId, Softplus>{});
    case LogisticSigmoid: return fn(std::integral_constant<OperatorId, LogisticSigmoid>{});
    case ReLU: break;
  }
  return fn(std::integral_constant<OperatorId, ReLU>{});
}

inline double eval(const ParametricActivation& act, double x, const OperatorConstants& k = {}) {
  return act.alpha * unary(act.op, act.beta * x, k).value;
}

struct ActivationGrads {
  double dy_dx;
  double dy_dalpha;
  double dy_dbeta;
};

inline ActivationGrads eval_grads(const ParametricActivation& act, double x,
                                  const OperatorConstants& k = {}) {
  const auto [f, df] = unary(act.op, act.beta * x, k);
  return {act.alpha * act.beta * df, f, act.alpha * x * df};
}

}  // namespace safs::activations
