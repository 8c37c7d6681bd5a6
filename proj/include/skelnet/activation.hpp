#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "skelnet/error.hpp"
#include "skelnet/quadrature.hpp"

namespace skelnet {

enum class ActKind { kReLU, kIdentity, kErf, kTanh };

/// An activation normalized to unit Gaussian second moment:
/// sigma(x) = scale * base(x) with E_{X~N(0,1)} sigma(X)^2 = 1.
///
/// `c_lipschitz` is the smallest C with sigma C-Lipschitz and |sigma(0)| <= C.
/// `c_bounded` is the smallest C bounding |sigma|, |sigma'| and |sigma''|
/// simultaneously; absent for activations where one of these is unbounded
/// (ReLU, identity).
struct ActivationSpec {
  ActKind kind;
  std::string name;
  double scale;
  double c_lipschitz;
  std::optional<double> c_bounded;
  bool smooth;  // false when sigma has a kink (ReLU)

  double operator()(double x) const {
    switch (kind) {
      case ActKind::kReLU:
        return x > 0.0 ? scale * x : 0.0;
      case ActKind::kIdentity:
        return x;
      case ActKind::kErf:
        return scale * std::erf(x);
      case ActKind::kTanh:
        return scale * std::tanh(x);
    }
    return 0.0;
  }

  // Derivative; the ReLU subgradient at 0 is fixed to 0 so back-propagation
  // is deterministic.
  double deriv(double x) const {
    switch (kind) {
      case ActKind::kReLU:
        return x > 0.0 ? scale : 0.0;
      case ActKind::kIdentity:
        return 1.0;
      case ActKind::kErf:
        return scale * (2.0 / std::sqrt(M_PI)) * std::exp(-x * x);
      case ActKind::kTanh: {
        const double t = std::tanh(x);
        return scale * (1.0 - t * t);
      }
    }
    return 0.0;
  }
};

namespace detail {

inline double base_eval(ActKind kind, double x) {
  switch (kind) {
    case ActKind::kReLU:
      return x > 0.0 ? x : 0.0;
    case ActKind::kIdentity:
      return x;
    case ActKind::kErf:
      return std::erf(x);
    case ActKind::kTanh:
      return std::tanh(x);
  }
  return 0.0;
}

inline double normalization_scale(ActKind kind, int quad_order = 64) {
  const double second_moment =
      gaussian_expectation([kind](double x) { const double v = base_eval(kind, x); return v * v; },
                           quad_order);
  return 1.0 / std::sqrt(second_moment);
}

inline std::vector<ActivationSpec> build_registry() {
  std::vector<ActivationSpec> acts;

  // ReLU: E max(0,X)^2 = 1/2 gives the analytic scale sqrt(2); the quadrature
  // value must agree (the rule's symmetric nodes integrate the odd part to 0).
  {
    const double quad_scale = normalization_scale(ActKind::kReLU);
    if (std::abs(quad_scale - M_SQRT2) > 1e-9) {
      throw Error("activation registry: ReLU normalization disagrees with sqrt(2)");
    }
    acts.push_back({ActKind::kReLU, "relu", M_SQRT2, M_SQRT2, std::nullopt, false});
  }

  acts.push_back({ActKind::kIdentity, "identity", 1.0, 1.0, std::nullopt, true});

  // erf: sup|sigma'| = scale * 2/sqrt(pi) at 0 dominates sup|sigma| = scale
  // and sup|sigma''| = scale * 4/sqrt(2 pi e).
  {
    const double s = normalization_scale(ActKind::kErf);
    const double c = s * 2.0 / std::sqrt(M_PI);
    acts.push_back({ActKind::kErf, "erf", s, c, c, true});
  }

  // tanh: sup|sigma| = sup|sigma'| = scale, sup|sigma''| = scale * 4/(3 sqrt(3)).
  {
    const double s = normalization_scale(ActKind::kTanh);
    acts.push_back({ActKind::kTanh, "tanh", s, s, s, true});
  }
  return acts;
}

}  // namespace detail

inline const std::vector<ActivationSpec>& activation_registry() {
  static const std::vector<ActivationSpec> registry = detail::build_registry();
  return registry;
}

inline const ActivationSpec& activation(std::string_view name) {
  for (const ActivationSpec& act : activation_registry()) {
    if (act.name == name) return act;
  }
  throw Error("unknown activation name: " + std::string(name));
}

inline const ActivationSpec& activation(ActKind kind) {
  for (const ActivationSpec& act : activation_registry()) {
    if (act.kind == kind) return act;
  }
  throw Error("activation kind not registered");
}

}  // namespace skelnet
