#pragma once

#include <cmath>
#include <vector>

#include "skelnet/activation.hpp"
#include "skelnet/error.hpp"
#include "skelnet/quadrature.hpp"

namespace skelnet {

// sigma_hat(rho) = E sigma(X) sigma(Y) over standard Gaussians with
// correlation rho.
enum class ConjugateMode { kClosedForm, kQuadrature, kHermiteSeries };

inline bool has_closed_form(const ActivationSpec& act) {
  return act.kind == ActKind::kReLU || act.kind == ActKind::kIdentity ||
         act.kind == ActKind::kErf;
}

inline ConjugateMode preferred_conjugate_mode(const ActivationSpec& act) {
  return has_closed_form(act) ? ConjugateMode::kClosedForm : ConjugateMode::kQuadrature;
}

namespace detail {

inline double clamp_correlation(double rho) {
  if (rho > 1.0 + 1e-9 || rho < -1.0 - 1e-9) {
    throw Error("conjugate_eval: correlation outside [-1,1]");
  }
  return rho > 1.0 ? 1.0 : (rho < -1.0 ? -1.0 : rho);
}

inline double conjugate_closed(const ActivationSpec& act, double rho) {
  switch (act.kind) {
    case ActKind::kReLU:
      return (std::sqrt(std::max(0.0, 1.0 - rho * rho)) + rho * (M_PI - std::acos(rho))) / M_PI;
    case ActKind::kIdentity:
      return rho;
    case ActKind::kErf:
      // For sigma = s * erf:  E erf(X) erf(Y) = (2/pi) asin(2 rho / 3).
      return act.scale * act.scale * (2.0 / M_PI) * std::asin(2.0 * rho / 3.0);
    default:
      throw Error("no closed-form conjugate for activation " + act.name);
  }
}

// Tensorized Gauss-Hermite over N_rho via the substitution
// Y = rho X + sqrt(1-rho^2) Z.  Spectrally accurate for smooth activations.
inline double conjugate_tensor_gh(const ActivationSpec& act, double rho, int order) {
  const QuadratureRule& rule = gauss_hermite_cached(order);
  const double tau = std::sqrt(std::max(0.0, 1.0 - rho * rho));
  const int n = order;
  std::vector<double> sx(n);
  for (int i = 0; i < n; ++i) sx[i] = act(M_SQRT2 * rule.nodes[i]);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = M_SQRT2 * rule.nodes[i];
    double inner = 0.0;
    for (int j = 0; j < n; ++j) {
      inner += rule.weights[j] * act(rho * x + tau * M_SQRT2 * rule.nodes[j]);
    }
    acc += rule.weights[i] * sx[i] * inner;
  }
  return acc / M_PI;
}

// ReLU's kink at 0 defeats the tensor rule, but the inner Gaussian
// expectation has a closed form:  E_Z max(0, a + tau Z) = a Phi(a/tau)
// + tau phi(a/tau).  What remains is a smooth integrand on the half line,
// integrated with an n-node Legendre rule under the explicit Gaussian
// weight.
inline double conjugate_relu_halfrange(const ActivationSpec& act, double rho, int order) {
  const double tau = std::sqrt(std::max(0.0, 1.0 - rho * rho));
  const QuadratureRule rule = gauss_legendre(order, 0.0, 12.0);
  const double inv_sqrt_2pi = 0.3989422804014327;
  double acc = 0.0;
  for (int i = 0; i < order; ++i) {
    const double x = rule.nodes[i];
    const double a = rho * x;
    double g;
    if (tau == 0.0) {
      g = a > 0.0 ? a : 0.0;
    } else {
      const double t = a / tau;
      g = a * 0.5 * (1.0 + std::erf(t / M_SQRT2)) + tau * inv_sqrt_2pi * std::exp(-0.5 * t * t);
    }
    acc += rule.weights[i] * x * g * inv_sqrt_2pi * std::exp(-0.5 * x * x);
  }
  return act.scale * act.scale * acc;
}

inline double conjugate_quadrature_at(const ActivationSpec& act, double rho, int order) {
  if (act.smooth) return conjugate_tensor_gh(act, rho, order);
  if (act.kind == ActKind::kReLU) return conjugate_relu_halfrange(act, rho, order);
  throw Error("no quadrature scheme for kinked activation " + act.name);
}

// Coefficients of sigma in the orthonormal Hermite basis,
// a_i = E sigma(X) He_i(X) / sqrt(i!).  For ReLU the same half-range split
// keeps the coefficient quadrature exact.
inline std::vector<double> hermite_coefficients(const ActivationSpec& act, int order) {
  std::vector<double> coeffs(order + 1, 0.0);
  const auto accumulate = [&](double x, double weight) {
    // He recurrence, normalized on the fly.
    double h_prev = 0.0;
    double h = 1.0;
    double norm = 1.0;  // sqrt(i!)
    for (int i = 0; i <= order; ++i) {
      coeffs[i] += weight * act(x) * h / norm;
      const double h_next = x * h - i * h_prev;
      h_prev = h;
      h = h_next;
      norm *= std::sqrt(double(i + 1));
    }
  };
  if (act.smooth) {
    const QuadratureRule& rule = gauss_hermite_cached(128);
    const double inv_sqrt_pi = 0.5641895835477563;
    for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
      accumulate(M_SQRT2 * rule.nodes[i], rule.weights[i] * inv_sqrt_pi);
    }
  } else {
    const QuadratureRule rule = gauss_legendre(128, 0.0, 12.0);
    const double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
      const double x = rule.nodes[i];
      accumulate(x, rule.weights[i] * inv_sqrt_2pi * std::exp(-0.5 * x * x));
    }
  }
  return coeffs;
}

}  // namespace detail

/// Evaluate the conjugate activation.  The quadrature mode computes the value
/// at orders 64 and 96 and reports non-convergence when they disagree beyond
/// 1e-6; the Hermite-series mode (truncation `series_order`) is a slowly
/// converging cross-check only.
inline double conjugate_eval(const ActivationSpec& act, double rho,
                             ConjugateMode mode = ConjugateMode::kClosedForm,
                             int series_order = 30) {
  rho = detail::clamp_correlation(rho);
  switch (mode) {
    case ConjugateMode::kClosedForm:
      return detail::conjugate_closed(act, rho);
    case ConjugateMode::kQuadrature: {
      const double v64 = detail::conjugate_quadrature_at(act, rho, 64);
      const double v96 = detail::conjugate_quadrature_at(act, rho, 96);
      if (std::abs(v64 - v96) > 1e-6) {
        throw Error("conjugate_eval: quadrature non-convergence for " + act.name);
      }
      return v64;
    }
    case ConjugateMode::kHermiteSeries: {
      const std::vector<double> a = detail::hermite_coefficients(act, series_order);
      double acc = 0.0;
      double rho_pow = 1.0;
      for (int i = 0; i <= series_order; ++i) {
        acc += a[i] * a[i] * rho_pow;
        rho_pow *= rho;
      }
      return acc;
    }
  }
  throw Error("conjugate_eval: unknown mode");
}

/// A reusable conjugate-activation evaluator.  Closed forms are used where
/// available; otherwise the 64-node quadrature path is used after a one-time
/// convergence and normalization check (sigma_hat(1) must equal ||sigma||^2
/// = 1).
class ConjugateActivation {
 public:
  explicit ConjugateActivation(const ActivationSpec& act,
                               ConjugateMode mode = ConjugateMode::kClosedForm,
                               int series_order = 30)
      : act_(act), mode_(mode), series_order_(series_order) {
    if (mode_ == ConjugateMode::kClosedForm && !has_closed_form(act_)) {
      mode_ = ConjugateMode::kQuadrature;
    }
    if (mode_ == ConjugateMode::kQuadrature) {
      const double at_one = conjugate_eval(act_, 1.0, ConjugateMode::kQuadrature);
      if (std::abs(at_one - 1.0) > 1e-6) {
        throw Error("activation " + act_.name + " is not normalized: sigma_hat(1) = " +
                    std::to_string(at_one));
      }
    }
    if (mode_ == ConjugateMode::kHermiteSeries) {
      coeffs_ = detail::hermite_coefficients(act_, series_order_);
    }
  }

  double operator()(double rho) const {
    rho = detail::clamp_correlation(rho);
    switch (mode_) {
      case ConjugateMode::kClosedForm:
        return detail::conjugate_closed(act_, rho);
      case ConjugateMode::kQuadrature:
        return detail::conjugate_quadrature_at(act_, rho, 64);
      case ConjugateMode::kHermiteSeries: {
        double acc = 0.0;
        double rho_pow = 1.0;
        for (double a : coeffs_) {
          acc += a * a * rho_pow;
          rho_pow *= rho;
        }
        return acc;
      }
    }
    return 0.0;
  }

  const ActivationSpec& source() const { return act_; }
  ConjugateMode mode() const { return mode_; }

 private:
  ActivationSpec act_;
  ConjugateMode mode_;
  int series_order_;
  std::vector<double> coeffs_;
};

}  // namespace skelnet
