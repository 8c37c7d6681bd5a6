#pragma once

#include <Eigen/Core>
#include <cmath>
#include <string>

#include "skelnet/error.hpp"

namespace skelnet {

enum class LossKind { kSquare, kHinge, kLogistic, kZeroOne, kMargin };

/// Loss specification.  Label conventions:
///  - logistic, and zero-one/margin with k >= 2: label is a class index in
///    [0, k) stored as a double;
///  - hinge, and zero-one/margin with k == 1: label is +-1;
///  - square: k == 1 and the label is the real target.
struct LossSpec {
  LossKind kind = LossKind::kSquare;
  double margin = 0.0;  // kMargin only

  static LossSpec square() { return {LossKind::kSquare, 0.0}; }
  static LossSpec hinge() { return {LossKind::kHinge, 0.0}; }
  static LossSpec logistic() { return {LossKind::kLogistic, 0.0}; }
  static LossSpec zero_one() { return {LossKind::kZeroOne, 0.0}; }
  static LossSpec margin_loss(double gamma) { return {LossKind::kMargin, gamma}; }

  bool convex() const {
    return kind == LossKind::kSquare || kind == LossKind::kHinge || kind == LossKind::kLogistic;
  }
  bool differentiable() const {
    return kind == LossKind::kSquare || kind == LossKind::kHinge || kind == LossKind::kLogistic;
  }

  // Lipschitz constant of yhat -> loss(yhat, y); the logistic gradient is
  // p - e_y with norm at most sqrt(2).
  double lipschitz() const {
    switch (kind) {
      case LossKind::kHinge:
        return 1.0;
      case LossKind::kLogistic:
        return M_SQRT2;
      default:
        throw Error("loss has no global Lipschitz constant");
    }
  }

  const char* name() const {
    switch (kind) {
      case LossKind::kSquare: return "square";
      case LossKind::kHinge: return "hinge";
      case LossKind::kLogistic: return "logistic";
      case LossKind::kZeroOne: return "zero_one";
      case LossKind::kMargin: return "margin";
    }
    return "?";
  }
};

namespace detail {

inline int class_label(const LossSpec& spec, double label, int k) {
  const int y = static_cast<int>(label);
  if (static_cast<double>(y) != label || y < 0 || y >= k) {
    throw Error(std::string(spec.name()) + " loss: label " + std::to_string(label) +
                " out of range for k = " + std::to_string(k));
  }
  return y;
}

inline double sign_label(const LossSpec& spec, double label) {
  if (label != 1.0 && label != -1.0) {
    throw Error(std::string(spec.name()) + " loss: binary label must be +-1");
  }
  return label;
}

inline Eigen::VectorXd softmax(const Eigen::VectorXd& yhat) {
  Eigen::VectorXd p = (yhat.array() - yhat.maxCoeff()).exp();
  p /= p.sum();
  return p;
}

}  // namespace detail

inline double loss_eval(const LossSpec& spec, const Eigen::VectorXd& yhat, double label) {
  const int k = static_cast<int>(yhat.size());
  switch (spec.kind) {
    case LossKind::kSquare: {
      if (k != 1) throw Error("square loss requires k == 1");
      const double diff = yhat(0) - label;
      return diff * diff;
    }
    case LossKind::kHinge: {
      if (k != 1) throw Error("hinge loss requires k == 1");
      return std::max(0.0, 1.0 - yhat(0) * detail::sign_label(spec, label));
    }
    case LossKind::kLogistic: {
      const int y = detail::class_label(spec, label, k);
      const double zmax = yhat.maxCoeff();
      const double lse = zmax + std::log((yhat.array() - zmax).exp().sum());
      return lse - yhat(y);
    }
    case LossKind::kZeroOne:
    case LossKind::kMargin: {
      const double gamma = spec.kind == LossKind::kMargin ? spec.margin : 0.0;
      if (k == 1) {
        return yhat(0) * detail::sign_label(spec, label) <= gamma ? 1.0 : 0.0;
      }
      const int y = detail::class_label(spec, label, k);
      double best_other = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < k; ++j) {
        if (j != y) best_other = std::max(best_other, yhat(j));
      }
      return yhat(y) <= gamma + best_other ? 1.0 : 0.0;
    }
  }
  throw Error("loss_eval: unknown loss kind");
}

/// Gradient in yhat.  Hinge uses 0 at the kink; zero-one and margin losses
/// are not differentiable and are rejected.
inline Eigen::VectorXd loss_grad(const LossSpec& spec, const Eigen::VectorXd& yhat, double label) {
  const int k = static_cast<int>(yhat.size());
  switch (spec.kind) {
    case LossKind::kSquare: {
      if (k != 1) throw Error("square loss requires k == 1");
      Eigen::VectorXd g(1);
      g(0) = 2.0 * (yhat(0) - label);
      return g;
    }
    case LossKind::kHinge: {
      if (k != 1) throw Error("hinge loss requires k == 1");
      const double y = detail::sign_label(spec, label);
      Eigen::VectorXd g(1);
      g(0) = (1.0 - yhat(0) * y > 0.0) ? -y : 0.0;
      return g;
    }
    case LossKind::kLogistic: {
      const int y = detail::class_label(spec, label, k);
      Eigen::VectorXd g = detail::softmax(yhat);
      g(y) -= 1.0;
      return g;
    }
    default:
      throw Error(std::string(spec.name()) + " loss is not differentiable");
  }
}

}  // namespace skelnet
