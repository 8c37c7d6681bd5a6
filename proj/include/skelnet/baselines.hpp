#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <functional>
#include <unordered_map>
#include <vector>

#include "skelnet/error.hpp"
#include "skelnet/kernel.hpp"
#include "skelnet/loss.hpp"

namespace skelnet {

/// Memoized symmetric kernel evaluations between examples of a fixed pool,
/// keyed by example index.  The margin perceptron re-scores its whole support
/// against every presented example, so caching turns the quadratic kernel
/// bill into one evaluation per distinct pair.
class GramCache {
 public:
  explicit GramCache(std::function<double(int, int)> eval) : eval_(std::move(eval)) {}

  static GramCache for_pool(const CompositionalKernel& kernel, const Eigen::MatrixXd& pool) {
    return GramCache([&kernel, &pool](int i, int j) {
      return kernel.unchecked(pool.col(i), pool.col(j));
    });
  }

  double operator()(int i, int j) {
    const std::uint64_t key =
        (static_cast<std::uint64_t>(std::min(i, j)) << 32) | static_cast<std::uint32_t>(std::max(i, j));
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    const double v = eval_(i, j);
    cache_.emplace(key, v);
    return v;
  }

  std::size_t evaluations() const { return cache_.size(); }

 private:
  std::function<double(int, int)> eval_;
  std::unordered_map<std::uint64_t, double> cache_;
};

/// Kernel-space margin perceptron.  On example (x, y) it scores every class
/// through the support expansion; when the true class fails to beat every
/// other class by the margin `a`, it appends the coefficient
/// e_y - e_{y_hat} with y_hat the best wrong class.  On a stream separable
/// with margin 1 by an operator of Frobenius norm <= M it makes at most
/// (2+2a) M^2 mistakes and ends with norm at most (2+2a) M.
class MarginPerceptron {
 public:
  MarginPerceptron(int classes, double margin)
      : classes_(classes), margin_(margin) {
    if (classes_ < 2) throw Error("perceptron: need at least two classes");
    if (margin_ < 0.0) throw Error("perceptron: margin must be nonnegative");
  }

  struct SupportEntry {
    int example = 0;
    int true_class = 0;
    int wrong_class = 0;  // coefficient is e_{true} - e_{wrong}
  };

  Eigen::VectorXd scores(int example, GramCache& gram) const {
    Eigen::VectorXd s = Eigen::VectorXd::Zero(classes_);
    for (const SupportEntry& entry : support_) {
      const double k = gram(entry.example, example);
      s(entry.true_class) += k;
      s(entry.wrong_class) -= k;
    }
    return s;
  }

  struct StepResult {
    int predicted = 0;
    bool updated = false;
  };

  StepResult step(int example, int label, GramCache& gram) {
    if (label < 0 || label >= classes_) throw Error("perceptron: label out of range");
    const Eigen::VectorXd s = scores(example, gram);
    StepResult result;
    s.maxCoeff(&result.predicted);  // ties resolve to the smallest index
    double best_other = -std::numeric_limits<double>::infinity();
    int arg_other = -1;
    for (int j = 0; j < classes_; ++j) {
      if (j != label && s(j) > best_other) {
        best_other = s(j);
        arg_other = j;
      }
    }
    if (s(label) < margin_ + best_other) {
      result.updated = true;
      support_.push_back({example, label, arg_other});
      ++mistakes_;
      // ||W + U||^2 = ||W||^2 + ||a||^2 k(x,x) + 2 <W, U>,
      // <W, U> = s(y) - s(y_hat).
      frob2_ += 2.0 * gram(example, example) + 2.0 * (s(label) - s(arg_other));
    }
    return result;
  }

  int mistakes() const { return mistakes_; }
  double frob_norm() const { return std::sqrt(std::max(0.0, frob2_)); }
  const std::vector<SupportEntry>& support() const { return support_; }

  // Full quadratic form over the support; the incremental bookkeeping above
  // must match this to rounding error.
  double frob_norm_direct(GramCache& gram) const {
    double sq = 0.0;
    for (const SupportEntry& a : support_) {
      for (const SupportEntry& b : support_) {
        double inner = 0.0;
        inner += a.true_class == b.true_class ? 1.0 : 0.0;
        inner -= a.true_class == b.wrong_class ? 1.0 : 0.0;
        inner -= a.wrong_class == b.true_class ? 1.0 : 0.0;
        inner += a.wrong_class == b.wrong_class ? 1.0 : 0.0;
        if (inner != 0.0) sq += inner * gram(a.example, b.example);
      }
    }
    return std::sqrt(std::max(0.0, sq));
  }

 private:
  int classes_;
  double margin_;
  int mistakes_ = 0;
  double frob2_ = 0.0;
  std::vector<SupportEntry> support_;
};

struct ProjectedSGDSchedule {
  double eta = 0.0;
  int steps = 0;
};

/// eta = eps / L^2 and T = M^2 L^2 / eps^2: the schedule under which the
/// averaged projected-SGD iterate is eps-suboptimal in the M-ball.
inline ProjectedSGDSchedule projected_sgd_schedule(double m_radius, double lipschitz, double eps) {
  ProjectedSGDSchedule s;
  s.eta = eps / (lipschitz * lipschitz);
  s.steps = static_cast<int>(std::ceil(m_radius * m_radius * lipschitz * lipschitz / (eps * eps)));
  return s;
}

/// Kernel-space SGD with projections onto the RKHS ball of radius M.  Each
/// update appends one coefficient of norm at most eta * L; projections rescale
/// the whole expansion, so the iterate norm never exceeds M.
class ProjectedKernelSGD {
 public:
  ProjectedKernelSGD(LossSpec loss, double lipschitz, double m_radius, double eta, int classes)
      : loss_(loss), lipschitz_(lipschitz), m_radius_(m_radius), eta_(eta), classes_(classes) {
    if (!loss_.convex()) {
      throw Error("projected kernel SGD requires a convex loss, got '" +
                  std::string(loss_.name()) + "'");
    }
    if (m_radius_ <= 0.0 || eta_ <= 0.0) throw Error("projected kernel SGD: M and eta must be positive");
  }

  Eigen::VectorXd evaluate(int example, GramCache& gram) const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(classes_);
    for (std::size_t i = 0; i < support_.size(); ++i) {
      out += coeffs_[i] * gram(examples_[i], example);
    }
    return out;
  }

  void step(int example, double label, GramCache& gram) {
    // Average of the pre-update iterates carries the guarantee.
    accumulate_average();
    const Eigen::VectorXd fx = evaluate(example, gram);
    const Eigen::VectorXd g = loss_grad(loss_, fx, label);
    if (g.norm() > lipschitz_ + 1e-9) {
      throw Error("projected kernel SGD: subgradient norm exceeds the declared Lipschitz bound");
    }
    const Eigen::VectorXd coeff = -eta_ * g;
    norm2_ += 2.0 * coeff.dot(fx) + coeff.squaredNorm() * gram(example, example);
    examples_.push_back(example);
    support_.push_back(examples_.size() - 1);
    coeffs_.push_back(coeff);
    avg_coeffs_.push_back(Eigen::VectorXd::Zero(classes_));
    if (norm2_ > m_radius_ * m_radius_) {
      const double scale = m_radius_ / std::sqrt(norm2_);
      for (auto& c : coeffs_) c *= scale;
      norm2_ = m_radius_ * m_radius_;
    }
    ++steps_;
  }

  int steps() const { return steps_; }
  double norm() const { return std::sqrt(std::max(0.0, norm2_)); }

  double norm_direct(GramCache& gram) const {
    double sq = 0.0;
    for (std::size_t i = 0; i < coeffs_.size(); ++i) {
      for (std::size_t j = 0; j < coeffs_.size(); ++j) {
        sq += coeffs_[i].dot(coeffs_[j]) * gram(examples_[i], examples_[j]);
      }
    }
    return std::sqrt(std::max(0.0, sq));
  }

  const std::vector<int>& support_examples() const { return examples_; }
  const std::vector<Eigen::VectorXd>& coefficients() const { return coeffs_; }

  // The averaged iterate (mean of the pre-update iterates seen so far).
  std::vector<Eigen::VectorXd> averaged_coefficients() const {
    std::vector<Eigen::VectorXd> avg = avg_coeffs_;
    const double denom = std::max(1, steps_);
    for (auto& c : avg) c /= denom;
    return avg;
  }

  Eigen::VectorXd evaluate_averaged(int example, GramCache& gram) const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(classes_);
    const double denom = std::max(1, steps_);
    for (std::size_t i = 0; i < support_.size(); ++i) {
      out += (avg_coeffs_[i] / denom) * gram(examples_[i], example);
    }
    return out;
  }

 private:
  void accumulate_average() {
    for (std::size_t i = 0; i < coeffs_.size(); ++i) avg_coeffs_[i] += coeffs_[i];
  }

  LossSpec loss_;
  double lipschitz_;
  double m_radius_;
  double eta_;
  int classes_;
  int steps_ = 0;
  double norm2_ = 0.0;
  std::vector<int> examples_;        // pool ids of support points
  std::vector<std::size_t> support_;
  std::vector<Eigen::VectorXd> coeffs_;
  std::vector<Eigen::VectorXd> avg_coeffs_;  // running sums of pre-update coefficients
};

/// Materialize a finite-support expansion over pool columns as a
/// kernel-space function.
inline KernelFunction expansion_as_kernel_function(const CompositionalKernel& kernel,
                                                   const Eigen::MatrixXd& pool,
                                                   const std::vector<int>& examples,
                                                   const std::vector<Eigen::VectorXd>& coeffs,
                                                   int classes) {
  Eigen::MatrixXd centers(pool.rows(), examples.size());
  Eigen::MatrixXd a(classes, examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    centers.col(i) = pool.col(examples[i]);
    a.col(i) = coeffs[i];
  }
  return KernelFunction(kernel, std::move(centers), std::move(a));
}

}  // namespace skelnet
