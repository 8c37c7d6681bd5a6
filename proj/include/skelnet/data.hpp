#pragma once

#include <Eigen/Core>
#include <cmath>
#include <memory>
#include <optional>
#include <vector>

#include "skelnet/error.hpp"
#include "skelnet/kernel.hpp"
#include "skelnet/rng.hpp"
#include "skelnet/train.hpp"

namespace skelnet {

/// Uniform sample on (S^{d-1})^n: one normalized Gaussian draw per block.
inline Eigen::VectorXd sample_block_sphere(int n, int d, RngStream& rng) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(n) * d);
  for (int b = 0; b < n; ++b) {
    double norm2 = 0.0;
    do {
      for (int j = 0; j < d; ++j) {
        const double g = rng.next_gaussian();
        x(b * d + j) = g;
        norm2 += g * g;
      }
    } while (norm2 == 0.0);
    x.segment(b * d, d) /= std::sqrt(norm2);
    norm2 = 0.0;
  }
  return x;
}

enum class TaskKind { kKernelRegression, kKernelClassification, kPolynomial };

struct TaskSpec {
  TaskKind kind = TaskKind::kKernelRegression;
  std::shared_ptr<const ComputationSkeleton> skeleton;  // kernel kinds
  double beta = 0.0;
  int d = 2;
  int k = 1;                // outputs (classes for classification)
  double target_norm = 1.0; // RKHS norm M of the planted function
  int centers = 16;         // support size cap (also capped at 4 M^2)
  double noise = 0.0;       // regression label noise
  double margin = 1.0;      // classification separation margin
  int degree = 2;           // polynomial kind (only 2 is implemented)
};

/// A synthetic task with a planted target: a kernel-space function of norm
/// exactly M for the kernel kinds, or a degree-2 polynomial (x.v)^2 - c on
/// the sphere.  Classification tasks rejection-sample inputs until the
/// planted function separates them with the requested margin, so the
/// resulting distribution is M-separable by construction.
class SyntheticTask {
 public:
  static SyntheticTask make(const TaskSpec& spec, std::uint64_t seed) {
    SyntheticTask task;
    task.spec_ = spec;
    RngStream rng = RngStream(seed).derive(rng_role::kTask);
    switch (spec.kind) {
      case TaskKind::kPolynomial: {
        if (spec.degree != 2) throw Error("synthetic task: only degree-2 polynomials are implemented");
        task.n_ = 1;
        Eigen::VectorXd v(spec.d);
        for (int i = 0; i < spec.d; ++i) v(i) = rng.next_gaussian();
        v.normalize();
        task.poly_direction_ = v;
        task.poly_offset_ = 1.0 / spec.d;  // E (x.v)^2 on S^{d-1}
        return task;
      }
      case TaskKind::kKernelRegression:
      case TaskKind::kKernelClassification: {
        if (!spec.skeleton) throw Error("synthetic task: kernel kinds need a skeleton");
        if (spec.kind == TaskKind::kKernelClassification) {
          if (spec.target_norm <= 0.0) {
            throw Error("synthetic task: classification with planted norm 0 is degenerate");
          }
          if (spec.k < 2) throw Error("synthetic task: classification needs k >= 2");
        }
        task.n_ = spec.skeleton->input_count();
        CompositionalKernel kernel(spec.skeleton, spec.beta, spec.d);
        if (spec.target_norm == 0.0) {
          task.planted_.emplace(KernelFunction::zero(kernel, spec.k));
          return task;
        }
        const int m_cap = static_cast<int>(4.0 * spec.target_norm * spec.target_norm);
        const int m = std::max(1, std::min(spec.centers, m_cap));
        Eigen::MatrixXd centers(static_cast<Eigen::Index>(task.n_) * spec.d, m);
        Eigen::MatrixXd coeffs(spec.k, m);
        for (int attempt = 0;; ++attempt) {
          for (int i = 0; i < m; ++i) centers.col(i) = sample_block_sphere(task.n_, spec.d, rng);
          for (int i = 0; i < m; ++i) {
            for (int j = 0; j < spec.k; ++j) coeffs(j, i) = rng.next_gaussian();
          }
          KernelFunction h(kernel, centers, coeffs);
          const double norm = h.norm();
          if (norm > 1e-8) {
            h.scale(spec.target_norm / norm);
            task.planted_.emplace(std::move(h));
            break;
          }
          if (attempt > 100) throw Error("synthetic task: degenerate planted function");
        }
        return task;
      }
    }
    throw Error("synthetic task: unknown kind");
  }

  int n() const { return n_; }
  int d() const { return spec_.d; }
  int k() const { return spec_.k; }
  int input_dim() const { return n_ * spec_.d; }
  const TaskSpec& spec() const { return spec_; }
  const KernelFunction& planted() const {
    if (!planted_) throw Error("synthetic task: no planted kernel function");
    return *planted_;
  }
  const Eigen::VectorXd& polynomial_direction() const { return poly_direction_; }
  double polynomial_offset() const { return poly_offset_; }

  struct Example {
    Eigen::VectorXd x;
    double label = 0.0;
  };

  static constexpr int kRejectionBudget = 1000000;

  Example sample(RngStream& rng) const {
    switch (spec_.kind) {
      case TaskKind::kPolynomial: {
        Example ex;
        ex.x = sample_block_sphere(n_, spec_.d, rng);
        const double z = poly_direction_.dot(ex.x);
        ex.label = z * z - poly_offset_;
        if (spec_.noise > 0.0) ex.label += spec_.noise * rng.next_gaussian();
        return ex;
      }
      case TaskKind::kKernelRegression: {
        Example ex;
        ex.x = sample_block_sphere(n_, spec_.d, rng);
        ex.label = (*planted_)(ex.x)(0);
        if (spec_.noise > 0.0) ex.label += spec_.noise * rng.next_gaussian();
        return ex;
      }
      case TaskKind::kKernelClassification: {
        for (int attempt = 0; attempt < kRejectionBudget; ++attempt) {
          Example ex;
          ex.x = sample_block_sphere(n_, spec_.d, rng);
          const Eigen::VectorXd values = (*planted_)(ex.x);
          int best;
          values.maxCoeff(&best);
          double second = -std::numeric_limits<double>::infinity();
          for (int j = 0; j < spec_.k; ++j) {
            if (j != best) second = std::max(second, values(j));
          }
          if (values(best) >= spec_.margin + second) {
            ex.label = best;
            return ex;
          }
        }
        throw Error("synthetic task: margin rejection exceeded " +
                    std::to_string(kRejectionBudget) + " attempts");
      }
    }
    throw Error("synthetic task: unknown kind");
  }

  void sample_batch(int count, RngStream& rng, Eigen::MatrixXd& x,
                    std::vector<double>& labels) const {
    x.resize(input_dim(), count);
    labels.resize(count);
    for (int i = 0; i < count; ++i) {
      Example ex = sample(rng);
      x.col(i) = ex.x;
      labels[i] = ex.label;
    }
  }

 private:
  TaskSpec spec_;
  int n_ = 1;
  std::optional<KernelFunction> planted_;
  Eigen::VectorXd poly_direction_;
  double poly_offset_ = 0.0;
};

/// Fresh-batch source: every batch is sampled i.i.d. from the task.
class TaskSource : public DataSource {
 public:
  TaskSource(const SyntheticTask& task, RngStream stream) : task_(&task), stream_(stream) {}

  void next_batch(int count, Eigen::MatrixXd& x, std::vector<double>& labels) override {
    task_->sample_batch(count, stream_, x, labels);
  }

 private:
  const SyntheticTask* task_;
  RngStream stream_;
};

/// Fixed-set source: cycles a materialized training set in order.
class FixedSetSource : public DataSource {
 public:
  FixedSetSource(Eigen::MatrixXd x, std::vector<double> labels)
      : x_(std::move(x)), labels_(std::move(labels)) {
    if (x_.cols() != static_cast<Eigen::Index>(labels_.size()) || labels_.empty()) {
      throw Error("fixed-set source: empty set or size mismatch");
    }
  }

  void next_batch(int count, Eigen::MatrixXd& x, std::vector<double>& labels) override {
    x.resize(x_.rows(), count);
    labels.resize(count);
    for (int i = 0; i < count; ++i) {
      x.col(i) = x_.col(cursor_);
      labels[i] = labels_[cursor_];
      cursor_ = (cursor_ + 1) % static_cast<int>(x_.cols());
    }
  }

 private:
  Eigen::MatrixXd x_;
  std::vector<double> labels_;
  int cursor_ = 0;
};

}  // namespace skelnet
