#pragma once

#include <Eigen/Core>
#include <cmath>
#include <memory>
#include <thread>
#include <vector>

#include "skelnet/conjugate.hpp"
#include "skelnet/error.hpp"
#include "skelnet/skeleton.hpp"

namespace skelnet {

/// Inputs are n unit blocks of dimension d stacked into one vector.
inline void check_unit_blocks(const Eigen::VectorXd& x, int n, int d, double tol = 1e-9) {
  if (x.size() != static_cast<Eigen::Index>(n) * d) {
    throw Error("input has " + std::to_string(x.size()) + " coordinates, expected " +
                std::to_string(n * d));
  }
  for (int i = 0; i < n; ++i) {
    const double nrm = x.segment(i * d, d).norm();
    if (std::abs(nrm - 1.0) > tol) {
      throw Error("input block " + std::to_string(i) + " is not unit norm (|" +
                  std::to_string(nrm) + " - 1| > tol)");
    }
  }
}

/// The compositional kernel of a skeleton: input node i contributes
/// <x^i, y^i>; an internal node v applies its conjugate activation to
/// (1-beta) * mean of parent kernels + beta.  Normalized: kappa(x,x) = 1.
class CompositionalKernel {
 public:
  CompositionalKernel(std::shared_ptr<const ComputationSkeleton> skeleton, double beta, int d)
      : skeleton_(std::move(skeleton)), beta_(beta), d_(d) {
    if (!(beta_ >= 0.0 && beta_ <= 1.0)) throw Error("beta must lie in [0,1]");
    if (d_ < 1) throw Error("block dimension must be positive");
    for (int v : skeleton_->internal_nodes()) {
      conj_.emplace_back(*skeleton_->node(v).activation);
    }
  }

  const ComputationSkeleton& skeleton() const { return *skeleton_; }
  std::shared_ptr<const ComputationSkeleton> skeleton_ptr() const { return skeleton_; }
  double beta() const { return beta_; }
  int d() const { return d_; }
  int input_dim() const { return skeleton_->input_count() * d_; }

  double operator()(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
    const int n = skeleton_->input_count();
    check_unit_blocks(x, n, d_);
    check_unit_blocks(y, n, d_);
    return unchecked(x, y);
  }

  // Same recursion without the unit-norm re-validation; used by Gram and
  // kernel-function loops over already validated centers.
  double unchecked(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
    std::vector<double> value(skeleton_->node_count(), 0.0);
    for (int v : skeleton_->input_nodes()) {
      const int b = skeleton_->node(v).input_block;
      value[v] = x.segment(b * d_, d_).dot(y.segment(b * d_, d_));
    }
    int ci = 0;
    for (int v : skeleton_->internal_nodes()) {
      const auto& parents = skeleton_->node(v).parents;
      double mean = 0.0;
      for (int p : parents) mean += value[p];
      mean /= static_cast<double>(parents.size());
      double rho = (1.0 - beta_) * mean + beta_;
      // Accumulated float error can push the mean past 1; clamp before the
      // conjugate (arccos domain).
      if (rho > 1.0) rho = 1.0;
      if (rho < -1.0) rho = -1.0;
      value[v] = conj_[ci++](rho);
    }
    return value[skeleton_->output()];
  }

 private:
  std::shared_ptr<const ComputationSkeleton> skeleton_;
  double beta_;
  int d_;
  std::vector<ConjugateActivation> conj_;  // by internal-node topo position
};

inline double compositional_kernel(std::shared_ptr<const ComputationSkeleton> s, double beta,
                                   int d, const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  return CompositionalKernel(std::move(s), beta, d)(x, y);
}

/// Gram matrix of kernel values between columns of `centers`.  Cells are
/// written independently (parallel over rows when `threads` > 1), so the
/// result is identical for any thread count.
inline Eigen::MatrixXd gram(const CompositionalKernel& kernel, const Eigen::MatrixXd& centers,
                            int threads = 1) {
  const int m = static_cast<int>(centers.cols());
  if (m < 1) throw Error("gram: need at least one center");
  for (int i = 0; i < m; ++i) {
    check_unit_blocks(centers.col(i), kernel.skeleton().input_count(), kernel.d());
  }
  Eigen::MatrixXd g(m, m);
  auto fill_rows = [&](int lo, int hi) {
    for (int i = lo; i < hi; ++i) {
      for (int j = i; j < m; ++j) {
        g(i, j) = kernel.unchecked(centers.col(i), centers.col(j));
      }
    }
  };
  if (threads <= 1 || m < 8) {
    fill_rows(0, m);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (m + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
      const int lo = t * chunk;
      const int hi = std::min(m, lo + chunk);
      if (lo < hi) pool.emplace_back(fill_rows, lo, hi);
    }
    for (auto& th : pool) th.join();
  }
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < i; ++j) g(i, j) = g(j, i);
  }
  return g;
}

/// A finite-support function in the kernel space: f = sum_i a_i kappa^{x_i}
/// with a_i in R^k (stored as columns of `coeffs`).
class KernelFunction {
 public:
  KernelFunction(CompositionalKernel kernel, Eigen::MatrixXd centers, Eigen::MatrixXd coeffs)
      : kernel_(std::move(kernel)), centers_(std::move(centers)), coeffs_(std::move(coeffs)) {
    if (coeffs_.cols() != centers_.cols()) {
      throw Error("kernel function: coefficient/center count mismatch");
    }
  }

  static KernelFunction zero(CompositionalKernel kernel, int k) {
    const int dim = kernel.input_dim();
    return KernelFunction(std::move(kernel), Eigen::MatrixXd(dim, 0), Eigen::MatrixXd(k, 0));
  }

  int output_dim() const { return static_cast<int>(coeffs_.rows()); }
  int support_size() const { return static_cast<int>(centers_.cols()); }
  const Eigen::MatrixXd& centers() const { return centers_; }
  const Eigen::MatrixXd& coeffs() const { return coeffs_; }
  const CompositionalKernel& kernel() const { return kernel_; }

  Eigen::VectorXd operator()(const Eigen::VectorXd& x) const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(output_dim());
    for (int i = 0; i < support_size(); ++i) {
      out += coeffs_.col(i) * kernel_.unchecked(centers_.col(i), x);
    }
    return out;
  }

  // Kernel values against the support, as a vector; the eval above is
  // coeffs * kernel_column(x).
  Eigen::VectorXd kernel_column(const Eigen::VectorXd& x) const {
    Eigen::VectorXd col(support_size());
    for (int i = 0; i < support_size(); ++i) col(i) = kernel_.unchecked(centers_.col(i), x);
    return col;
  }

  /// RKHS norm: sqrt(sum_{i,j} <a_i,a_j> kappa(x_i,x_j)).  A slightly
  /// negative radicand (>-1e-8) from float error is clamped to 0; anything
  /// below that signals a Gram computation bug and throws.
  double norm() const {
    if (support_size() == 0) return 0.0;
    const Eigen::MatrixXd g = gram(kernel_, centers_);
    const double sq = (coeffs_ * g * coeffs_.transpose()).trace();
    if (sq < -1e-8) throw Error("kernel function norm: negative quadratic form " + std::to_string(sq));
    return std::sqrt(std::max(0.0, sq));
  }

  KernelFunction& scale(double factor) {
    coeffs_ *= factor;
    return *this;
  }

 private:
  CompositionalKernel kernel_;
  Eigen::MatrixXd centers_;  // (n*d) x m
  Eigen::MatrixXd coeffs_;   // k x m
};

}  // namespace skelnet
