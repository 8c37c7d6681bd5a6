#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "skelnet/error.hpp"
#include "skelnet/kernel.hpp"
#include "skelnet/rng.hpp"
#include "skelnet/skeleton.hpp"

namespace skelnet {

/// Spectral norm by power iteration on M^T M.  `warm`, when provided, seeds
/// the iteration and receives the final right singular vector, which makes
/// repeated calls on a slowly changing matrix cheap.
inline double spectral_norm(const Eigen::MatrixXd& m, double tol = 1e-8, int max_iter = 1000,
                            Eigen::VectorXd* warm = nullptr) {
  if (m.rows() == 0 || m.cols() == 0) return 0.0;
  Eigen::VectorXd v;
  if (warm && warm->size() == m.cols() && warm->norm() > 0.0) {
    v = *warm / warm->norm();
  } else {
    v = Eigen::VectorXd::LinSpaced(m.cols(), 1.0, 1.0 + 1e-3 * (double(m.cols()) - 1.0));
    v.normalize();
  }
  double sigma = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    Eigen::VectorXd mv = m * v;
    const double s = mv.norm();
    if (s == 0.0) return 0.0;
    Eigen::VectorXd next = m.transpose() * mv;
    const double nn = next.norm();
    if (nn == 0.0) return 0.0;
    v = next / nn;
    if (std::abs(s - sigma) <= tol * std::max(1.0, s)) {
      if (warm) *warm = v;
      return s;
    }
    sigma = s;
  }
  throw Error("spectral_norm: power iteration did not converge");
}

struct NodeMatrices {
  Eigen::MatrixXd w_int;  // r x (r * p_int), internal-parent column blocks
  Eigen::MatrixXd w_inp;  // r x (d * p_inp), input-parent column blocks
  Eigen::VectorXd bias;   // r
};

/// Aggregate weight norms.  agg2_prime is the max over internal nodes of
/// { ||W_int||_2, ||W_inp||_2 / sqrt(r), ||b||_2 / sqrt(r) }; agg2 also
/// includes ||W_pred||_2; frob is the Frobenius norm of the whole bundle
/// (biases entering as squared Euclidean norms).
struct WeightNorms {
  double agg2 = 0.0;
  double agg2_prime = 0.0;
  double frob = 0.0;
};

struct ForwardTrace {
  std::vector<Eigen::MatrixXd> pre;   // per internal node (topo order), r x B
  std::vector<Eigen::MatrixXd> post;  // per internal node (topo order), r x B
  Eigen::MatrixXd prediction;         // k x B

  const Eigen::MatrixXd& representation() const { return post.back(); }
};

/// The (r,k)-fold realization of a skeleton: every internal node carries r
/// neurons, input node i carries the d coordinates of block i, and k linear
/// output neurons read the representation layer through W_pred.
class RealizedNetwork {
 public:
  static constexpr std::int64_t kParameterCap = 100000000;

  static RealizedNetwork realize(std::shared_ptr<const ComputationSkeleton> skeleton, int r,
                                 int k, int d) {
    if (r < 1 || k < 1 || d < 1) throw Error("realize: r, k, d must be >= 1");
    RealizedNetwork net;
    net.skeleton_ = std::move(skeleton);
    net.r_ = r;
    net.k_ = k;
    net.d_ = d;
    std::int64_t params = static_cast<std::int64_t>(k) * r;
    const auto& s = *net.skeleton_;
    net.node_index_.assign(s.node_count(), -1);
    for (std::size_t i = 0; i < s.internal_nodes().size(); ++i) {
      const int v = s.internal_nodes()[i];
      net.node_index_[v] = static_cast<int>(i);
      int p_int = 0, p_inp = 0;
      for (int p : s.node(v).parents) (s.is_input(p) ? p_inp : p_int)++;
      params += static_cast<std::int64_t>(r) * r * p_int +
                static_cast<std::int64_t>(r) * d * p_inp + r;
      if (params > kParameterCap) {
        throw Error("realize: parameter count exceeds cap of " + std::to_string(kParameterCap));
      }
      NodeMatrices w;
      w.w_int = Eigen::MatrixXd::Zero(r, static_cast<Eigen::Index>(r) * p_int);
      w.w_inp = Eigen::MatrixXd::Zero(r, static_cast<Eigen::Index>(d) * p_inp);
      w.bias = Eigen::VectorXd::Zero(r);
      net.node_.push_back(std::move(w));
    }
    net.w_pred_ = Eigen::MatrixXd::Zero(k, r);
    return net;
  }

  const ComputationSkeleton& skeleton() const { return *skeleton_; }
  std::shared_ptr<const ComputationSkeleton> skeleton_ptr() const { return skeleton_; }
  int r() const { return r_; }
  int k() const { return k_; }
  int d() const { return d_; }
  double beta() const { return beta_; }
  std::uint64_t seed() const { return seed_; }
  int input_dim() const { return skeleton_->input_count() * d_; }

  std::vector<NodeMatrices>& node_weights() { return node_; }
  const std::vector<NodeMatrices>& node_weights() const { return node_; }
  Eigen::MatrixXd& prediction_matrix() { return w_pred_; }
  const Eigen::MatrixXd& prediction_matrix() const { return w_pred_; }

  /// beta-biased random initialization.  Entries of W_inp are
  /// N(0, (1-beta)/deg(v)), entries of W_int are N(0, (1-beta)/(r deg(v))),
  /// biases are N(0, beta) and W_pred is N(0, 1/r) unless
  /// `zero_prediction_layer` is set.  Each (node, matrix) pair draws from its
  /// own stream derived from (seed, topological index, role), filling
  /// row-major, so the result is independent of evaluation order.
  void init_beta_biased(double beta, std::uint64_t seed, bool zero_prediction_layer) {
    if (!(beta >= 0.0 && beta <= 1.0)) throw Error("init_beta_biased: beta must lie in [0,1]");
    beta_ = beta;
    seed_ = seed;
    const RngStream root(seed);
    const auto& s = *skeleton_;
    for (std::size_t i = 0; i < s.internal_nodes().size(); ++i) {
      const int v = s.internal_nodes()[i];
      const double deg = static_cast<double>(s.degree(v));
      const RngStream node_stream = root.derive(i);
      fill_gaussian(node_[i].w_inp, std::sqrt((1.0 - beta) / deg),
                    node_stream.derive(rng_role::kInputWeights));
      fill_gaussian(node_[i].w_int, std::sqrt((1.0 - beta) / (r_ * deg)),
                    node_stream.derive(rng_role::kInternalWeights));
      RngStream bias_stream = node_stream.derive(rng_role::kBias);
      const double bias_sd = std::sqrt(beta);
      for (int j = 0; j < r_; ++j) node_[i].bias(j) = bias_sd * bias_stream.next_gaussian();
    }
    if (zero_prediction_layer) {
      w_pred_.setZero();
    } else {
      fill_gaussian(w_pred_,
                    std::sqrt(1.0 / r_),
                    root.derive(s.internal_nodes().size()).derive(rng_role::kPrediction));
    }
  }

  /// Forward pass over a batch (columns of `x` are examples), keeping
  /// pre-activations for back-propagation.
  ForwardTrace forward_batch(const Eigen::MatrixXd& x, bool validate = true) const {
    ForwardTrace trace;
    trace.post.resize(node_.size());
    trace.pre.resize(node_.size());
    run_forward(x, validate, &trace.pre, trace.post);
    trace.prediction = w_pred_ * trace.post.back();
    if (trace.prediction.hasNaN()) throw Error("forward: NaN in prediction (activation overflow?)");
    return trace;
  }

  /// Representation-layer output R_x without retaining pre-activations.
  Eigen::MatrixXd representation_batch(const Eigen::MatrixXd& x, bool validate = true) const {
    std::vector<Eigen::MatrixXd> post(node_.size());
    run_forward(x, validate, nullptr, post);
    return std::move(post.back());
  }

  Eigen::MatrixXd predict_batch(const Eigen::MatrixXd& x, bool validate = true) const {
    return w_pred_ * representation_batch(x, validate);
  }

  ForwardTrace forward(const Eigen::VectorXd& x) const { return forward_batch(x); }

  Eigen::VectorXd predict(const Eigen::VectorXd& x) const {
    return predict_batch(Eigen::MatrixXd(x)).col(0);
  }

  /// Empirical kernel k_W(x, y) = <R_x, R_y> / r.
  double empirical_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
    Eigen::MatrixXd both(x.size(), 2);
    both.col(0) = x;
    both.col(1) = y;
    const Eigen::MatrixXd rep = representation_batch(both);
    return rep.col(0).dot(rep.col(1)) / static_cast<double>(r_);
  }

  WeightNorms weight_norms() const {
    WeightNorms norms;
    const double sqrt_r = std::sqrt(static_cast<double>(r_));
    double frob2 = 0.0;
    for (const NodeMatrices& w : node_) {
      norms.agg2_prime = std::max(norms.agg2_prime, spectral_norm(w.w_int));
      norms.agg2_prime = std::max(norms.agg2_prime, spectral_norm(w.w_inp) / sqrt_r);
      norms.agg2_prime = std::max(norms.agg2_prime, w.bias.norm() / sqrt_r);
      frob2 += w.w_int.squaredNorm() + w.w_inp.squaredNorm() + w.bias.squaredNorm();
    }
    norms.agg2 = std::max(norms.agg2_prime, spectral_norm(w_pred_));
    norms.frob = std::sqrt(frob2 + w_pred_.squaredNorm());
    return norms;
  }

  /// Membership in W_R (aggregate norm with the prediction layer) or W'_R
  /// (without it, when `include_pred` is false).
  bool in_ball(double radius, bool include_pred = true) const {
    const WeightNorms norms = weight_norms();
    return (include_pred ? norms.agg2 : norms.agg2_prime) <= radius;
  }

 private:
  void run_forward(const Eigen::MatrixXd& x, bool validate,
                   std::vector<Eigen::MatrixXd>* pre_out,
                   std::vector<Eigen::MatrixXd>& post) const {
    const auto& s = *skeleton_;
    if (x.rows() != input_dim()) {
      throw Error("forward: input has " + std::to_string(x.rows()) + " rows, expected " +
                  std::to_string(input_dim()));
    }
    if (validate) {
      for (Eigen::Index c = 0; c < x.cols(); ++c) check_unit_blocks(x.col(c), s.input_count(), d_);
    }
    const Eigen::Index batch = x.cols();
    for (std::size_t i = 0; i < s.internal_nodes().size(); ++i) {
      const int v = s.internal_nodes()[i];
      const NodeMatrices& w = node_[i];
      Eigen::MatrixXd pre = w.bias.replicate(1, batch);
      int int_slot = 0, inp_slot = 0;
      for (int p : s.node(v).parents) {
        if (s.is_input(p)) {
          const int block = s.node(p).input_block;
          pre.noalias() += w.w_inp.middleCols(static_cast<Eigen::Index>(inp_slot) * d_, d_) *
                           x.middleRows(static_cast<Eigen::Index>(block) * d_, d_);
          ++inp_slot;
        } else {
          pre.noalias() += w.w_int.middleCols(static_cast<Eigen::Index>(int_slot) * r_, r_) *
                           post[node_index_[p]];
          ++int_slot;
        }
      }
      const ActivationSpec& act = *s.node(v).activation;
      post[i] = pre.unaryExpr([&act](double z) { return act(z); });
      if (pre_out) (*pre_out)[i] = std::move(pre);
    }
  }

  static void fill_gaussian(Eigen::MatrixXd& m, double sd, RngStream stream) {
    for (Eigen::Index row = 0; row < m.rows(); ++row) {
      for (Eigen::Index col = 0; col < m.cols(); ++col) {
        m(row, col) = sd * stream.next_gaussian();
      }
    }
  }

  std::shared_ptr<const ComputationSkeleton> skeleton_;
  int r_ = 0, k_ = 0, d_ = 0;
  double beta_ = 0.0;
  std::uint64_t seed_ = 0;
  std::vector<NodeMatrices> node_;  // by internal-node topo position
  std::vector<int> node_index_;     // skeleton node index -> internal position
  Eigen::MatrixXd w_pred_;          // k x r

  friend void save_checkpoint(const RealizedNetwork&, const std::string&);
  friend RealizedNetwork load_checkpoint(const std::string&,
                                         std::shared_ptr<const ComputationSkeleton>);
};

// ---------------------------------------------------------------------------
// Checkpoint container: magic, version, skeleton hash, (r, k, d), beta, seed,
// then every matrix row-major.  Round-trips are bit exact.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_f64(std::ostream& out, double v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw Error("checkpoint: truncated file");
  return v;
}
inline double read_f64(std::istream& in) {
  double v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw Error("checkpoint: truncated file");
  return v;
}
inline void write_matrix(std::ostream& out, const Eigen::MatrixXd& m) {
  write_u64(out, static_cast<std::uint64_t>(m.rows()));
  write_u64(out, static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index row = 0; row < m.rows(); ++row) {
    for (Eigen::Index col = 0; col < m.cols(); ++col) write_f64(out, m(row, col));
  }
}
inline void read_matrix(std::istream& in, Eigen::MatrixXd& m) {
  const auto rows = static_cast<Eigen::Index>(read_u64(in));
  const auto cols = static_cast<Eigen::Index>(read_u64(in));
  if (rows != m.rows() || cols != m.cols()) throw Error("checkpoint: matrix shape mismatch");
  for (Eigen::Index row = 0; row < rows; ++row) {
    for (Eigen::Index col = 0; col < cols; ++col) m(row, col) = read_f64(in);
  }
}

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'S', 'K', 'N', 'W'};
inline constexpr std::uint64_t kCheckpointVersion = 1;

inline void save_checkpoint(const RealizedNetwork& net, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("checkpoint: cannot open '" + path + "' for writing");
  out.write(kCheckpointMagic, 4);
  detail::write_u64(out, kCheckpointVersion);
  detail::write_u64(out, skeleton_hash(net.skeleton()));
  detail::write_u64(out, static_cast<std::uint64_t>(net.r()));
  detail::write_u64(out, static_cast<std::uint64_t>(net.k()));
  detail::write_u64(out, static_cast<std::uint64_t>(net.d()));
  detail::write_f64(out, net.beta());
  detail::write_u64(out, net.seed());
  for (const NodeMatrices& w : net.node_) {
    detail::write_matrix(out, w.w_int);
    detail::write_matrix(out, w.w_inp);
    detail::write_matrix(out, w.bias);
  }
  detail::write_matrix(out, net.w_pred_);
  if (!out) throw Error("checkpoint: write failed for '" + path + "'");
}

inline RealizedNetwork load_checkpoint(const std::string& path,
                                       std::shared_ptr<const ComputationSkeleton> skeleton) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checkpoint: cannot open '" + path + "'");
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw Error("checkpoint: bad magic in '" + path + "'");
  }
  if (detail::read_u64(in) != kCheckpointVersion) throw Error("checkpoint: unsupported version");
  const std::uint64_t hash = detail::read_u64(in);
  if (hash != skeleton_hash(*skeleton)) {
    throw Error("checkpoint: skeleton hash mismatch (file was written for a different skeleton)");
  }
  const auto r = static_cast<int>(detail::read_u64(in));
  const auto k = static_cast<int>(detail::read_u64(in));
  const auto d = static_cast<int>(detail::read_u64(in));
  RealizedNetwork net = RealizedNetwork::realize(std::move(skeleton), r, k, d);
  net.beta_ = detail::read_f64(in);
  net.seed_ = detail::read_u64(in);
  for (NodeMatrices& w : net.node_) {
    Eigen::MatrixXd bias_m;
    detail::read_matrix(in, w.w_int);
    detail::read_matrix(in, w.w_inp);
    const auto rows = static_cast<Eigen::Index>(detail::read_u64(in));
    const auto cols = static_cast<Eigen::Index>(detail::read_u64(in));
    if (rows != w.bias.size() || cols != 1) throw Error("checkpoint: bias shape mismatch");
    for (Eigen::Index j = 0; j < rows; ++j) w.bias(j) = detail::read_f64(in);
  }
  detail::read_matrix(in, net.w_pred_);
  return net;
}

}  // namespace skelnet
