#pragma once

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "skelnet/error.hpp"
#include "skelnet/loss.hpp"
#include "skelnet/network.hpp"
#include "skelnet/rng.hpp"

namespace skelnet {

/// Supplies mini-batches.  Fresh-batch sources sample i.i.d. examples; a
/// fixed-set source cycles a materialized training set.
class DataSource {
 public:
  virtual ~DataSource() = default;
  virtual void next_batch(int count, Eigen::MatrixXd& x, std::vector<double>& labels) = 0;
};

struct GradientBundle {
  std::vector<NodeMatrices> node;  // empty when only the last layer was differentiated
  Eigen::MatrixXd w_pred;
  bool has_internal = false;

  double frob() const {
    double sq = w_pred.squaredNorm();
    for (const NodeMatrices& g : node) {
      sq += g.w_int.squaredNorm() + g.w_inp.squaredNorm() + g.bias.squaredNorm();
    }
    return std::sqrt(sq);
  }
  // Largest per-block Frobenius norm (each W^v, each bias, W_pred).
  double max_block_frob() const {
    double best = w_pred.norm();
    for (const NodeMatrices& g : node) {
      best = std::max({best, std::sqrt(g.w_int.squaredNorm() + g.w_inp.squaredNorm()), g.bias.norm()});
    }
    return best;
  }
};

/// Mini-batch gradient of the mean loss by reverse accumulation through the
/// realized network.  Exact for smooth activations; the ReLU subgradient at 0
/// is 0.  Input coordinates are constants and get no gradient.
inline GradientBundle backprop_from_trace(const RealizedNetwork& net, const Eigen::MatrixXd& x,
                                          const ForwardTrace& trace,
                                          const std::vector<double>& labels, const LossSpec& loss,
                                          bool last_layer_only = false) {
  const auto& s = net.skeleton();
  const Eigen::Index batch = x.cols();
  if (static_cast<Eigen::Index>(labels.size()) != batch) {
    throw Error("backprop: label count does not match batch size");
  }
  const double inv_b = 1.0 / static_cast<double>(batch);
  Eigen::MatrixXd gout(net.k(), batch);
  for (Eigen::Index i = 0; i < batch; ++i) {
    gout.col(i) = inv_b * loss_grad(loss, trace.prediction.col(i), labels[i]);
  }
  if (gout.hasNaN()) throw Error("backprop: NaN in loss gradient");

  GradientBundle grads;
  grads.w_pred.noalias() = gout * trace.representation().transpose();
  if (last_layer_only) return grads;

  grads.has_internal = true;
  const auto& internals = s.internal_nodes();
  const int n_int = static_cast<int>(internals.size());
  std::vector<int> node_pos(s.node_count(), -1);
  for (int i = 0; i < n_int; ++i) node_pos[internals[i]] = i;

  std::vector<Eigen::MatrixXd> delta(n_int);  // dL/dR^v
  delta[n_int - 1].noalias() = net.prediction_matrix().transpose() * gout;
  grads.node.resize(n_int);

  const int r = net.r(), d = net.d();
  for (int i = n_int - 1; i >= 0; --i) {
    const int v = internals[i];
    const NodeMatrices& w = net.node_weights()[i];
    NodeMatrices& g = grads.node[i];
    if (delta[i].size() == 0) {  // node feeds nothing that was reached (cannot happen: single sink)
      delta[i] = Eigen::MatrixXd::Zero(r, batch);
    }
    const ActivationSpec& act = *s.node(v).activation;
    Eigen::MatrixXd dpre =
        delta[i].array() * trace.pre[i].unaryExpr([&act](double z) { return act.deriv(z); }).array();
    g.bias = dpre.rowwise().sum();
    g.w_int.resize(w.w_int.rows(), w.w_int.cols());
    g.w_inp.resize(w.w_inp.rows(), w.w_inp.cols());
    int int_slot = 0, inp_slot = 0;
    for (int p : s.node(v).parents) {
      if (s.is_input(p)) {
        const int block = s.node(p).input_block;
        g.w_inp.middleCols(static_cast<Eigen::Index>(inp_slot) * d, d).noalias() =
            dpre * x.middleRows(static_cast<Eigen::Index>(block) * d, d).transpose();
        ++inp_slot;
      } else {
        const int pi = node_pos[p];
        g.w_int.middleCols(static_cast<Eigen::Index>(int_slot) * r, r).noalias() =
            dpre * trace.post[pi].transpose();
        Eigen::MatrixXd up =
            w.w_int.middleCols(static_cast<Eigen::Index>(int_slot) * r, r).transpose() * dpre;
        if (delta[pi].size() == 0) {
          delta[pi] = std::move(up);
        } else {
          delta[pi] += up;
        }
        ++int_slot;
      }
    }
  }
  return grads;
}

inline GradientBundle backprop(const RealizedNetwork& net, const Eigen::MatrixXd& x,
                               const std::vector<double>& labels, const LossSpec& loss,
                               bool last_layer_only = false) {
  return backprop_from_trace(net, x, net.forward_batch(x), labels, loss, last_layer_only);
}

inline double batch_loss(const LossSpec& loss, const Eigen::MatrixXd& predictions,
                         const std::vector<double>& labels) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < predictions.cols(); ++i) {
    acc += loss_eval(loss, predictions.col(i), labels[i]);
  }
  return acc / static_cast<double>(predictions.cols());
}

/// One plain SGD step: every weight moves by exactly -rate * gradient.
inline void apply_sgd_step(RealizedNetwork& net, const GradientBundle& grads, double rate) {
  net.prediction_matrix().noalias() -= rate * grads.w_pred;
  if (!grads.has_internal) return;
  auto& weights = net.node_weights();
  for (std::size_t i = 0; i < weights.size(); ++i) {
    weights[i].w_int.noalias() -= rate * grads.node[i].w_int;
    weights[i].w_inp.noalias() -= rate * grads.node[i].w_inp;
    weights[i].bias.noalias() -= rate * grads.node[i].bias;
  }
}

struct SGDConfig {
  double eta_prime = 0.1;  // scaled rate; the applied rate is eta_prime / r
  int steps = 100;         // T
  int batch = 1;           // m
  double beta = 0.0;
  bool zero_prediction_layer = true;
  std::uint64_t seed = 0;
  LossSpec loss = LossSpec::logistic();
  bool last_layer_only = false;
  bool init_weights = true;  // false: train the caller-prepared weights as-is
  double divergence_threshold = 1e6;
  int snapshot_stride = 0;  // 0: max(1, steps/512)
  int diag_stride = 1;      // drift/norm recording cadence; 0 disables
  bool keep_snapshot_weights = false;
};

struct StepRecord {
  int step = 0;
  double batch_loss = std::numeric_limits<double>::quiet_NaN();
  double pop_loss = std::numeric_limits<double>::quiet_NaN();  // filled by experiments
  double drift_max = std::numeric_limits<double>::quiet_NaN();
  double agg2_prime = std::numeric_limits<double>::quiet_NaN();
  double agg2 = std::numeric_limits<double>::quiet_NaN();
  double grad_frob = std::numeric_limits<double>::quiet_NaN();
  double dir_deriv = std::numeric_limits<double>::quiet_NaN();
};

struct SnapshotRecord {
  int step = 0;
  double batch_loss = 0.0;
  int weights_index = -1;  // into TrainTrace::snapshot_weights when retained
};

struct TrainTrace {
  std::vector<StepRecord> steps;
  std::vector<SnapshotRecord> snapshots;
  std::vector<RealizedNetwork> snapshot_weights;
  int total_steps = 0;
};

/// Optional instrumentation for a training run.
struct SGDDiagnostics {
  // Inputs whose representation drift ||R_x(W_t) - R_x(W_0)|| is tracked.
  Eigen::MatrixXd probes;
  // Direction (a k x r prediction matrix) for per-step directional
  // derivatives of the batch loss.
  const Eigen::MatrixXd* dir_matrix = nullptr;
  // Called at every snapshot; the theorems assert existence of a good
  // t in [T], so consumers scan these.
  std::function<void(int step, const RealizedNetwork& net, double batch_loss)> on_snapshot;
};

/// Mini-batch SGD (generic network training): beta-biased initialization,
/// T gradient steps at rate eta_prime / r, optional last-layer-only mode.
/// Weight snapshots are taken every `snapshot_stride` steps plus whenever the
/// batch loss reaches a running minimum, and always at the final step.
inline TrainTrace sgd_run(RealizedNetwork& net, const SGDConfig& config, DataSource& source,
                          const SGDDiagnostics& diag = {}) {
  if (config.eta_prime < 0.0) throw Error("sgd_run: negative learning rate");
  if (config.steps < 0 || config.batch < 1) throw Error("sgd_run: bad steps/batch");
  if (!config.loss.differentiable()) {
    throw Error("sgd_run: loss '" + std::string(config.loss.name()) + "' is not differentiable");
  }
  if (config.init_weights) {
    net.init_beta_biased(config.beta, config.seed, config.zero_prediction_layer);
  }
  const double rate = config.eta_prime / static_cast<double>(net.r());
  const int stride =
      config.snapshot_stride > 0 ? config.snapshot_stride : std::max(1, config.steps / 512);

  TrainTrace trace;
  trace.total_steps = config.steps;

  Eigen::MatrixXd probe_base;
  if (diag.probes.cols() > 0) probe_base = net.representation_batch(diag.probes);
  Eigen::MatrixXd dir_unit;
  if (diag.dir_matrix) {
    const double nrm = diag.dir_matrix->norm();
    if (nrm == 0.0) throw Error("sgd_run: zero direction matrix");
    dir_unit = *diag.dir_matrix / nrm;
  }

  // Warm-started power-iteration vectors, one per weight matrix.
  std::vector<Eigen::VectorXd> warm_int(net.node_weights().size()), warm_inp(net.node_weights().size());
  Eigen::VectorXd warm_pred;

  Eigen::MatrixXd x;
  std::vector<double> labels;
  double running_min = std::numeric_limits<double>::infinity();

  for (int t = 1; t <= config.steps; ++t) {
    source.next_batch(config.batch, x, labels);
    const ForwardTrace fwd = net.forward_batch(x);
    const double loss_now = batch_loss(config.loss, fwd.prediction, labels);
    if (!std::isfinite(loss_now) || loss_now > config.divergence_threshold) {
      throw Error("sgd_run: divergence at step " + std::to_string(t) + " (batch loss " +
                  std::to_string(loss_now) + ")");
    }
    const GradientBundle grads =
        backprop_from_trace(net, x, fwd, labels, config.loss, config.last_layer_only);
    apply_sgd_step(net, grads, rate);

    const bool record = config.diag_stride > 0 && (t % config.diag_stride == 0 || t == config.steps);
    if (record) {
      StepRecord rec;
      rec.step = t;
      rec.batch_loss = loss_now;
      rec.grad_frob = grads.frob();
      if (diag.probes.cols() > 0) {
        const Eigen::MatrixXd rep = net.representation_batch(diag.probes, false);
        rec.drift_max = (rep - probe_base).colwise().norm().maxCoeff();
      }
      if (diag.dir_matrix) rec.dir_deriv = (grads.w_pred.array() * dir_unit.array()).sum();
      const double sqrt_r = std::sqrt(static_cast<double>(net.r()));
      double agg_prime = 0.0;
      for (std::size_t i = 0; i < net.node_weights().size(); ++i) {
        const NodeMatrices& w = net.node_weights()[i];
        agg_prime = std::max(agg_prime, spectral_norm(w.w_int, 1e-8, 1000, &warm_int[i]));
        agg_prime = std::max(agg_prime, spectral_norm(w.w_inp, 1e-8, 1000, &warm_inp[i]) / sqrt_r);
        agg_prime = std::max(agg_prime, w.bias.norm() / sqrt_r);
      }
      rec.agg2_prime = agg_prime;
      rec.agg2 = std::max(agg_prime, spectral_norm(net.prediction_matrix(), 1e-8, 1000, &warm_pred));
      trace.steps.push_back(rec);
    }

    const bool improved = loss_now < running_min;
    if (improved) running_min = loss_now;
    if (t % stride == 0 || t == config.steps || improved) {
      SnapshotRecord snap;
      snap.step = t;
      snap.batch_loss = loss_now;
      if (config.keep_snapshot_weights) {
        snap.weights_index = static_cast<int>(trace.snapshot_weights.size());
        trace.snapshot_weights.push_back(net);
      }
      trace.snapshots.push_back(snap);
      if (diag.on_snapshot) diag.on_snapshot(t, net, loss_now);
    }
  }
  return trace;
}

/// SGD on the prediction matrix only, over the frozen representation
/// (the convex regime the online-learning analysis covers).  Requires a zero
/// starting prediction layer.
inline TrainTrace last_layer_sgd(RealizedNetwork& net, SGDConfig config, DataSource& source,
                                 const SGDDiagnostics& diag = {}) {
  config.last_layer_only = true;
  if (config.init_weights) {
    if (!config.zero_prediction_layer) {
      throw Error("last_layer_sgd: initialization must zero the prediction layer");
    }
  } else if (!net.prediction_matrix().isZero(0.0)) {
    throw Error("last_layer_sgd: prediction layer must start at zero");
  }
  return sgd_run(net, config, source, diag);
}

/// alpha = 2 L (3C)^depth sqrt(comp(S)) with C the skeleton's minimal
/// Lipschitz/|sigma(0)| activation bound; the drift and gradient bounds
/// below are stated in terms of it.
inline double gd_change_alpha(const ComputationSkeleton& skeleton, double loss_lipschitz) {
  const SkeletonMetrics m = skeleton_metrics(skeleton);
  return 2.0 * loss_lipschitz * std::pow(3.0 * m.lipschitz_c, m.depth) * std::sqrt(m.comp);
}

struct DriftCheck {
  int step = 0;
  double observed = 0.0;
  double bound = 0.0;
  bool in_window = false;  // step <= sqrt(r) / (2 eta' alpha)
  bool violation = false;
};

struct DriftReport {
  std::vector<DriftCheck> checks;
  int violations = 0;
  double window_steps = 0.0;
  double alpha = 0.0;
};

/// Compares recorded representation drift against the bound t * eta' * alpha^2,
/// which holds for t within the window t <= sqrt(r) / (2 eta' alpha) provided
/// the run started inside W_1.5.
inline DriftReport drift_report(const TrainTrace& trace, double alpha, double eta_prime, int r) {
  DriftReport report;
  report.alpha = alpha;
  report.window_steps =
      eta_prime > 0.0 ? std::sqrt(static_cast<double>(r)) / (2.0 * eta_prime * alpha)
                      : std::numeric_limits<double>::infinity();
  for (const StepRecord& rec : trace.steps) {
    if (std::isnan(rec.drift_max)) continue;
    DriftCheck check;
    check.step = rec.step;
    check.observed = rec.drift_max;
    check.bound = rec.step * eta_prime * alpha * alpha;
    check.in_window = rec.step <= report.window_steps;
    check.violation = check.in_window && check.observed > check.bound + 1e-9;
    if (check.violation) ++report.violations;
    report.checks.push_back(check);
  }
  return report;
}

/// Directional derivative of the batch loss along a prediction-matrix
/// direction W* (normalized to unit Frobenius norm).
inline double directional_derivative(const RealizedNetwork& net, const Eigen::MatrixXd& w_star,
                                     const Eigen::MatrixXd& x, const std::vector<double>& labels,
                                     const LossSpec& loss) {
  const double nrm = w_star.norm();
  if (nrm == 0.0) throw Error("directional_derivative: zero direction");
  const GradientBundle grads = backprop(net, x, labels, loss, /*last_layer_only=*/true);
  return (grads.w_pred.array() * (w_star / nrm).array()).sum();
}

}  // namespace skelnet
