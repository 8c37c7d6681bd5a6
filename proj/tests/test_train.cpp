#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <memory>

#include "skelnet/data.hpp"
#include "skelnet/experiments.hpp"
#include "skelnet/train.hpp"

using namespace skelnet;

namespace {

std::shared_ptr<const ComputationSkeleton> small_relu() {
  return layered_window_skeleton("relu", 3, 2);
}

Eigen::MatrixXd random_inputs(int n, int d, int count, RngStream& rng) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n) * d, count);
  for (int i = 0; i < count; ++i) x.col(i) = sample_block_sphere(n, d, rng);
  return x;
}

}  // namespace

TEST_CASE("zero prediction layer: internal gradients vanish, pred gradient is the softmax outer product") {
  auto s = small_relu();
  RealizedNetwork net = RealizedNetwork::realize(s, 12, 3, 2);
  net.init_beta_biased(0.0, 5, true);  // W_pred = 0
  RngStream rng(2);
  const Eigen::MatrixXd x = random_inputs(3, 2, 4, rng);
  const std::vector<double> labels = {0, 2, 1, 0};
  const ForwardTrace trace = net.forward_batch(x);
  const GradientBundle grads = backprop(net, x, labels, LossSpec::logistic());
  for (const NodeMatrices& g : grads.node) {
    REQUIRE(g.w_int.isZero(0.0));
    REQUIRE(g.w_inp.isZero(0.0));
    REQUIRE(g.bias.isZero(0.0));
  }
  // prediction gradient: average of ((1/k) 1 - e_y) outer R_x
  Eigen::MatrixXd expected = Eigen::MatrixXd::Zero(3, 12);
  for (int i = 0; i < 4; ++i) {
    Eigen::VectorXd g = Eigen::VectorXd::Constant(3, 1.0 / 3.0);
    g(int(labels[i])) -= 1.0;
    expected += g * trace.representation().col(i).transpose() / 4.0;
  }
  REQUIRE((grads.w_pred - expected).lpNorm<Eigen::Infinity>() < 1e-12);
}

TEST_CASE("backprop matches central finite differences on smooth nets") {
  GradCheckParams params;
  params.skeleton = layered_window_skeleton("erf", 4, 2, 2);
  params.coords = 200;
  params.seed = 3;
  const ExperimentReport report = exp_grad_check(params);
  REQUIRE(report.all_pass());
  REQUIRE(report.checks[0].observed <= 1e-5);
}

TEST_CASE("a batch of m copies has the single-example gradient") {
  auto s = small_relu();
  RealizedNetwork net = RealizedNetwork::realize(s, 8, 2, 3);
  net.init_beta_biased(0.25, 9, false);
  RngStream rng(4);
  const Eigen::VectorXd x = sample_block_sphere(3, 3, rng);
  Eigen::MatrixXd one(x.size(), 1), many(x.size(), 6);
  one.col(0) = x;
  for (int i = 0; i < 6; ++i) many.col(i) = x;
  const GradientBundle g1 = backprop(net, one, {1.0}, LossSpec::logistic());
  const GradientBundle g6 = backprop(net, many, std::vector<double>(6, 1.0), LossSpec::logistic());
  REQUIRE((g1.w_pred - g6.w_pred).lpNorm<Eigen::Infinity>() < 1e-12);
  for (std::size_t i = 0; i < g1.node.size(); ++i) {
    REQUIRE((g1.node[i].w_int - g6.node[i].w_int).lpNorm<Eigen::Infinity>() < 1e-12);
    REQUIRE((g1.node[i].w_inp - g6.node[i].w_inp).lpNorm<Eigen::Infinity>() < 1e-12);
  }
}

TEST_CASE("eta = 0 leaves the weights bit-identical; T = 0 leaves them untouched") {
  auto s = small_relu();
  TaskSpec task_spec;
  task_spec.kind = TaskKind::kKernelClassification;
  task_spec.skeleton = s;
  task_spec.d = 2;
  task_spec.k = 2;
  task_spec.target_norm = 2.0;
  task_spec.centers = 6;
  const SyntheticTask task = SyntheticTask::make(task_spec, 1);

  RealizedNetwork net = RealizedNetwork::realize(s, 16, 2, 2);
  net.init_beta_biased(0.0, 77, true);
  const RealizedNetwork before = net;

  SGDConfig config;
  config.eta_prime = 0.0;
  config.steps = 25;
  config.batch = 2;
  config.seed = 77;
  config.init_weights = false;
  TaskSource source(task, RngStream(77).derive(rng_role::kTrainData));
  const TrainTrace trace = sgd_run(net, config, source);
  REQUIRE(trace.total_steps == 25);
  for (std::size_t i = 0; i < net.node_weights().size(); ++i) {
    REQUIRE(net.node_weights()[i].w_int == before.node_weights()[i].w_int);
    REQUIRE(net.node_weights()[i].w_inp == before.node_weights()[i].w_inp);
    REQUIRE(net.node_weights()[i].bias == before.node_weights()[i].bias);
  }
  REQUIRE(net.prediction_matrix() == before.prediction_matrix());

  SGDConfig none = config;
  none.eta_prime = 0.5;
  none.steps = 0;
  const TrainTrace empty = sgd_run(net, none, source);
  REQUIRE(empty.steps.empty());
  REQUIRE(empty.snapshots.empty());
  REQUIRE(net.prediction_matrix() == before.prediction_matrix());
}

TEST_CASE("one step moves every weight by exactly -eta times the gradient") {
  auto s = small_relu();
  RealizedNetwork net = RealizedNetwork::realize(s, 8, 2, 2);
  net.init_beta_biased(0.3, 13, false);
  const RealizedNetwork w0 = net;

  RngStream rng(6);
  Eigen::MatrixXd x = random_inputs(3, 2, 3, rng);
  FixedSetSource source(x, {0, 1, 0});

  SGDConfig config;
  config.eta_prime = 0.4;
  config.steps = 1;
  config.batch = 3;
  config.init_weights = false;
  config.loss = LossSpec::logistic();
  sgd_run(net, config, source);

  const GradientBundle grads = backprop(w0, x, {0, 1, 0}, LossSpec::logistic());
  const double rate = 0.4 / 8.0;
  REQUIRE((net.prediction_matrix() - (w0.prediction_matrix() - rate * grads.w_pred))
              .lpNorm<Eigen::Infinity>() < 1e-15);
  for (std::size_t i = 0; i < grads.node.size(); ++i) {
    REQUIRE((net.node_weights()[i].w_inp -
             (w0.node_weights()[i].w_inp - rate * grads.node[i].w_inp))
                .lpNorm<Eigen::Infinity>() < 1e-15);
  }
}

TEST_CASE("last-layer mode equals an independent online gradient descent on frozen features") {
  auto s = small_relu();
  const int r = 10, k = 3, d = 2, m = 24;
  RealizedNetwork net = RealizedNetwork::realize(s, r, k, d);
  net.init_beta_biased(0.0, 21, true);

  RngStream rng(8);
  Eigen::MatrixXd x = random_inputs(3, d, m, rng);
  std::vector<double> labels(m);
  for (int i = 0; i < m; ++i) labels[i] = double(i % k);
  const Eigen::MatrixXd features = net.representation_batch(x);

  SGDConfig config;
  config.eta_prime = 0.7;
  config.steps = 40;
  config.batch = 1;
  config.init_weights = false;
  config.loss = LossSpec::logistic();
  FixedSetSource source(x, labels);
  last_layer_sgd(net, config, source);

  // Oracle: plain OGD over the cached features, same cyclic order.
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(k, r);
  const double rate = 0.7 / r;
  for (int t = 0; t < 40; ++t) {
    const int i = t % m;
    const Eigen::VectorXd g = loss_grad(LossSpec::logistic(), w * features.col(i), labels[i]);
    w -= rate * g * features.col(i).transpose();
  }
  REQUIRE((net.prediction_matrix() - w).lpNorm<Eigen::Infinity>() < 1e-12);

  // Internal weights must not have moved at all.
  RealizedNetwork fresh = RealizedNetwork::realize(s, r, k, d);
  fresh.init_beta_biased(0.0, 21, true);
  for (std::size_t i = 0; i < net.node_weights().size(); ++i) {
    REQUIRE(net.node_weights()[i].w_inp == fresh.node_weights()[i].w_inp);
  }
}

TEST_CASE("last-layer mode insists on a zero starting prediction layer") {
  auto s = small_relu();
  RealizedNetwork net = RealizedNetwork::realize(s, 6, 2, 2);
  net.init_beta_biased(0.0, 3, false);  // random prediction layer
  SGDConfig config;
  config.init_weights = false;
  RngStream rng(1);
  Eigen::MatrixXd x = random_inputs(3, 2, 2, rng);
  FixedSetSource source(x, {0, 1});
  REQUIRE_THROWS_AS(last_layer_sgd(net, config, source), Error);
}

TEST_CASE("divergence guard aborts exploding runs") {
  auto s = small_relu();
  RealizedNetwork net = RealizedNetwork::realize(s, 8, 1, 2);
  net.init_beta_biased(0.0, 5, false);
  RngStream rng(9);
  Eigen::MatrixXd x = random_inputs(3, 2, 4, rng);
  FixedSetSource source(x, {1e4, -1e4, 1e4, -1e4});
  SGDConfig config;
  config.eta_prime = 50.0;
  config.steps = 200;
  config.batch = 2;
  config.init_weights = false;
  config.loss = LossSpec::square();
  config.divergence_threshold = 1e6;
  REQUIRE_THROWS_WITH(sgd_run(net, config, source), Catch::Matchers::ContainsSubstring("divergence"));
}

TEST_CASE("online regret stays under the guarantee for any comparator") {
  auto s = small_relu();
  const int r = 16, k = 2, d = 2, m = 40, steps = 120;
  RealizedNetwork net = RealizedNetwork::realize(s, r, k, d);
  net.init_beta_biased(0.0, 31, true);
  RngStream rng(12);
  Eigen::MatrixXd x = random_inputs(3, d, m, rng);
  std::vector<double> labels(m);
  for (int i = 0; i < m; ++i) labels[i] = double(rng.next_u64() % k);
  const Eigen::MatrixXd features = net.representation_batch(x);

  SGDConfig config;
  config.eta_prime = 0.5;
  config.steps = steps;
  config.batch = 2;
  config.init_weights = false;
  config.loss = LossSpec::logistic();
  config.diag_stride = 1;
  FixedSetSource source(x, labels);
  const TrainTrace trace = last_layer_sgd(net, config, source);

  double played = 0.0, grad_sq = 0.0;
  REQUIRE(trace.steps.size() == std::size_t(steps));
  for (const StepRecord& rec : trace.steps) {
    played += rec.batch_loss;
    grad_sq += rec.grad_frob * rec.grad_frob;
  }
  const double rate = config.eta_prime / r;

  RngStream comp_rng(77);
  for (int candidate = 0; candidate < 3; ++candidate) {
    Eigen::MatrixXd w_star = Eigen::MatrixXd::Zero(k, r);
    if (candidate > 0) {
      for (int i = 0; i < k; ++i) {
        for (int j = 0; j < r; ++j) w_star(i, j) = 0.1 * candidate * comp_rng.next_gaussian();
      }
    }
    // Replay the same batch sequence against the comparator.
    double comparator = 0.0;
    for (int t = 0; t < steps; ++t) {
      double acc = 0.0;
      for (int b = 0; b < config.batch; ++b) {
        const int i = (t * config.batch + b) % m;
        acc += loss_eval(config.loss, w_star * features.col(i), labels[i]);
      }
      comparator += acc / config.batch;
    }
    const double bound = comparator + w_star.squaredNorm() / (2.0 * rate) + 0.5 * rate * grad_sq;
    REQUIRE(played <= bound + 1e-9);
  }
}

TEST_CASE("drift report: eta = 0 has zero drift, scaled-up weights violate the bound") {
  auto s = small_relu();
  const int r = 8;
  const double alpha = gd_change_alpha(*s, LossSpec::logistic().lipschitz());

  RealizedNetwork net = RealizedNetwork::realize(s, r, 2, 2);
  RngStream rng(3);
  SGDDiagnostics diag;
  diag.probes = random_inputs(3, 2, 3, rng);

  struct Labels : DataSource {
    RngStream rng{42};
    void next_batch(int count, Eigen::MatrixXd& x, std::vector<double>& labels) override {
      x.resize(6, count);
      labels.resize(count);
      for (int i = 0; i < count; ++i) {
        x.col(i) = sample_block_sphere(3, 2, rng);
        labels[i] = double(rng.next_u64() % 2);
      }
    }
  } source;

  SGDConfig config;
  config.eta_prime = 0.0;
  config.steps = 10;
  config.batch = 2;
  config.beta = 0.25;
  config.seed = 4;
  config.diag_stride = 1;
  const TrainTrace still = sgd_run(net, config, source, diag);
  const DriftReport quiet = drift_report(still, alpha, config.eta_prime, r);
  REQUIRE(quiet.violations == 0);
  for (const DriftCheck& check : quiet.checks) REQUIRE(check.observed == 0.0);

  // Start far outside W_1.5; the lemma's precondition fails and the checker
  // must be able to fire.
  net.init_beta_biased(0.0, 5, false);
  for (NodeMatrices& w : net.node_weights()) {
    w.w_int *= 60.0;
    w.w_inp *= 60.0;
  }
  SGDConfig wild = config;
  const double window_target = 8.0;
  wild.eta_prime = std::sqrt(double(r)) / (2.0 * alpha * window_target);
  wild.init_weights = false;
  wild.steps = 8;
  wild.divergence_threshold = 1e12;
  const TrainTrace rough = sgd_run(net, wild, source, diag);
  const DriftReport report = drift_report(rough, alpha, wild.eta_prime, r);
  REQUIRE(report.violations >= 1);
}

TEST_CASE("directional derivative: equality case and zero direction") {
  auto s = small_relu();
  RealizedNetwork net = RealizedNetwork::realize(s, 8, 3, 2);
  net.init_beta_biased(0.0, 8, false);
  RngStream rng(10);
  Eigen::MatrixXd x = random_inputs(3, 2, 5, rng);
  const std::vector<double> labels = {0, 1, 2, 1, 0};
  const GradientBundle grads = backprop(net, x, labels, LossSpec::logistic(), true);

  const Eigen::MatrixXd descent = -grads.w_pred;
  const double dd = directional_derivative(net, descent, x, labels, LossSpec::logistic());
  REQUIRE(dd == Catch::Approx(-grads.w_pred.norm()).margin(1e-12));

  REQUIRE_THROWS_AS(
      directional_derivative(net, Eigen::MatrixXd::Zero(3, 8), x, labels, LossSpec::logistic()),
      Error);
}

TEST_CASE("directional derivative is nearly flat on confidently separated batches") {
  auto s = small_relu();
  RealizedNetwork net = RealizedNetwork::realize(s, 8, 3, 2);
  net.init_beta_biased(0.0, 15, false);
  net.prediction_matrix() *= 20.0;  // saturate the softmax
  RngStream rng(11);
  Eigen::MatrixXd x = random_inputs(3, 2, 8, rng);
  std::vector<double> labels(8);
  const Eigen::MatrixXd pred = net.predict_batch(x);
  for (int i = 0; i < 8; ++i) {
    int arg;
    pred.col(i).maxCoeff(&arg);
    labels[i] = arg;
  }
  const double dd =
      directional_derivative(net, net.prediction_matrix(), x, labels, LossSpec::logistic());
  REQUIRE(dd >= -0.05);
  REQUIRE(dd <= 1e-6);
}

TEST_CASE("a margin separator is a certified descent direction under errors") {
  // Linear features through an identity node so predictions are W_pred x.
  SkeletonDraft draft;
  draft.add_input("x").add_node("h", "identity", {"x"}).set_output("h");
  auto s = std::make_shared<const ComputationSkeleton>(draft);
  const int d = 6, k = 3;
  RealizedNetwork net = RealizedNetwork::realize(s, d, k, d);
  net.node_weights()[0].w_inp = Eigen::MatrixXd::Identity(d, d);
  // W_pred = 0: every example is a 0-1 mistake (ties lose).

  RngStream rng(14);
  Eigen::MatrixXd w_star(k, d);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < d; ++j) w_star(i, j) = rng.next_gaussian();
  }
  w_star *= 6.0 / w_star.norm();

  // Margin-1 separable pool under w_star.
  const int m = 60;
  Eigen::MatrixXd x(d, m);
  std::vector<double> labels(m);
  for (int i = 0; i < m;) {
    const Eigen::VectorXd cand = sample_block_sphere(1, d, rng);
    const Eigen::VectorXd scores = w_star * cand;
    int best;
    scores.maxCoeff(&best);
    double second = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < k; ++j) {
      if (j != best) second = std::max(second, scores(j));
    }
    if (scores(best) >= 1.0 + second) {
      x.col(i) = cand;
      labels[i] = best;
      ++i;
    }
  }
  const double dd = directional_derivative(net, w_star, x, labels, LossSpec::logistic());
  // 0-1 loss is 1 and the separator has zero margin loss, so the derivative
  // along it is at most -(1 - 0) / (2 ||W*||_F).
  REQUIRE(dd <= -1.0 / (2.0 * w_star.norm()) + 1e-9);
}

TEST_CASE("snapshots cover strided steps and running minima") {
  auto s = small_relu();
  RealizedNetwork net = RealizedNetwork::realize(s, 8, 2, 2);
  RngStream rng(20);
  Eigen::MatrixXd x = random_inputs(3, 2, 10, rng);
  std::vector<double> labels(10);
  for (int i = 0; i < 10; ++i) labels[i] = double(i % 2);
  FixedSetSource source(x, labels);
  SGDConfig config;
  config.eta_prime = 0.2;
  config.steps = 30;
  config.batch = 2;
  config.seed = 5;
  config.snapshot_stride = 10;
  config.keep_snapshot_weights = true;
  int callbacks = 0;
  SGDDiagnostics diag;
  diag.on_snapshot = [&](int, const RealizedNetwork&, double) { ++callbacks; };
  const TrainTrace trace = sgd_run(net, config, source, diag);
  REQUIRE(!trace.snapshots.empty());
  REQUIRE(callbacks == int(trace.snapshots.size()));
  REQUIRE(trace.snapshots.back().step == 30);
  REQUIRE(trace.snapshot_weights.size() == trace.snapshots.size());
  bool strided = false;
  for (const SnapshotRecord& snap : trace.snapshots) strided |= (snap.step == 10);
  REQUIRE(strided);
}
