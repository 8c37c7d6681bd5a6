#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "skelnet/baselines.hpp"
#include "skelnet/data.hpp"
#include "skelnet/io.hpp"
#include "skelnet/kernel.hpp"
#include "skelnet/network.hpp"
#include "skelnet/train.hpp"

namespace skelnet {

struct CheckResult {
  std::string id;
  bool pass = false;
  double observed = 0.0;
  double threshold = 0.0;
  std::string note;
};

struct ExperimentReport {
  std::string name;
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
  std::vector<CheckResult> checks;

  bool all_pass() const {
    for (const auto& c : checks) {
      if (!c.pass) return false;
    }
    return true;
  }

  void echo(const std::string& key, const std::string& value) { config.emplace_back(key, value); }
  void echo(const std::string& key, double value) {
    std::ostringstream os;
    os << value;
    config.emplace_back(key, os.str());
  }
};

inline void write_report(const ExperimentReport& report, const std::string& dir) {
  ensure_directory(dir);
  {
    CsvWriter csv(dir + "/report.csv", report.columns);
    for (const auto& row : report.rows) csv.row(row);
  }
  std::ofstream out(dir + "/summary.txt");
  if (!out) throw Error("cannot write summary in '" + dir + "'");
  out << "experiment: " << report.name << "\n";
  for (const auto& [k, v] : report.config) out << "  " << k << " = " << v << "\n";
  out << "\n";
  out.precision(10);
  for (const auto& c : report.checks) {
    out << (c.pass ? "PASS " : "FAIL ") << c.id << ": observed=" << c.observed
        << " threshold=" << c.threshold;
    if (!c.note.empty()) out << "  (" << c.note << ")";
    out << "\n";
  }
  out << (report.all_pass() ? "OVERALL PASS" : "OVERALL FAIL") << "\n";
}

// ---------------------------------------------------------------------------
// Canned skeleton builders used by experiments and the CLI examples.
// ---------------------------------------------------------------------------

/// Layered skeleton: hidden layer 1 holds one node per width-`window` window
/// of consecutive inputs, each further hidden layer windows the previous
/// layer, and a single output node reads the whole last hidden layer.
/// depth = hidden_layers + 1.
inline std::shared_ptr<const ComputationSkeleton> layered_window_skeleton(
    const std::string& activation, int inputs, int window, int hidden_layers = 1) {
  if (inputs < 1 || window < 1 || window > inputs || hidden_layers < 0) {
    throw Error("layered_window_skeleton: bad shape parameters");
  }
  SkeletonDraft draft;
  std::vector<std::string> prev;
  for (int i = 0; i < inputs; ++i) {
    std::string id = "x" + std::to_string(i + 1);
    draft.add_input(id);
    prev.push_back(std::move(id));
  }
  for (int layer = 1; layer <= hidden_layers; ++layer) {
    const int count = static_cast<int>(prev.size()) - window + 1;
    if (count < 1) throw Error("layered_window_skeleton: layer narrower than window");
    std::vector<std::string> cur;
    for (int i = 0; i < count; ++i) {
      std::string id = "h" + std::to_string(layer) + "_" + std::to_string(i + 1);
      draft.add_node(id, activation, {prev.begin() + i, prev.begin() + i + window});
      cur.push_back(std::move(id));
    }
    prev = std::move(cur);
  }
  draft.add_node("out", activation, prev);
  draft.set_output("out");
  return std::make_shared<const ComputationSkeleton>(draft);
}

namespace detail {

inline void parallel_over(int jobs, int threads, const std::function<void(int)>& fn) {
  if (threads <= 1 || jobs <= 1) {
    for (int i = 0; i < jobs; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::mutex mu;
  int next = 0;
  auto worker = [&] {
    for (;;) {
      int job;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= jobs) return;
        job = next++;
      }
      fn(job);
    }
  };
  const int n = std::min(threads, jobs);
  pool.reserve(n);
  for (int i = 0; i < n; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw Error("median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

inline double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double standard_error(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double sq = 0.0;
  for (double x : v) sq += (x - m) * (x - m);
  return std::sqrt(sq / (static_cast<double>(v.size()) - 1.0) /
                   static_cast<double>(v.size()));
}

}  // namespace detail

/// Mean loss over a held-out set, evaluated in chunks.
inline double population_loss(const RealizedNetwork& net, const LossSpec& loss,
                              const Eigen::MatrixXd& x, const std::vector<double>& labels,
                              int chunk = 256) {
  double acc = 0.0;
  for (Eigen::Index lo = 0; lo < x.cols(); lo += chunk) {
    const Eigen::Index width = std::min<Eigen::Index>(chunk, x.cols() - lo);
    const Eigen::MatrixXd pred = net.predict_batch(x.middleCols(lo, width), false);
    for (Eigen::Index i = 0; i < width; ++i) {
      acc += loss_eval(loss, pred.col(i), labels[lo + i]);
    }
  }
  return acc / static_cast<double>(x.cols());
}

inline double kernel_population_loss(const KernelFunction& f, const LossSpec& loss,
                                     const Eigen::MatrixXd& x, const std::vector<double>& labels) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < x.cols(); ++i) {
    acc += loss_eval(loss, f(x.col(i)), labels[i]);
  }
  return acc / static_cast<double>(x.cols());
}

// ---------------------------------------------------------------------------
// Kernel concentration: |k_W - kappa_S| against the replication parameter.
// ---------------------------------------------------------------------------

struct KernelConcentrationParams {
  std::shared_ptr<const ComputationSkeleton> skeleton;
  double beta = 0.0;
  int d = 10;
  std::vector<int> r_grid = {64, 256, 1024};
  int seeds = 20;
  int pairs = 100;
  std::uint64_t seed = 1;
  int threads = 2;
  // Checks: the sqrt(r) rate between two grid points, and the per-pair error
  // tail at the largest width.
  int ratio_r_lo = 64, ratio_r_hi = 1024;
  double ratio_min = 2.5, ratio_max = 6.0;
  int tail_r = 0;  // 0 disables the tail check
  int tail_seeds = 5;
  double tail_eps = 0.1;
  double tail_frac = 0.95;
};

inline ExperimentReport exp_kernel_concentration(const KernelConcentrationParams& params) {
  ExperimentReport report;
  report.name = "kernel-concentration";
  report.echo("beta", params.beta);
  report.echo("d", params.d);
  report.echo("pairs", params.pairs);
  report.echo("seeds", params.seeds);
  report.columns = {"r", "seeds", "median_err", "mean_err", "p95_err", "frac_within_eps"};

  const int n = params.skeleton->input_count();
  RngStream pair_stream = RngStream(params.seed).derive(rng_role::kEvalData);
  Eigen::MatrixXd xs(static_cast<Eigen::Index>(n) * params.d, params.pairs);
  Eigen::MatrixXd ys(xs.rows(), params.pairs);
  for (int i = 0; i < params.pairs; ++i) {
    xs.col(i) = sample_block_sphere(n, params.d, pair_stream);
    ys.col(i) = sample_block_sphere(n, params.d, pair_stream);
  }
  CompositionalKernel kernel(params.skeleton, params.beta, params.d);
  std::vector<double> kappa(params.pairs);
  for (int i = 0; i < params.pairs; ++i) kappa[i] = kernel.unchecked(xs.col(i), ys.col(i));

  std::vector<int> grid = params.r_grid;
  if (params.tail_r > 0 && std::find(grid.begin(), grid.end(), params.tail_r) == grid.end()) {
    grid.push_back(params.tail_r);
  }
  std::map<int, std::vector<double>> errors;  // r -> pooled |k_W - kappa|
  for (int r : grid) {
    const int seeds = (r == params.tail_r) ? params.tail_seeds : params.seeds;
    std::vector<std::vector<double>> per_seed(seeds);
    detail::parallel_over(seeds, params.threads, [&](int s) {
      RealizedNetwork net = RealizedNetwork::realize(params.skeleton, r, 1, params.d);
      net.init_beta_biased(params.beta, params.seed + 1000 * (s + 1) + r, true);
      const Eigen::MatrixXd rep_x = net.representation_batch(xs, false);
      const Eigen::MatrixXd rep_y = net.representation_batch(ys, false);
      per_seed[s].resize(params.pairs);
      for (int i = 0; i < params.pairs; ++i) {
        const double kw = rep_x.col(i).dot(rep_y.col(i)) / static_cast<double>(r);
        per_seed[s][i] = std::abs(kw - kappa[i]);
      }
    });
    auto& pooled = errors[r];
    for (auto& v : per_seed) pooled.insert(pooled.end(), v.begin(), v.end());
    std::vector<double> sorted = pooled;
    std::sort(sorted.begin(), sorted.end());
    const double med = detail::median(pooled);
    const double p95 = sorted[static_cast<std::size_t>(0.95 * (sorted.size() - 1))];
    double within = 0.0;
    for (double e : pooled) within += (e <= params.tail_eps) ? 1.0 : 0.0;
    within /= static_cast<double>(pooled.size());
    report.rows.push_back({double(r), double(seeds), med, detail::mean(pooled), p95, within});
  }

  if (errors.count(params.ratio_r_lo) && errors.count(params.ratio_r_hi)) {
    const double ratio = detail::median(errors[params.ratio_r_lo]) /
                         detail::median(errors[params.ratio_r_hi]);
    CheckResult check;
    check.id = "concentration_rate_ratio";
    check.observed = ratio;
    check.threshold = params.ratio_max;
    check.pass = ratio >= params.ratio_min && ratio <= params.ratio_max;
    std::ostringstream note;
    note << "median err(r=" << params.ratio_r_lo << ")/err(r=" << params.ratio_r_hi
         << "), expected in [" << params.ratio_min << "," << params.ratio_max << "]";
    check.note = note.str();
    report.checks.push_back(check);
  }
  if (params.tail_r > 0) {
    double within = 0.0;
    for (double e : errors[params.tail_r]) within += (e <= params.tail_eps) ? 1.0 : 0.0;
    within /= static_cast<double>(errors[params.tail_r].size());
    CheckResult check;
    check.id = "concentration_tail";
    check.observed = within;
    check.threshold = params.tail_frac;
    check.pass = within >= params.tail_frac;
    std::ostringstream note;
    note << "fraction of pairs with |k_W - kappa| <= " << params.tail_eps << " at r=" << params.tail_r;
    check.note = note.str();
    report.checks.push_back(check);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Initial conditions: init loss bound, Gaussian max bound, norm-ball
// frequency and the Gaussian-matrix spectral norm bound.
// ---------------------------------------------------------------------------

struct InitConditionsParams {
  std::shared_ptr<const ComputationSkeleton> skeleton;  // C-bounded activations
  double beta = 0.25;
  int d = 10;
  int r = 512;
  std::vector<int> ks = {2, 10};
  int seeds = 20;
  int loss_samples = 200;
  std::vector<int> gauss_ks = {2, 10, 100};
  int gauss_trials = 100000;
  int ball_seeds = 100;
  int ball_r = 2048;
  double ball_radius = 1.5;
  double ball_min_frac = 0.95;
  int matrix_trials = 1000;
  int matrix_rows = 100, matrix_cols = 60;
  double matrix_alpha = 0.5;
  double matrix_min_frac = 0.99;
  std::uint64_t seed = 1;
  int threads = 2;
};

inline ExperimentReport exp_init_conditions(const InitConditionsParams& params) {
  ExperimentReport report;
  report.name = "init-conditions";
  report.echo("beta", params.beta);
  report.echo("r", params.r);
  report.echo("d", params.d);
  report.columns = {"k", "mean_init_loss", "se", "bound"};

  const SkeletonMetrics metrics = skeleton_metrics(*params.skeleton);
  if (!metrics.bounded_c) {
    throw Error("exp_init_conditions: skeleton has non-C-bounded activations");
  }
  const double c = *metrics.bounded_c;
  const int n = params.skeleton->input_count();

  // Mean initial logistic loss under random prediction layers.
  for (int k : params.ks) {
    std::vector<double> per_seed(params.seeds);
    detail::parallel_over(params.seeds, params.threads, [&](int s) {
      RealizedNetwork net = RealizedNetwork::realize(params.skeleton, params.r, k, params.d);
      net.init_beta_biased(params.beta, params.seed + 17 * (s + 1), false);
      RngStream rng = RngStream(params.seed).derive(rng_role::kEvalData).derive(s);
      Eigen::MatrixXd x(static_cast<Eigen::Index>(n) * params.d, params.loss_samples);
      std::vector<double> labels(params.loss_samples);
      RngStream label_rng = rng.derive(7);
      for (int i = 0; i < params.loss_samples; ++i) {
        x.col(i) = sample_block_sphere(n, params.d, rng);
        labels[i] = static_cast<double>(label_rng.next_u64() % k);
      }
      per_seed[s] = population_loss(net, LossSpec::logistic(), x, labels);
    });
    const double m = detail::mean(per_seed);
    const double se = detail::standard_error(per_seed);
    const double bound = (1.0 + c * M_SQRT2) * std::log(double(k));
    report.rows.push_back({double(k), m, se, bound});
    CheckResult check;
    check.id = "init_loss_bound_k" + std::to_string(k);
    check.observed = m;
    check.threshold = bound + 3.0 * se;
    check.pass = m <= check.threshold;
    check.note = "mean initial logistic loss vs (1 + C sqrt(2)) log k + 3 SE, C=" + std::to_string(c);
    report.checks.push_back(check);
  }

  // E max of k standard Gaussians vs sqrt(2 log k).
  {
    RngStream rng = RngStream(params.seed).derive(rng_role::kProbeData);
    for (int k : params.gauss_ks) {
      double acc = 0.0;
      for (int trial = 0; trial < params.gauss_trials; ++trial) {
        double best = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < k; ++j) best = std::max(best, rng.next_gaussian());
        acc += best;
      }
      const double observed = acc / params.gauss_trials;
      const double bound = std::sqrt(2.0 * std::log(double(k)));
      CheckResult check;
      check.id = "gauss_max_bound_k" + std::to_string(k);
      check.observed = observed;
      check.threshold = bound;
      check.pass = observed <= bound;
      check.note = "Monte-Carlo E max of k standard Gaussians vs sqrt(2 log k)";
      report.checks.push_back(check);
    }
  }

  // Frequency of the initialization landing in the prime norm ball.
  {
    std::vector<double> inside(params.ball_seeds, 0.0);
    detail::parallel_over(params.ball_seeds, params.threads, [&](int s) {
      RealizedNetwork net = RealizedNetwork::realize(params.skeleton, params.ball_r, 1, params.d);
      net.init_beta_biased(params.beta, params.seed + 31 * (s + 1), true);
      inside[s] = net.in_ball(params.ball_radius, false) ? 1.0 : 0.0;
    });
    const double frac = detail::mean(inside);
    CheckResult check;
    check.id = "init_norm_ball";
    check.observed = frac;
    check.threshold = params.ball_min_frac;
    check.pass = frac >= params.ball_min_frac;
    std::ostringstream note;
    note << "fraction of seeds with ||W_0||'_2 <= " << params.ball_radius << " at r=" << params.ball_r;
    check.note = note.str();
    report.checks.push_back(check);
  }

  // Spectral norm of a Gaussian r x m matrix vs (1+alpha) sigma (sqrt r + sqrt m).
  {
    RngStream rng = RngStream(params.seed).derive(rng_role::kTask);
    const double sd = 1.0 / std::sqrt(double(params.matrix_rows));
    const double bound = (1.0 + params.matrix_alpha) * sd *
                         (std::sqrt(double(params.matrix_rows)) + std::sqrt(double(params.matrix_cols)));
    int within = 0;
    for (int trial = 0; trial < params.matrix_trials; ++trial) {
      Eigen::MatrixXd w(params.matrix_rows, params.matrix_cols);
      for (int i = 0; i < params.matrix_rows; ++i) {
        for (int j = 0; j < params.matrix_cols; ++j) w(i, j) = sd * rng.next_gaussian();
      }
      if (spectral_norm(w) <= bound) ++within;
    }
    const double frac = double(within) / params.matrix_trials;
    CheckResult check;
    check.id = "gaussian_matrix_spectral";
    check.observed = frac;
    check.threshold = params.matrix_min_frac;
    check.pass = frac >= params.matrix_min_frac;
    std::ostringstream note;
    note << "fraction of " << params.matrix_trials << " trials with ||W||_2 <= (1+"
         << params.matrix_alpha << ") sigma (sqrt r + sqrt m)";
    check.note = note.str();
    report.checks.push_back(check);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Main-theorem analogue: full SGD vs last-layer-only vs planted target vs
// projected kernel SGD, on the same planted task.
// ---------------------------------------------------------------------------

struct MainTheoremParams {
  TaskSpec task;
  int r = 2048;
  double beta = 0.0;
  double eta_prime = 0.1;
  int steps = 1200;
  int batch = 4;
  int seeds = 20;
  int eval_points = 8;
  int pool = 800;
  std::uint64_t seed = 1;
  int threads = 2;
  double tol_vs_baseline = 0.05;
  double tol_vs_planted = 0.15;
  bool run_kernel_sgd = true;
  double kernel_sgd_eps = 0.1;
};

struct MainTheoremSeedResult {
  double min_full = 0.0;
  double min_baseline = 0.0;
  double kernel_sgd = std::numeric_limits<double>::quiet_NaN();
};

inline ExperimentReport exp_main_theorem(const MainTheoremParams& params) {
  ExperimentReport report;
  report.name = "main-theorem";
  report.echo("r", params.r);
  report.echo("eta_prime", params.eta_prime);
  report.echo("steps", params.steps);
  report.echo("batch", params.batch);
  report.echo("seeds", params.seeds);
  report.echo("pool", params.pool);
  report.echo("target_norm", params.task.target_norm);
  report.columns = {"seed", "min_full", "min_baseline", "planted_loss", "kernel_sgd_loss"};

  const bool classification = params.task.kind == TaskKind::kKernelClassification;
  const LossSpec loss = classification ? LossSpec::logistic() : LossSpec::square();
  const SyntheticTask task = SyntheticTask::make(params.task, params.seed);
  const int k = classification ? params.task.k : 1;

  // Shared held-out pool for every loss estimate.
  Eigen::MatrixXd pool_x;
  std::vector<double> pool_y;
  {
    RngStream rng = RngStream(params.seed).derive(rng_role::kEvalData);
    task.sample_batch(params.pool, rng, pool_x, pool_y);
  }
  const double planted_loss = kernel_population_loss(task.planted(), loss, pool_x, pool_y);
  report.echo("planted_pool_loss", planted_loss);

  std::vector<MainTheoremSeedResult> results(params.seeds);
  detail::parallel_over(params.seeds, params.threads, [&](int s) {
    const std::uint64_t run_seed = params.seed + 7919 * (s + 1);
    SGDConfig config;
    config.eta_prime = params.eta_prime;
    config.steps = params.steps;
    config.batch = params.batch;
    config.beta = params.beta;
    config.zero_prediction_layer = true;
    config.seed = run_seed;
    config.loss = loss;
    config.diag_stride = 0;
    const int eval_stride = std::max(1, params.steps / params.eval_points);

    // Full SGD on all weights.
    {
      RealizedNetwork net = RealizedNetwork::realize(params.task.skeleton, params.r, k, params.task.d);
      TaskSource source(task, RngStream(run_seed).derive(rng_role::kTrainData));
      double best = std::numeric_limits<double>::infinity();
      int last_eval = -eval_stride;
      SGDDiagnostics diag;
      diag.on_snapshot = [&](int step, const RealizedNetwork& snapshot, double) {
        if (step - last_eval < eval_stride && step != params.steps) return;
        last_eval = step;
        best = std::min(best, population_loss(snapshot, loss, pool_x, pool_y));
      };
      sgd_run(net, config, source, diag);
      results[s].min_full = best;
    }

    // Last-layer-only baseline from the same initialization and data stream.
    {
      RealizedNetwork net = RealizedNetwork::realize(params.task.skeleton, params.r, k, params.task.d);
      net.init_beta_biased(params.beta, run_seed, true);
      TaskSource source(task, RngStream(run_seed).derive(rng_role::kTrainData));
      // With frozen internals the pool representation is fixed; cache it.
      Eigen::MatrixXd pool_rep(params.r, params.pool);
      for (Eigen::Index lo = 0; lo < pool_x.cols(); lo += 256) {
        const Eigen::Index width = std::min<Eigen::Index>(256, pool_x.cols() - lo);
        pool_rep.middleCols(lo, width) = net.representation_batch(pool_x.middleCols(lo, width), false);
      }
      SGDConfig base_config = config;
      base_config.init_weights = false;
      double best = std::numeric_limits<double>::infinity();
      int last_eval = -eval_stride;
      SGDDiagnostics diag;
      diag.on_snapshot = [&](int step, const RealizedNetwork& snapshot, double) {
        if (step - last_eval < eval_stride && step != params.steps) return;
        last_eval = step;
        const Eigen::MatrixXd pred = snapshot.prediction_matrix() * pool_rep;
        double acc = 0.0;
        for (Eigen::Index i = 0; i < pred.cols(); ++i) acc += loss_eval(loss, pred.col(i), pool_y[i]);
        best = std::min(best, acc / static_cast<double>(pred.cols()));
      };
      last_layer_sgd(net, base_config, source, diag);
      results[s].min_baseline = best;
    }

    // Projected kernel SGD on the same task (Lipschitz losses only).
    if (params.run_kernel_sgd && classification) {
      const double lipschitz = loss.lipschitz();
      const ProjectedSGDSchedule schedule =
          projected_sgd_schedule(params.task.target_norm, lipschitz, params.kernel_sgd_eps);
      RngStream rng = RngStream(run_seed).derive(rng_role::kTask);
      Eigen::MatrixXd stream_x;
      std::vector<double> stream_y;
      task.sample_batch(schedule.steps, rng, stream_x, stream_y);
      Eigen::MatrixXd all(pool_x.rows(), pool_x.cols() + stream_x.cols());
      all << stream_x, pool_x;
      CompositionalKernel kernel(params.task.skeleton, params.task.beta, params.task.d);
      GramCache gram = GramCache::for_pool(kernel, all);
      ProjectedKernelSGD sgd(loss, lipschitz, params.task.target_norm, schedule.eta, k);
      for (int t = 0; t < schedule.steps; ++t) sgd.step(t, stream_y[t], gram);
      double acc = 0.0;
      const int offset = static_cast<int>(stream_x.cols());
      for (int i = 0; i < params.pool; ++i) {
        acc += loss_eval(loss, sgd.evaluate_averaged(offset + i, gram), pool_y[i]);
      }
      results[s].kernel_sgd = acc / params.pool;
    }
  });

  std::vector<double> mins_full, mins_base, kernel_losses;
  for (int s = 0; s < params.seeds; ++s) {
    report.rows.push_back({double(s), results[s].min_full, results[s].min_baseline, planted_loss,
                           results[s].kernel_sgd});
    mins_full.push_back(results[s].min_full);
    mins_base.push_back(results[s].min_baseline);
    if (!std::isnan(results[s].kernel_sgd)) kernel_losses.push_back(results[s].kernel_sgd);
  }
  const double med_full = detail::median(mins_full);
  const double med_base = detail::median(mins_base);
  report.echo("median_min_full", med_full);
  report.echo("median_min_baseline", med_base);
  if (!kernel_losses.empty()) report.echo("median_kernel_sgd", detail::median(kernel_losses));

  {
    CheckResult check;
    check.id = "trained_vs_last_layer_baseline";
    check.observed = med_full;
    check.threshold = med_base + params.tol_vs_baseline;
    check.pass = med_full <= check.threshold;
    check.note = "median over seeds of min_t pool loss, trained net vs last-layer-only";
    report.checks.push_back(check);
  }
  {
    CheckResult check;
    check.id = "trained_vs_planted";
    check.observed = med_full;
    check.threshold = planted_loss + params.tol_vs_planted;
    check.pass = med_full <= check.threshold;
    check.note = "median over seeds of min_t pool loss vs planted-target loss";
    report.checks.push_back(check);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Drift: representation movement against t * eta' * alpha^2 inside the
// trust window, while the aggregate norm stays in W_2.
// ---------------------------------------------------------------------------

struct DriftParams {
  std::shared_ptr<const ComputationSkeleton> skeleton;
  double beta = 0.25;
  int d = 10;
  int r = 2048;
  int k = 2;
  double eta_prime = 1e-3;
  int batch = 4;
  int runs = 20;
  int max_steps = 150;
  int probes = 4;
  std::uint64_t seed = 1;
  int threads = 2;
};

inline ExperimentReport exp_drift(const DriftParams& params) {
  ExperimentReport report;
  report.name = "drift";
  report.echo("beta", params.beta);
  report.echo("r", params.r);
  report.echo("eta_prime", params.eta_prime);
  report.columns = {"run", "steps", "init_agg2", "max_drift", "max_bound_ratio", "violations",
                    "max_agg2", "max_grad_block"};

  const LossSpec loss = LossSpec::logistic();
  const double alpha = gd_change_alpha(*params.skeleton, loss.lipschitz());
  const double window = std::sqrt(double(params.r)) / (2.0 * params.eta_prime * alpha);
  const int steps = std::max(1, std::min(params.max_steps, static_cast<int>(window)));
  report.echo("alpha", alpha);
  report.echo("window_steps", window);
  report.echo("steps", steps);
  const int n = params.skeleton->input_count();

  // Labels independent of the inputs; the drift bound is distribution-free.
  struct NoiseSource : DataSource {
    int n, d, k;
    RngStream rng;
    NoiseSource(int n, int d, int k, RngStream rng) : n(n), d(d), k(k), rng(rng) {}
    void next_batch(int count, Eigen::MatrixXd& x, std::vector<double>& labels) override {
      x.resize(static_cast<Eigen::Index>(n) * d, count);
      labels.resize(count);
      for (int i = 0; i < count; ++i) {
        x.col(i) = sample_block_sphere(n, d, rng);
        labels[i] = static_cast<double>(rng.next_u64() % k);
      }
    }
  };

  struct RunOutcome {
    double init_agg2 = 0.0, max_drift = 0.0, max_ratio = 0.0, max_agg2 = 0.0, max_grad_block = 0.0;
    int violations = 0;
    bool init_in_ball = false;
    bool norms_in_w2 = true;
    bool grad_bound_ok = true;
  };
  std::vector<RunOutcome> outcomes(params.runs);

  detail::parallel_over(params.runs, params.threads, [&](int run) {
    const std::uint64_t run_seed = params.seed + 104729 * (run + 1);
    RealizedNetwork net = RealizedNetwork::realize(params.skeleton, params.r, params.k, params.d);

    SGDConfig config;
    config.eta_prime = params.eta_prime;
    config.steps = steps;
    config.batch = params.batch;
    config.beta = params.beta;
    config.zero_prediction_layer = true;
    config.seed = run_seed;
    config.loss = loss;
    config.diag_stride = 1;

    RngStream probe_rng = RngStream(run_seed).derive(rng_role::kProbeData);
    SGDDiagnostics diag;
    diag.probes.resize(static_cast<Eigen::Index>(n) * params.d, params.probes);
    for (int i = 0; i < params.probes; ++i) {
      diag.probes.col(i) = sample_block_sphere(n, params.d, probe_rng);
    }

    NoiseSource source(n, params.d, params.k, RngStream(run_seed).derive(rng_role::kTrainData));
    // Initialize first so the starting ball membership can be recorded.
    net.init_beta_biased(config.beta, config.seed, config.zero_prediction_layer);
    RunOutcome& out = outcomes[run];
    out.init_agg2 = net.weight_norms().agg2;
    out.init_in_ball = out.init_agg2 <= 1.5;
    SGDConfig run_config = config;
    run_config.init_weights = false;
    const TrainTrace trace = sgd_run(net, run_config, source, diag);

    const DriftReport drift = drift_report(trace, alpha, params.eta_prime, params.r);
    out.violations = drift.violations;
    const double grad_cap = alpha * std::sqrt(double(params.r));
    for (const DriftCheck& check : drift.checks) {
      out.max_drift = std::max(out.max_drift, check.observed);
      if (check.in_window && check.bound > 0.0) {
        out.max_ratio = std::max(out.max_ratio, check.observed / check.bound);
      }
    }
    for (const StepRecord& rec : trace.steps) {
      if (rec.step <= drift.window_steps) {
        out.max_agg2 = std::max(out.max_agg2, rec.agg2);
        if (rec.agg2 > 2.0) out.norms_in_w2 = false;
        out.max_grad_block = std::max(out.max_grad_block, rec.grad_frob);
        if (rec.grad_frob > grad_cap) out.grad_bound_ok = false;
      }
    }
  });

  int total_violations = 0;
  bool all_init = true, all_w2 = true, all_grad = true;
  for (int run = 0; run < params.runs; ++run) {
    const RunOutcome& out = outcomes[run];
    report.rows.push_back({double(run), double(steps), out.init_agg2, out.max_drift, out.max_ratio,
                           double(out.violations), out.max_agg2, out.max_grad_block});
    total_violations += out.violations;
    all_init &= out.init_in_ball;
    all_w2 &= out.norms_in_w2;
    all_grad &= out.grad_bound_ok;
  }

  CheckResult init_check{"init_in_w15", all_init, all_init ? 1.0 : 0.0, 1.0,
                         "every run starts inside W_1.5"};
  report.checks.push_back(init_check);
  CheckResult drift_check;
  drift_check.id = "drift_bound";
  drift_check.observed = total_violations;
  drift_check.threshold = 0.0;
  drift_check.pass = total_violations == 0;
  drift_check.note = "violations of ||R_x(W_t) - R_x(W_0)|| <= t eta' alpha^2 inside the window";
  report.checks.push_back(drift_check);
  CheckResult w2_check{"iterates_in_w2", all_w2, all_w2 ? 1.0 : 0.0, 1.0,
                       "aggregate norm stays <= 2 inside the window"};
  report.checks.push_back(w2_check);
  CheckResult grad_check{"gradient_frobenius_bound", all_grad, all_grad ? 1.0 : 0.0, 1.0,
                         "gradient Frobenius norm <= alpha sqrt(r) at every recorded step"};
  report.checks.push_back(grad_check);
  return report;
}

// ---------------------------------------------------------------------------
// Margin perceptron mistake bound on planted separable streams.
// ---------------------------------------------------------------------------

struct PerceptronConfig {
  bool linear = true;                                   // linear kernel in R^dim
  int dim = 5;                                          // linear case
  std::shared_ptr<const ComputationSkeleton> skeleton;  // compositional case
  double beta = 0.0;
  int d = 2;
  int k = 2;
  double m_norm = 4.0;
  double margin_a = 1.0;
  int pool = 200;
  int presentations = 100000;
};

struct PerceptronBoundParams {
  std::vector<PerceptronConfig> configs;
  int seeds = 10;
  std::uint64_t seed = 1;
  int threads = 2;
};

inline ExperimentReport exp_perceptron_bound(const PerceptronBoundParams& params) {
  ExperimentReport report;
  report.name = "perceptron-bound";
  report.echo("configs", double(params.configs.size()));
  report.echo("seeds", params.seeds);
  report.columns = {"config", "seed", "mistakes", "mistake_bound", "frob", "frob_bound",
                    "bookkeeping_err"};

  struct Outcome {
    double mistakes = 0, bound = 0, frob = 0, frob_bound = 0, book_err = 0;
    bool pass = true;
  };
  const int jobs = static_cast<int>(params.configs.size()) * params.seeds;
  std::vector<Outcome> outcomes(jobs);

  detail::parallel_over(jobs, params.threads, [&](int job) {
    const int ci = job / params.seeds;
    const int s = job % params.seeds;
    const PerceptronConfig& cfg = params.configs[ci];
    RngStream rng = RngStream(params.seed + 7 * (ci + 1)).derive(rng_role::kTask).derive(s);

    Eigen::MatrixXd pool;
    std::vector<int> labels(cfg.pool);
    std::unique_ptr<GramCache> gram;
    std::unique_ptr<CompositionalKernel> kernel;

    if (cfg.linear) {
      // Plant a separator of Frobenius norm exactly M, then rejection-sample
      // unit vectors it classifies with margin 1.
      Eigen::MatrixXd w_star(cfg.k, cfg.dim);
      for (int i = 0; i < cfg.k; ++i) {
        for (int j = 0; j < cfg.dim; ++j) w_star(i, j) = rng.next_gaussian();
      }
      w_star *= cfg.m_norm / w_star.norm();
      pool.resize(cfg.dim, cfg.pool);
      for (int i = 0; i < cfg.pool; ++i) {
        for (int attempt = 0;; ++attempt) {
          if (attempt > SyntheticTask::kRejectionBudget) {
            throw Error("perceptron: margin rejection exhausted");
          }
          const Eigen::VectorXd x = sample_block_sphere(1, cfg.dim, rng);
          const Eigen::VectorXd scores = w_star * x;
          int best;
          scores.maxCoeff(&best);
          double second = -std::numeric_limits<double>::infinity();
          for (int j = 0; j < cfg.k; ++j) {
            if (j != best) second = std::max(second, scores(j));
          }
          if (scores(best) >= 1.0 + second) {
            pool.col(i) = x;
            labels[i] = best;
            break;
          }
        }
      }
      gram = std::make_unique<GramCache>(
          [&pool](int i, int j) { return pool.col(i).dot(pool.col(j)); });
    } else {
      TaskSpec task_spec;
      task_spec.kind = TaskKind::kKernelClassification;
      task_spec.skeleton = cfg.skeleton;
      task_spec.beta = cfg.beta;
      task_spec.d = cfg.d;
      task_spec.k = cfg.k;
      task_spec.target_norm = cfg.m_norm;
      const SyntheticTask task = SyntheticTask::make(task_spec, rng.next_u64());
      pool.resize(task.input_dim(), cfg.pool);
      RngStream sample_rng = rng.derive(3);
      for (int i = 0; i < cfg.pool; ++i) {
        const SyntheticTask::Example ex = task.sample(sample_rng);
        pool.col(i) = ex.x;
        labels[i] = static_cast<int>(ex.label);
      }
      kernel = std::make_unique<CompositionalKernel>(cfg.skeleton, cfg.beta, cfg.d);
      gram = std::make_unique<GramCache>(
          [&pool, k = kernel.get()](int i, int j) { return k->unchecked(pool.col(i), pool.col(j)); });
    }

    MarginPerceptron perceptron(cfg.k, cfg.margin_a);
    RngStream present_rng = rng.derive(11);
    for (int t = 0; t < cfg.presentations; ++t) {
      const int id = static_cast<int>(present_rng.next_u64() % cfg.pool);
      perceptron.step(id, labels[id], *gram);
    }
    Outcome& out = outcomes[job];
    out.mistakes = perceptron.mistakes();
    out.bound = (2.0 + 2.0 * cfg.margin_a) * cfg.m_norm * cfg.m_norm;
    out.frob = perceptron.frob_norm();
    out.frob_bound = (2.0 + 2.0 * cfg.margin_a) * cfg.m_norm;
    out.book_err = std::abs(perceptron.frob_norm() - perceptron.frob_norm_direct(*gram));
    out.pass = out.mistakes <= out.bound && out.frob <= out.frob_bound && out.book_err <= 1e-8;
  });

  bool all_mistakes = true, all_frob = true;
  double max_book = 0.0;
  for (int job = 0; job < jobs; ++job) {
    const Outcome& out = outcomes[job];
    report.rows.push_back({double(job / params.seeds), double(job % params.seeds), out.mistakes,
                           out.bound, out.frob, out.frob_bound, out.book_err});
    all_mistakes &= out.mistakes <= out.bound;
    all_frob &= out.frob <= out.frob_bound;
    max_book = std::max(max_book, out.book_err);
  }
  CheckResult mistake_check{"perceptron_mistake_bound", all_mistakes, all_mistakes ? 1.0 : 0.0, 1.0,
                            "mistakes <= (2+2a) M^2 on every planted separable stream"};
  report.checks.push_back(mistake_check);
  CheckResult frob_check{"perceptron_norm_bound", all_frob, all_frob ? 1.0 : 0.0, 1.0,
                         "final operator norm <= (2+2a) M"};
  report.checks.push_back(frob_check);
  CheckResult book_check;
  book_check.id = "perceptron_norm_bookkeeping";
  book_check.observed = max_book;
  book_check.threshold = 1e-8;
  book_check.pass = max_book <= 1e-8;
  book_check.note = "incremental ||W||_F vs direct Gram quadratic form";
  report.checks.push_back(book_check);
  return report;
}

// ---------------------------------------------------------------------------
// Gradient check: back-propagation against central finite differences.
// ---------------------------------------------------------------------------

struct GradCheckParams {
  std::shared_ptr<const ComputationSkeleton> skeleton;  // smooth activations
  int r = 6;
  int k = 3;
  int d = 3;
  int batch = 5;
  double beta = 0.25;
  int coords = 1000;
  double fd_step = 1e-5;
  double tol = 1e-5;
  LossSpec loss = LossSpec::logistic();
  std::uint64_t seed = 1;
};

inline ExperimentReport exp_grad_check(const GradCheckParams& params) {
  ExperimentReport report;
  report.name = "grad-check";
  report.echo("r", params.r);
  report.echo("coords", params.coords);
  report.echo("fd_step", params.fd_step);
  report.columns = {"coord", "analytic", "numeric", "rel_err"};

  RealizedNetwork net = RealizedNetwork::realize(params.skeleton, params.r, params.k, params.d);
  net.init_beta_biased(params.beta, params.seed, false);
  const int n = params.skeleton->input_count();
  RngStream rng = RngStream(params.seed).derive(rng_role::kEvalData);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n) * params.d, params.batch);
  std::vector<double> labels(params.batch);
  for (int i = 0; i < params.batch; ++i) {
    x.col(i) = sample_block_sphere(n, params.d, rng);
    labels[i] = static_cast<double>(rng.next_u64() % params.k);
  }
  const GradientBundle grads = backprop(net, x, labels, params.loss);

  // Flat coordinate space: every node matrix, bias, then the prediction layer.
  struct Slot {
    double* weight;
    const double* grad;
  };
  std::vector<Slot> slots;
  auto add = [&slots](Eigen::MatrixXd& w, const Eigen::MatrixXd& g) {
    for (Eigen::Index i = 0; i < w.size(); ++i) slots.push_back({w.data() + i, g.data() + i});
  };
  for (std::size_t i = 0; i < net.node_weights().size(); ++i) {
    add(net.node_weights()[i].w_int, grads.node[i].w_int);
    add(net.node_weights()[i].w_inp, grads.node[i].w_inp);
    for (Eigen::Index j = 0; j < net.node_weights()[i].bias.size(); ++j) {
      slots.push_back({net.node_weights()[i].bias.data() + j, grads.node[i].bias.data() + j});
    }
  }
  add(net.prediction_matrix(), grads.w_pred);

  RngStream pick = RngStream(params.seed).derive(rng_role::kProbeData);
  double max_rel = 0.0;
  for (int c = 0; c < params.coords; ++c) {
    const Slot slot = slots[pick.next_u64() % slots.size()];
    const double saved = *slot.weight;
    *slot.weight = saved + params.fd_step;
    const double up = batch_loss(params.loss, net.predict_batch(x, false), labels);
    *slot.weight = saved - params.fd_step;
    const double down = batch_loss(params.loss, net.predict_batch(x, false), labels);
    *slot.weight = saved;
    const double numeric = (up - down) / (2.0 * params.fd_step);
    const double analytic = *slot.grad;
    const double rel = std::abs(analytic - numeric) /
                       std::max({1.0, std::abs(analytic), std::abs(numeric)});
    max_rel = std::max(max_rel, rel);
    if (c < 64) report.rows.push_back({double(c), analytic, numeric, rel});
  }
  CheckResult check;
  check.id = "gradient_exactness";
  check.observed = max_rel;
  check.threshold = params.tol;
  check.pass = max_rel <= params.tol;
  check.note = "max relative error of backprop vs central differences";
  report.checks.push_back(check);
  return report;
}

}  // namespace skelnet
