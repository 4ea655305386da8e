#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "metastep/extra_trees.hpp"
#include "metastep/meta_mdp.hpp"
#include "metastep/parallel.hpp"

namespace metastep {

/// Evenly spaced grid of `count` points spanning [lo, hi], endpoints exact.
inline Vector make_action_grid(double lo, double hi, int count = 101) {
  if (count < 1) throw InputError("make_action_grid: count must be >= 1");
  if (count == 1) return {lo};
  if (!(hi > lo)) throw InputError("make_action_grid: need hi > lo for more than one point");
  Vector g(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) g[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (count - 1);
  g.back() = hi;
  return g;
}

/// Two independently seeded Q approximators combined by
///   lambda * min(q1, q2) + (1 - lambda) * max(q1, q2).
/// With `single_q` only q1 is consulted.
struct QPair {
  Forest q1;
  Forest q2;
  double lambda = 0.75;
  Vector action_grid;
  int iteration = 0;
  bool single_q = false;

  void validate() const {
    if (!(lambda > 0.5 && lambda <= 1.0)) throw InputError("QPair: lambda must lie in (0.5, 1]");
    if (action_grid.empty()) throw InputError("QPair: empty action grid");
    for (std::size_t i = 1; i < action_grid.size(); ++i)
      if (!(action_grid[i] > action_grid[i - 1])) throw InputError("QPair: action grid must be strictly increasing");
  }

  std::size_t state_dim() const { return q1.feature_dim - 1; }

  void write(std::ostream& os) const {
    const auto old = os.precision(17);
    os << "metastep-qpair v1\n" << lambda << ' ' << iteration << ' ' << (single_q ? 1 : 0) << '\n';
    os << action_grid.size();
    for (double h : action_grid) os << ' ' << h;
    os << '\n';
    os.precision(old);
    q1.write(os);
    q2.write(os);
  }

  static QPair read(std::istream& is) {
    std::string magic, version;
    is >> magic >> version;
    if (magic != "metastep-qpair" || version != "v1") throw InputError("QPair::read: unrecognised header");
    QPair q;
    int single = 0;
    std::size_t n = 0;
    is >> q.lambda >> q.iteration >> single >> n;
    q.single_q = single != 0;
    q.action_grid.resize(n);
    for (double& h : q.action_grid) is >> h;
    if (!is) throw InputError("QPair::read: truncated header");
    q.q1 = Forest::read(is);
    q.q2 = Forest::read(is);
    return q;
  }
};

namespace detail {

inline double combine(double a, double b, double lambda) {
  return lambda * std::min(a, b) + (1.0 - lambda) * std::max(a, b);
}

}  // namespace detail

/// Clipped value at input (x, h); `buffer` must hold x followed by one slot.
inline double clipped_value_in(const QPair& q, std::span<double> buffer, double h) {
  buffer.back() = h;
  const double a = q.q1.predict_unchecked(buffer);
  if (q.single_q) return a;
  return detail::combine(a, q.q2.predict_unchecked(buffer), q.lambda);
}

inline double clipped_value(const QPair& q, std::span<const double> x, double h) {
  if (x.size() + 1 != q.q1.feature_dim)
    throw InputError("clipped_value: state has " + std::to_string(x.size()) + " features, Q expects " +
                     std::to_string(q.q1.feature_dim - 1));
  Vector buf(x.begin(), x.end());
  buf.push_back(h);
  return clipped_value_in(q, buf, h);
}

struct GreedyChoice {
  double h = 0.0;
  double value = 0.0;
};

/// argmax over the grid of the clipped value; ties go to the smaller h.
inline GreedyChoice greedy_choice(const QPair& q, std::span<const double> x) {
  if (x.size() + 1 != q.q1.feature_dim) throw InputError("greedy_action: state dimension does not match Q");
  Vector buf(x.begin(), x.end());
  buf.push_back(0.0);
  GreedyChoice best{q.action_grid.front(), -std::numeric_limits<double>::infinity()};
  for (double h : q.action_grid) {
    const double v = clipped_value_in(q, buf, h);
    if (v > best.value) best = {h, v};
  }
  return best;
}

inline double greedy_action(const QPair& q, std::span<const double> x) { return greedy_choice(q, x).h; }

/// One FQI sample: state features, action, reward, next state features.
struct FqiSample {
  Vector x;
  double h = 0.0;
  double l = 0.0;
  Vector x_next;
};

inline std::vector<FqiSample> fqi_samples(const std::vector<MetaTransition>& rows, bool include_context = true) {
  std::vector<FqiSample> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back({r.x.features(include_context), r.h, r.l, r.x_next.features(include_context)});
  return out;
}

/// o = l + gamma_meta * max_h clipped(Q_prev)(x', h); o = l with no previous Q.
inline Vector bellman_targets(std::span<const FqiSample> data, const QPair* previous, double gamma_meta,
                              int jobs = 1) {
  if (data.empty()) throw InputError("bellman_targets: empty dataset");
  Vector targets(data.size());
  if (previous == nullptr || gamma_meta == 0.0) {
    for (std::size_t i = 0; i < data.size(); ++i) targets[i] = data[i].l;
    return targets;
  }
  parallel_for(data.size(), jobs, [&](std::size_t i) {
    targets[i] = data[i].l + gamma_meta * greedy_choice(*previous, data[i].x_next).value;
  });
  return targets;
}

struct FqiOptions {
  int iterations = 5;
  double gamma_meta = 1.0;
  double lambda = 0.75;
  TreeParams trees;
  Vector action_grid;
  std::uint64_t seed = 0;
  bool single_q = false;
  int jobs = 1;
};

struct IterationLog {
  int iteration = 0;
  double target_mean = 0.0;
  double target_min = 0.0;
  double target_max = 0.0;
  double train_mse = 0.0;
};

struct FqiRun {
  std::vector<QPair> models;  // models[i].iteration == i + 1
  double gamma_meta = 1.0;
  std::vector<IterationLog> log;
  std::string aborted;  // non-empty when a later iteration failed; earlier models kept
};

inline Matrix fqi_inputs(std::span<const FqiSample> data) {
  Matrix X(data.size(), data.front().x.size() + 1);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].x.size() + 1 != X.cols) throw InputError("fqi_train: inconsistent state feature length");
    auto row = X.row(i);
    std::copy(data[i].x.begin(), data[i].x.end(), row.begin());
    row.back() = data[i].h;
  }
  return X;
}

inline FqiRun fqi_train(std::span<const FqiSample> data, const FqiOptions& opt) {
  if (opt.iterations < 1) throw InputError("fqi_train: iterations must be >= 1");
  if (data.empty()) throw InputError("fqi_train: empty dataset");
  const Matrix X = fqi_inputs(data);
  FqiRun run;
  run.gamma_meta = opt.gamma_meta;
  const RngStream root(opt.seed, 0);
  for (int it = 1; it <= opt.iterations; ++it) {
    const Vector targets = bellman_targets(data, run.models.empty() ? nullptr : &run.models.back(), opt.gamma_meta,
                                           opt.jobs);
    QPair q;
    q.lambda = opt.lambda;
    q.action_grid = opt.action_grid;
    q.iteration = it;
    q.single_q = opt.single_q;
    q.validate();
    TreeParams p1 = opt.trees, p2 = opt.trees;
    p1.seed = root.derive(Purpose::Forest, static_cast<std::uint64_t>(it)).derive(Purpose::Pair, 1).next_u64();
    p2.seed = root.derive(Purpose::Forest, static_cast<std::uint64_t>(it)).derive(Purpose::Pair, 2).next_u64();
    try {
      q.q1 = fit_forest(X, targets, p1, opt.jobs);
      q.q2 = opt.single_q ? q.q1 : fit_forest(X, targets, p2, opt.jobs);
    } catch (const std::exception& e) {
      run.aborted = "iteration " + std::to_string(it) + ": " + e.what();
      break;
    }

    IterationLog entry{it, 0.0, *std::min_element(targets.begin(), targets.end()),
                       *std::max_element(targets.begin(), targets.end()), 0.0};
    const Vector fitted = q.q1.predict_batch(X);
    for (std::size_t i = 0; i < targets.size(); ++i) {
      entry.target_mean += targets[i];
      entry.train_mse += (fitted[i] - targets[i]) * (fitted[i] - targets[i]);
    }
    entry.target_mean /= static_cast<double>(targets.size());
    entry.train_mse /= static_cast<double>(targets.size());
    run.log.push_back(entry);
    run.models.push_back(std::move(q));
  }
  return run;
}

// ---------------------------------------------------------------------------
// Model selection and evaluation

/// Greedy step-size policy on each task for `steps` meta-steps.
inline CurveSummary evaluate_policy(const QPair& q, const MetaMdpConfig& cfg, const std::vector<LearningTask>& tasks,
                                    int steps, bool include_context = true, int jobs = 1) {
  std::vector<LearningCurve> curves(tasks.size());
  parallel_for(tasks.size(), jobs, [&](std::size_t i) {
    curves[i] = run_learning(cfg, tasks[i], steps, nga_controller([&](int, const MetaState& x, const BatchEstimate&) {
                               return greedy_action(q, x.features(include_context));
                             }));
  });
  return summarize_curves(std::move(curves));
}

struct Selection {
  int best_iteration = 1;
  Vector final_means;  // per iteration
  Vector final_std_errors;
};

/// Evaluates every iteration on the same validation tasks and keeps the one
/// with the highest mean final return (ties to the earlier iteration).
inline Selection select_model(const FqiRun& run, const MetaMdpConfig& cfg,
                              const std::vector<LearningTask>& validation, int steps, bool include_context = true,
                              int jobs = 1) {
  if (validation.empty()) throw InputError("select_model: need at least one validation task");
  if (run.models.empty()) throw InputError("select_model: run has no models");
  Selection sel;
  double best = -std::numeric_limits<double>::infinity();
  for (const QPair& q : run.models) {
    const CurveSummary s = evaluate_policy(q, cfg, validation, steps, include_context, jobs);
    sel.final_means.push_back(s.mean_return.back());
    sel.final_std_errors.push_back(s.std_error.back());
    if (s.mean_return.back() > best) {
      best = s.mean_return.back();
      sel.best_iteration = q.iteration;
    }
  }
  return sel;
}

}  // namespace metastep
