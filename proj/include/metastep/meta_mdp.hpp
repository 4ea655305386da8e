#pragma once

#include <cmath>
#include <cstdint>
#include <iostream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "metastep/core.hpp"
#include "metastep/environments.hpp"
#include "metastep/parallel.hpp"
#include "metastep/policy_gradient.hpp"

namespace metastep {

/// The meta-action space: closed interval of admissible step sizes.
struct StepInterval {
  double lo = 0.0;
  double hi = 1.0;

  bool contains(double h) const { return h >= lo && h <= hi; }
  void validate() const {
    if (!(lo >= 0.0 && hi >= lo)) throw InputError("StepInterval: need 0 <= lo <= hi");
  }
};

inline StepInterval default_step_interval(Family f) {
  switch (f) {
    case Family::Nav2D: return {0.0, 8.0};
    case Family::Minigolf: return {0.0, 1.0};
    case Family::CartPole: return {0.0, 10.0};
    case Family::SwingUp: return {0.0, 0.5};
  }
  throw InputError("default_step_interval: unknown family");
}

/// Draw theta_0 from the family's initial distribution rho. Gaussian
/// parameters are (mean, variance).
inline PolicyParams initial_policy(Family family, double sigma, RngStream& rng) {
  const FamilyTraits t = family_traits(family);
  PolicyParams p(t.state_dim, t.action_dim, sigma);
  switch (family) {
    case Family::Nav2D:
    case Family::SwingUp:
      for (double& v : p.theta) v = rng.normal(0.0, std::sqrt(0.1));
      break;
    case Family::CartPole:
      for (double& v : p.theta) v = rng.normal(0.0, std::sqrt(0.01));
      break;
    case Family::Minigolf:
      // theta = [bias, weight]; weight ~ U(-1, 2), bias ~ U(-2, 3.5)
      p.theta[1] = rng.uniform(-1.0, 2.0);
      p.theta[0] = rng.uniform(-2.0, 3.5);
      break;
  }
  return p;
}

/// Everything needed to simulate one learning step in a task family.
struct MetaMdpConfig {
  Family family = Family::Nav2D;
  ContextBox contexts;
  StepInterval steps;
  int horizon = 1;
  double gamma = 1.0;
  double sigma = 1.0;
  int batch_size = 1;
  NaturalGradientOptions natural;
  std::optional<Vector> fixed_context;

  static MetaMdpConfig defaults(Family f) {
    const FamilyTraits t = family_traits(f);
    MetaMdpConfig c;
    c.family = f;
    c.contexts = t.contexts;
    c.steps = default_step_interval(f);
    c.horizon = t.horizon;
    c.gamma = t.gamma;
    c.sigma = t.sigma;
    c.batch_size = 50;
    return c;
  }

  EnvInstance make_env(const Vector& context) const { return EnvInstance(family, context, horizon); }

  Vector draw_context(RngStream& rng) const {
    Vector c = sample_context(contexts, rng);
    return fixed_context ? *fixed_context : c;
  }
};

/// Return and natural-gradient estimates from one batch of trajectories.
struct BatchEstimate {
  double mean_return = 0.0;
  double std_error = 0.0;
  int failures = 0;
  NaturalGradient gradient;
};

template <Environment Env>
BatchEstimate estimate_batch(const Env& env, const PolicyParams& params, const MetaMdpConfig& cfg,
                             const RngStream& rng) {
  ReturnEstimate ret = estimate_return(env, params, cfg.batch_size, cfg.gamma, rng);
  BatchEstimate out;
  out.mean_return = ret.mean;
  out.std_error = ret.std_error;
  for (const auto& tr : ret.trajectories) out.failures += tr.failed ? 1 : 0;
  out.gradient = natural_gradient(ret.trajectories, params, cfg.gamma, cfg.natural);
  return out;
}

struct MetaState {
  Vector theta;
  Vector nat_grad;
  Vector context;

  /// <theta, g, omega>, or <theta, g> when the context is ablated.
  Vector features(bool include_context = true) const {
    Vector f;
    f.reserve(theta.size() + nat_grad.size() + context.size());
    f.insert(f.end(), theta.begin(), theta.end());
    f.insert(f.end(), nat_grad.begin(), nat_grad.end());
    if (include_context) f.insert(f.end(), context.begin(), context.end());
    return f;
  }
};

struct MetaTransition {
  MetaState x;
  double h = 0.0;
  double l = 0.0;
  MetaState x_next;
  std::int64_t episode_id = 0;
  std::int64_t step_id = 0;
  double j_before = 0.0;
  double j_after = 0.0;
};

inline double meta_reward(double j_before, double j_after) { return j_after - j_before; }

namespace detail {

/// One meta-episode of `steps` uniformly random step sizes, starting from a
/// fresh (omega, theta_0). Trajectory-mode episodes chain; generative tuples
/// are one-step episodes.
inline std::vector<MetaTransition> meta_episode(const MetaMdpConfig& cfg, int steps, std::int64_t episode_id,
                                                const RngStream& episode) {
  RngStream ctx_rng = episode.derive(Purpose::Context);
  RngStream theta_rng = episode.derive(Purpose::InitialPolicy);
  RngStream h_rng = episode.derive(Purpose::StepSize);
  const Vector context = cfg.draw_context(ctx_rng);
  const EnvInstance env = cfg.make_env(context);
  PolicyParams params = initial_policy(cfg.family, cfg.sigma, theta_rng);

  std::vector<MetaTransition> rows;
  rows.reserve(static_cast<std::size_t>(steps));
  BatchEstimate est = estimate_batch(env, params, cfg, episode.derive(Purpose::Rollout, 0));
  for (int t = 0; t < steps; ++t) {
    MetaTransition row;
    row.episode_id = episode_id;
    row.step_id = t;
    row.x = MetaState{params.theta, est.gradient.natural.vector, context};
    row.h = h_rng.uniform(cfg.steps.lo, cfg.steps.hi);
    params = nga_update(params, row.h, est.gradient.natural.vector).params;
    BatchEstimate next = estimate_batch(env, params, cfg, episode.derive(Purpose::Rollout, static_cast<std::uint64_t>(t) + 1));
    row.x_next = MetaState{params.theta, next.gradient.natural.vector, context};
    row.j_before = est.mean_return;
    row.j_after = next.mean_return;
    row.l = meta_reward(row.j_before, row.j_after);
    rows.push_back(std::move(row));
    est = std::move(next);
  }
  return rows;
}

inline std::vector<MetaTransition> run_episodes(const MetaMdpConfig& cfg, int episodes, int steps,
                                                const RngStream& master, int jobs) {
  std::vector<std::vector<MetaTransition>> per_episode(static_cast<std::size_t>(episodes));
  parallel_for(per_episode.size(), jobs, [&](std::size_t k) {
    try {
      per_episode[k] = meta_episode(cfg, steps, static_cast<std::int64_t>(k), master.derive(Purpose::Episode, k));
    } catch (const std::exception& e) {
      std::cerr << "metastep: meta-episode " << k << " aborted (" << e.what() << "); rows omitted\n";
      per_episode[k].clear();
    }
  });
  std::vector<MetaTransition> rows;
  for (auto& ep : per_episode)
    for (auto& r : ep) rows.push_back(std::move(r));
  return rows;
}

}  // namespace detail

/// K meta-episodes of T chained learning steps each (K*T rows).
inline std::vector<MetaTransition> generate_dataset_trajectory(const MetaMdpConfig& cfg, int episodes, int steps,
                                                               const RngStream& master, int jobs = 1) {
  if (episodes < 1 || steps < 1 || cfg.batch_size < 1)
    throw InputError("generate_dataset_trajectory: K, T and n must be >= 1");
  return detail::run_episodes(cfg, episodes, steps, master, jobs);
}

/// K independent one-step tuples with freshly drawn (omega, theta_0, h).
inline std::vector<MetaTransition> generate_dataset_generative(const MetaMdpConfig& cfg, int samples,
                                                               const RngStream& master, int jobs = 1) {
  if (samples < 1 || cfg.batch_size < 1) throw InputError("generate_dataset_generative: K and n must be >= 1");
  return detail::run_episodes(cfg, samples, 1, master, jobs);
}

// ---------------------------------------------------------------------------
// Dataset CSV

inline void write_dataset_csv(std::ostream& os, const std::vector<MetaTransition>& rows,
                              const std::string& comment = {}) {
  if (!comment.empty()) os << "# " << comment << '\n';
  const std::size_t dt = rows.empty() ? 0 : rows.front().x.theta.size();
  const std::size_t dc = rows.empty() ? 0 : rows.front().x.context.size();
  auto state_cols = [&](const std::string& prefix) {
    for (std::size_t i = 0; i < dt; ++i) os << ',' << prefix << "theta_" << i;
    for (std::size_t i = 0; i < dt; ++i) os << ',' << prefix << "grad_" << i;
    for (std::size_t i = 0; i < dc; ++i) os << ',' << prefix << "omega_" << i;
  };
  os << "episode_id,step_id";
  state_cols("");
  os << ",h,l";
  state_cols("next_");
  os << ",j_before,j_after\n";

  std::ostringstream line;
  line.precision(17);
  auto put_state = [&](const MetaState& s) {
    for (double v : s.theta) line << ',' << v;
    for (double v : s.nat_grad) line << ',' << v;
    for (double v : s.context) line << ',' << v;
  };
  for (const MetaTransition& r : rows) {
    line.str({});
    line << r.episode_id << ',' << r.step_id;
    put_state(r.x);
    line << ',' << r.h << ',' << r.l;
    put_state(r.x_next);
    line << ',' << r.j_before << ',' << r.j_after << '\n';
    os << line.str();
  }
}

inline std::vector<MetaTransition> read_dataset_csv(std::istream& is) {
  std::string line;
  std::vector<std::string> header;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
    break;
  }
  if (header.empty()) throw InputError("read_dataset_csv: missing header");
  std::size_t dt = 0, dc = 0;
  for (const auto& h : header) {
    if (h.rfind("theta_", 0) == 0) ++dt;
    if (h.rfind("omega_", 0) == 0) ++dc;
  }
  const std::size_t expected = 2 + 2 * (2 * dt + dc) + 2 + 2;
  if (header.size() != expected) throw InputError("read_dataset_csv: unexpected column layout");

  std::vector<MetaTransition> rows;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> v;
    v.reserve(expected);
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    if (v.size() != expected) throw InputError("read_dataset_csv: row has " + std::to_string(v.size()) + " fields");
    std::size_t k = 0;
    auto take = [&](std::size_t n) {
      Vector out(v.begin() + static_cast<std::ptrdiff_t>(k), v.begin() + static_cast<std::ptrdiff_t>(k + n));
      k += n;
      return out;
    };
    MetaTransition r;
    r.episode_id = static_cast<std::int64_t>(v[k++]);
    r.step_id = static_cast<std::int64_t>(v[k++]);
    r.x.theta = take(dt);
    r.x.nat_grad = take(dt);
    r.x.context = take(dc);
    r.h = v[k++];
    r.l = v[k++];
    r.x_next.theta = take(dt);
    r.x_next.nat_grad = take(dt);
    r.x_next.context = take(dc);
    r.j_before = v[k++];
    r.j_after = v[k++];
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Learning runs: the inner loop shared by FQI evaluation and baselines.

/// A test or validation task: context, initial policy and the stream that
/// drives every rollout batch of the run. Methods evaluated on the same task
/// see identical rollout noise.
struct LearningTask {
  Vector context;
  PolicyParams theta0;
  RngStream stream{0, 0};
};

inline std::vector<LearningTask> sample_tasks(const MetaMdpConfig& cfg, int count, const RngStream& stream) {
  std::vector<LearningTask> tasks;
  tasks.reserve(static_cast<std::size_t>(std::max(count, 0)));
  for (int i = 0; i < count; ++i) {
    const RngStream s = stream.derive(Purpose::Episode, static_cast<std::uint64_t>(i));
    RngStream ctx = s.derive(Purpose::Context);
    RngStream th = s.derive(Purpose::InitialPolicy);
    LearningTask task{cfg.draw_context(ctx), initial_policy(cfg.family, cfg.sigma, th), s.derive(Purpose::Rollout)};
    tasks.push_back(std::move(task));
  }
  return tasks;
}

struct StepDecision {
  PolicyParams next;
  double h = 0.0;
};

/// Per-task learning curve: T+1 returns (before any update, then after each)
/// and the T step sizes chosen.
struct LearningCurve {
  Vector returns;
  Vector std_errors;
  Vector step_sizes;
  std::vector<int> failures;
};

/// Controller: (t, meta-state, batch estimate, current params) -> StepDecision.
template <class Controller>
LearningCurve run_learning(const MetaMdpConfig& cfg, const LearningTask& task, int steps, Controller&& controller) {
  if (steps < 0) throw InputError("run_learning: steps must be >= 0");
  const EnvInstance env = cfg.make_env(task.context);
  PolicyParams params = task.theta0;
  LearningCurve curve;
  BatchEstimate est = estimate_batch(env, params, cfg, task.stream.derive(Purpose::Rollout, 0));
  curve.returns.push_back(est.mean_return);
  curve.std_errors.push_back(est.std_error);
  curve.failures.push_back(est.failures);
  for (int t = 0; t < steps; ++t) {
    const MetaState x{params.theta, est.gradient.natural.vector, task.context};
    StepDecision d = controller(t, x, est, params);
    curve.step_sizes.push_back(d.h);
    params = std::move(d.next);
    est = estimate_batch(env, params, cfg, task.stream.derive(Purpose::Rollout, static_cast<std::uint64_t>(t) + 1));
    curve.returns.push_back(est.mean_return);
    curve.std_errors.push_back(est.std_error);
    curve.failures.push_back(est.failures);
  }
  return curve;
}

/// Aggregate of per-task learning curves.
struct CurveSummary {
  Vector mean_return;  // T + 1 entries
  Vector std_error;
  Vector mean_h;       // T entries
  Vector failures;     // mean failed trajectories per evaluation point
  std::vector<LearningCurve> per_task;
};

inline CurveSummary summarize_curves(std::vector<LearningCurve> curves) {
  CurveSummary s;
  if (curves.empty()) return s;
  const std::size_t points = curves.front().returns.size();
  for (std::size_t t = 0; t < points; ++t) {
    Vector r, f;
    for (const auto& c : curves) {
      r.push_back(c.returns[t]);
      f.push_back(c.failures[t]);
    }
    s.mean_return.push_back(sample_mean(r));
    s.std_error.push_back(standard_error(r));
    s.failures.push_back(sample_mean(f));
  }
  for (std::size_t t = 0; t + 1 < points; ++t) {
    Vector h;
    for (const auto& c : curves) h.push_back(c.step_sizes[t]);
    s.mean_h.push_back(sample_mean(h));
  }
  s.per_task = std::move(curves);
  return s;
}

/// Controller that applies NGA with the step size returned by `pick`.
template <class Pick>
auto nga_controller(Pick pick) {
  return [pick = std::move(pick)](int t, const MetaState& x, const BatchEstimate& est,
                                  const PolicyParams& params) mutable {
    const double h = pick(t, x, est);
    return StepDecision{nga_update(params, h, est.gradient.natural.vector).params, h};
  };
}

}  // namespace metastep
