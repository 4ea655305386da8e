#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metastep/errors.hpp"
#include "metastep/rng.hpp"

namespace metastep {

using Vector = std::vector<double>;

struct MdpDescriptor {
  int state_dim = 1;
  int action_dim = 1;
  int horizon = 1;
  double gamma = 1.0;
  double reward_bound = 0.0;

  void validate() const {
    if (state_dim < 1 || action_dim < 1) throw InputError("MdpDescriptor: dimensions must be >= 1");
    if (horizon < 1) throw InputError("MdpDescriptor: horizon must be >= 1");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw InputError("MdpDescriptor: gamma must lie in [0, 1]");
    if (!(reward_bound >= 0.0)) throw InputError("MdpDescriptor: reward_bound must be >= 0");
  }
};

/// Gaussian linear policy a ~ N(b + W s, sigma^2 I).
///
/// theta is laid out per action dimension as [b_d, w_d1, ..., w_dS], so its
/// length is action_dim * (state_dim + 1). sigma is a fixed constant of the
/// experiment; sigma = 0 is accepted for deterministic rollouts, but the
/// score function is undefined there.
struct PolicyParams {
  Vector theta;
  double sigma = 1.0;
  int state_dim = 1;
  int action_dim = 1;

  PolicyParams() = default;
  PolicyParams(int state_dim_, int action_dim_, double sigma_)
      : theta(static_cast<std::size_t>(action_dim_ * (state_dim_ + 1)), 0.0),
        sigma(sigma_),
        state_dim(state_dim_),
        action_dim(action_dim_) {
    validate();
  }
  PolicyParams(Vector theta_, int state_dim_, int action_dim_, double sigma_)
      : theta(std::move(theta_)), sigma(sigma_), state_dim(state_dim_), action_dim(action_dim_) {
    validate();
  }

  std::size_t size() const { return theta.size(); }
  std::size_t row_width() const { return static_cast<std::size_t>(state_dim) + 1; }

  void validate() const {
    if (state_dim < 1 || action_dim < 1) throw InputError("PolicyParams: dimensions must be >= 1");
    if (theta.size() != static_cast<std::size_t>(action_dim) * row_width())
      throw InputError("PolicyParams: theta length must be action_dim * (state_dim + 1)");
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw InputError("PolicyParams: sigma must be finite and >= 0");
    for (double v : theta)
      if (!std::isfinite(v)) throw InputError("PolicyParams: theta must be finite");
  }
};

struct Step {
  Vector state;
  Vector action;
  double reward = 0.0;
};

struct Trajectory {
  std::vector<Step> steps;
  bool truncated = false;  // cut by the horizon rather than a terminal state
  bool failed = false;     // ended in the environment's failure event (e.g. overshoot)
};

/// Outcome of one environment transition.
struct Transition {
  Vector state;
  double reward = 0.0;
  bool done = false;
  bool failure = false;
};

/// Anything that can be rolled out: a descriptor, an initial-state sampler
/// and a (possibly stochastic) step function. Episode state lives in the
/// caller, so implementations stay immutable.
template <class E>
concept Environment = requires(const E& env, RngStream& rng, std::span<const double> s,
                               std::span<const double> a) {
  { env.descriptor() } -> std::convertible_to<MdpDescriptor>;
  { env.reset(rng) } -> std::same_as<Vector>;
  { env.step(s, a, rng) } -> std::same_as<Transition>;
};

namespace detail {

inline void check_state(const PolicyParams& params, std::span<const double> state) {
  if (state.size() != static_cast<std::size_t>(params.state_dim))
    throw InputError("state length " + std::to_string(state.size()) + " does not match policy state_dim " +
                     std::to_string(params.state_dim));
}

inline void check_action(const PolicyParams& params, std::span<const double> action) {
  if (action.size() != static_cast<std::size_t>(params.action_dim))
    throw InputError("action length " + std::to_string(action.size()) + " does not match policy action_dim " +
                     std::to_string(params.action_dim));
}

}  // namespace detail

inline Vector policy_mean(const PolicyParams& params, std::span<const double> state) {
  detail::check_state(params, state);
  const std::size_t width = params.row_width();
  Vector mean(static_cast<std::size_t>(params.action_dim));
  for (std::size_t d = 0; d < mean.size(); ++d) {
    const double* row = params.theta.data() + d * width;
    double m = row[0];
    for (std::size_t i = 0; i < state.size(); ++i) m += row[i + 1] * state[i];
    mean[d] = m;
  }
  return mean;
}

inline Vector policy_sample(const PolicyParams& params, std::span<const double> state, RngStream& rng) {
  Vector a = policy_mean(params, state);
  for (double& v : a) v += params.sigma * rng.normal();
  return a;
}

/// Score function d/dtheta log pi(a|s), in theta layout.
inline Vector log_policy_gradient(const PolicyParams& params, std::span<const double> state,
                                  std::span<const double> action) {
  detail::check_action(params, action);
  if (!(params.sigma > 0.0)) throw InputError("log_policy_gradient: sigma must be > 0");
  const Vector mean = policy_mean(params, state);
  const double inv_var = 1.0 / (params.sigma * params.sigma);
  const std::size_t width = params.row_width();
  Vector grad(params.size());
  for (std::size_t d = 0; d < mean.size(); ++d) {
    const double c = (action[d] - mean[d]) * inv_var;
    grad[d * width] = c;
    for (std::size_t i = 0; i < state.size(); ++i) grad[d * width + i + 1] = c * state[i];
  }
  return grad;
}

inline double trajectory_return(const Trajectory& traj, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw InputError("trajectory_return: gamma must lie in [0, 1]");
  double total = 0.0;
  double discount = 1.0;
  for (const Step& step : traj.steps) {
    total += discount * step.reward;
    discount *= gamma;
  }
  return total;
}

template <Environment Env>
Trajectory rollout(const Env& env, const PolicyParams& params, RngStream& rng) {
  const MdpDescriptor desc = env.descriptor();
  Trajectory traj;
  traj.steps.reserve(static_cast<std::size_t>(desc.horizon));
  Vector state = env.reset(rng);
  bool done = false;
  for (int t = 0; t < desc.horizon && !done; ++t) {
    Vector action = policy_sample(params, state, rng);
    Transition next = env.step(state, action, rng);
    traj.steps.push_back(Step{std::move(state), std::move(action), next.reward});
    state = std::move(next.state);
    done = next.done;
    traj.failed = next.failure;
  }
  traj.truncated = !done;
  return traj;
}

struct ReturnEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::vector<Trajectory> trajectories;
};

inline double sample_mean(std::span<const double> values) {
  double sum = 0.0;
  for (double v : values) sum += v;
  return values.empty() ? 0.0 : sum / static_cast<double>(values.size());
}

/// Standard error of the mean with the n-1 variance; 0 for a single value.
inline double standard_error(std::span<const double> values) {
  const std::size_t n = values.size();
  if (n < 2) return 0.0;
  const double m = sample_mean(values);
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n));
}

/// Monte-Carlo return of n rollouts. Trajectory i draws from
/// rng.derive(Purpose::Trajectory, i), so two calls with the same stream use
/// common random numbers regardless of the policy or context.
template <Environment Env>
ReturnEstimate estimate_return(const Env& env, const PolicyParams& params, int n, double gamma,
                               const RngStream& rng) {
  if (n < 1) throw InputError("estimate_return: batch size must be >= 1");
  ReturnEstimate out;
  out.trajectories.reserve(static_cast<std::size_t>(n));
  Vector returns;
  returns.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    RngStream stream = rng.derive(Purpose::Trajectory, static_cast<std::uint64_t>(i));
    out.trajectories.push_back(rollout(env, params, stream));
    returns.push_back(trajectory_return(out.trajectories.back(), gamma));
  }
  out.mean = sample_mean(returns);
  out.std_error = standard_error(returns);
  return out;
}

}  // namespace metastep
