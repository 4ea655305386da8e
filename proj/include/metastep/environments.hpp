#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "metastep/core.hpp"

namespace metastep {

enum class Family { Nav2D, Minigolf, CartPole, SwingUp };

inline std::string_view family_name(Family f) {
  switch (f) {
    case Family::Nav2D: return "nav2d";
    case Family::Minigolf: return "minigolf";
    case Family::CartPole: return "cartpole";
    case Family::SwingUp: return "swingup";
  }
  return "unknown";
}

inline Family parse_family(std::string_view name) {
  if (name == "nav2d" || name == "navigation2d") return Family::Nav2D;
  if (name == "minigolf") return Family::Minigolf;
  if (name == "cartpole") return Family::CartPole;
  if (name == "swingup") return Family::SwingUp;
  throw InputError("unknown environment family '" + std::string(name) + "'");
}

/// Axis-aligned support of the context distribution psi (uniform).
struct ContextBox {
  Vector low;
  Vector high;

  std::size_t dim() const { return low.size(); }
  bool contains(std::span<const double> c) const {
    if (c.size() != low.size()) return false;
    for (std::size_t i = 0; i < c.size(); ++i)
      if (c[i] < low[i] || c[i] > high[i]) return false;
    return true;
  }
  Vector center() const {
    Vector c(low.size());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = 0.5 * (low[i] + high[i]);
    return c;
  }
  void validate() const {
    if (low.empty() || low.size() != high.size()) throw InputError("ContextBox: low/high must be non-empty and equal length");
    for (std::size_t i = 0; i < low.size(); ++i)
      if (!(low[i] <= high[i])) throw InputError("ContextBox: low must not exceed high");
  }
};

/// Per-family constants: dimensions, horizon, discount, policy noise and
/// the context box.
struct FamilyTraits {
  int state_dim;
  int action_dim;
  int horizon;
  double gamma;
  double sigma;
  double reward_bound;
  ContextBox contexts;
};

namespace nav2d {
inline constexpr double kMaxSpeed = 0.1;
inline constexpr double kGoalThreshold = 0.01;
}  // namespace nav2d

namespace minigolf {
inline constexpr double kGravity = 9.81;
inline constexpr double kBallRadius = 0.02135;
inline constexpr double kHoleDiameter = 0.10;
inline constexpr double kMinForce = 1e-5;
inline constexpr double kMaxForce = 10.0;
inline constexpr double kNoiseStd = 0.5;
inline constexpr double kMaxStartDistance = 20.0;
inline constexpr double kOvershootReward = -100.0;
}  // namespace minigolf

namespace cartpole {
inline constexpr double kGravity = 9.8;
inline constexpr double kCartMass = 1.0;
inline constexpr double kForce = 10.0;
inline constexpr double kTau = 0.02;
inline constexpr double kAngleLimit = 12.0 * std::numbers::pi / 180.0;
inline constexpr double kPositionLimit = 2.4;
inline constexpr double kSwingUpPositionLimit = 3.0;
inline constexpr double kSwingUpPoleLength = 0.5;
inline constexpr double kSwingUpFailureReward = -100.0;
inline constexpr double kInitNoise = 0.05;
}  // namespace cartpole

inline FamilyTraits family_traits(Family f) {
  switch (f) {
    case Family::Nav2D:
      // positions stay within |p| <= H * v_max = 1, goals within 0.5
      return {2, 2, 10, 0.99, 1.001, 1.5 * std::numbers::sqrt2, {{-0.5, -0.5}, {0.5, 0.5}}};
    case Family::Minigolf:
      return {1, 1, 20, 0.99, 0.1, 100.0, {{0.7, 0.065}, {1.0, 0.196}}};
    case Family::CartPole:
      return {4, 1, 100, 1.0, 1.001, 1.0, {{0.1, 0.5}, {2.0, 1.5}}};
    case Family::SwingUp:
      return {4, 1, 200, 1.0, 1.001, 100.0, {{0.1}, {2.0}}};
  }
  throw InputError("family_traits: unknown family");
}

inline Vector sample_context(const ContextBox& box, RngStream& rng) {
  Vector c(box.dim());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = rng.uniform(box.low[i], box.high[i]);
  return c;
}

inline Vector sample_context(Family f, RngStream& rng) { return sample_context(family_traits(f).contexts, rng); }

// ---------------------------------------------------------------------------
// Step functions. Each is a pure function of its arguments (plus the noise
// stream for Minigolf).

/// Point mass moving toward goal (x_goal, y_goal); reward is the negative
/// distance after the move.
inline Transition nav2d_step(std::span<const double> state, std::span<const double> action,
                             std::span<const double> goal) {
  if (state.size() != 2 || action.size() != 2 || goal.size() != 2)
    throw InputError("nav2d_step: state, action and goal must be 2-vectors");
  Transition out;
  out.state.resize(2);
  for (int i = 0; i < 2; ++i)
    out.state[i] = state[i] + std::clamp(action[i], -nav2d::kMaxSpeed, nav2d::kMaxSpeed);
  const double dist = std::hypot(out.state[0] - goal[0], out.state[1] - goal[1]);
  out.reward = -dist;
  out.done = dist < nav2d::kGoalThreshold;
  return out;
}

struct MinigolfShot {
  double deceleration;
  double v_min;
  double v_max;
};

inline MinigolfShot minigolf_window(double distance, double friction) {
  using namespace minigolf;
  const double d = 5.0 / 7.0 * friction * kGravity;
  const double v_min = std::sqrt(2.0 * d * distance);
  const double lip = 2.0 * kHoleDiameter - kBallRadius;
  const double v_max = std::sqrt(lip * lip * kGravity / (2.0 * kBallRadius) + v_min * v_min);
  return {d, v_min, v_max};
}

/// Putt with force `action[0]` from `state[0]` metres; context = (putter
/// length, friction). The ball speed is force * l^2 * (1 + eps).
inline Transition minigolf_step(std::span<const double> state, std::span<const double> action,
                                std::span<const double> context, RngStream& rng) {
  using namespace minigolf;
  if (state.size() != 1 || action.size() != 1 || context.size() != 2)
    throw InputError("minigolf_step: expects 1-d state/action and (length, friction) context");
  const double x = state[0];
  const double force = std::clamp(action[0], kMinForce, kMaxForce);
  const double eps = rng.normal(0.0, kNoiseStd);
  const double length = context[0];
  const double v = std::max(0.0, force * length * length * (1.0 + eps));
  const MinigolfShot w = minigolf_window(x, context[1]);

  Transition out;
  if (v >= w.v_min && v <= w.v_max) {
    out.state = {0.0};
    out.reward = 0.0;
    out.done = true;
  } else if (v > w.v_max) {
    out.state = {x};
    out.reward = kOvershootReward;
    out.done = true;
    out.failure = true;
  } else {
    out.state = {x - v * v / (2.0 * w.deceleration)};
    out.reward = -1.0;
  }
  return out;
}

/// One explicit-Euler step of the classic cart-pole; state is
/// (x, x_dot, phi, phi_dot). A positive action pushes with +F, anything else
/// with -F.
inline Vector cartpole_dynamics(std::span<const double> state, double action, double pole_mass,
                                double pole_length) {
  using namespace cartpole;
  const double x = state[0], x_dot = state[1], phi = state[2], phi_dot = state[3];
  const double force = action > 0.0 ? kForce : -kForce;
  const double total_mass = kCartMass + pole_mass;
  const double polemass_length = pole_mass * pole_length;
  const double c = std::cos(phi), s = std::sin(phi);
  const double temp = (force + polemass_length * phi_dot * phi_dot * s) / total_mass;
  const double phi_acc =
      (kGravity * s - c * temp) / (pole_length * (4.0 / 3.0 - pole_mass * c * c / total_mass));
  const double x_acc = temp - polemass_length * phi_acc * c / total_mass;
  return {x + kTau * x_dot, x_dot + kTau * x_acc, phi + kTau * phi_dot, phi_dot + kTau * phi_acc};
}

/// Context = (pole mass, pole length). +1 while balanced; leaving the
/// angle/position limits ends the episode with no reward for that step.
inline Transition cartpole_step(std::span<const double> state, std::span<const double> action,
                                std::span<const double> context) {
  using namespace cartpole;
  if (state.size() != 4 || action.size() != 1 || context.size() != 2)
    throw InputError("cartpole_step: expects 4-d state, 1-d action, (mass, length) context");
  Transition out;
  out.state = cartpole_dynamics(state, action[0], context[0], context[1]);
  const bool fallen = std::abs(out.state[2]) > kAngleLimit || std::abs(out.state[0]) > kPositionLimit;
  out.reward = fallen ? 0.0 : 1.0;
  out.done = fallen;
  return out;
}

/// Context = (pole mass,), pole length fixed. Reward cos(phi); crossing
/// the track limit costs -100 and ends the episode.
inline Transition swingup_step(std::span<const double> state, std::span<const double> action,
                               std::span<const double> context) {
  using namespace cartpole;
  if (state.size() != 4 || action.size() != 1 || context.size() != 1)
    throw InputError("swingup_step: expects 4-d state, 1-d action, (mass) context");
  Transition out;
  out.state = cartpole_dynamics(state, action[0], context[0], kSwingUpPoleLength);
  if (std::abs(out.state[0]) > kSwingUpPositionLimit) {
    out.reward = kSwingUpFailureReward;
    out.done = true;
    out.failure = true;
  } else {
    out.reward = std::cos(out.state[2]);
  }
  return out;
}

// ---------------------------------------------------------------------------

/// One task of a family: immutable context plus descriptor.
class EnvInstance {
 public:
  EnvInstance(Family family, Vector context, std::optional<int> horizon = std::nullopt)
      : family_(family), context_(std::move(context)) {
    const FamilyTraits t = family_traits(family);
    if (context_.size() != t.contexts.dim())
      throw InputError("EnvInstance: context for " + std::string(family_name(family)) + " must have " +
                       std::to_string(t.contexts.dim()) + " entries");
    desc_ = MdpDescriptor{t.state_dim, t.action_dim, horizon.value_or(t.horizon), t.gamma, t.reward_bound};
    desc_.validate();
  }

  Family family() const { return family_; }
  const Vector& context() const { return context_; }
  MdpDescriptor descriptor() const { return desc_; }

  Vector reset(RngStream& rng) const {
    using namespace cartpole;
    switch (family_) {
      case Family::Nav2D:
        return {0.0, 0.0};
      case Family::Minigolf:
        return {rng.uniform(0.0, minigolf::kMaxStartDistance)};
      case Family::CartPole: {
        Vector s(4);
        for (double& v : s) v = rng.uniform(-kInitNoise, kInitNoise);
        return s;
      }
      case Family::SwingUp: {
        Vector s(4);
        for (double& v : s) v = rng.uniform(-kInitNoise, kInitNoise);
        s[2] += std::numbers::pi;
        return s;
      }
    }
    return {};
  }

  Transition step(std::span<const double> state, std::span<const double> action, RngStream& rng) const {
    switch (family_) {
      case Family::Nav2D: return nav2d_step(state, action, context_);
      case Family::Minigolf: return minigolf_step(state, action, context_, rng);
      case Family::CartPole: return cartpole_step(state, action, context_);
      case Family::SwingUp: return swingup_step(state, action, context_);
    }
    throw InputError("EnvInstance: unknown family");
  }

 private:
  Family family_;
  Vector context_;
  MdpDescriptor desc_;
};

static_assert(Environment<EnvInstance>);

}  // namespace metastep
