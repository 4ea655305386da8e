#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "metastep/meta_mdp.hpp"
#include "metastep/parallel.hpp"
#include "metastep/policy_gradient.hpp"

namespace metastep {

enum class OptimizerKind { Fixed, Decay, ExpDecay, Adam, RMSprop, Metagrad };

inline std::string_view optimizer_name(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::Fixed: return "fixed";
    case OptimizerKind::Decay: return "decay";
    case OptimizerKind::ExpDecay: return "expdecay";
    case OptimizerKind::Adam: return "adam";
    case OptimizerKind::RMSprop: return "rmsprop";
    case OptimizerKind::Metagrad: return "metagrad";
  }
  return "unknown";
}

inline OptimizerKind parse_optimizer(std::string_view name) {
  for (auto k : {OptimizerKind::Fixed, OptimizerKind::Decay, OptimizerKind::ExpDecay, OptimizerKind::Adam,
                 OptimizerKind::RMSprop, OptimizerKind::Metagrad})
    if (optimizer_name(k) == name) return k;
  throw InputError("unknown baseline '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Schedules

inline double fixed_step(double alpha, int /*t*/) { return alpha; }

/// alpha / t for t >= 1.
inline double decay_step(double alpha, int t) {
  if (t < 1) throw InputError("decay_step: t must be >= 1");
  return alpha / t;
}

/// h_t = h0 * rate^t.
inline double exp_decay_step(double h0, double rate, int t) {
  if (t < 0) throw InputError("exp_decay_step: t must be >= 0");
  return h0 * std::pow(rate, t);
}

// ---------------------------------------------------------------------------
// Optimizers on the vanilla gradient (ascent)

struct AdamState {
  double alpha = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
  Vector m;
  Vector v;
  int t = 0;
};

struct AdamStep {
  AdamState state;
  Vector theta;
};

inline AdamStep adam_update(AdamState state, std::span<const double> theta, std::span<const double> grad) {
  if (theta.size() != grad.size()) throw InputError("adam_update: gradient length does not match theta");
  if (state.m.empty()) state.m.assign(theta.size(), 0.0);
  if (state.v.empty()) state.v.assign(theta.size(), 0.0);
  if (state.m.size() != theta.size() || state.v.size() != theta.size())
    throw InputError("adam_update: moment vectors do not match theta");
  state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, state.t);
  const double c2 = 1.0 - std::pow(state.beta2, state.t);
  Vector out(theta.begin(), theta.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    out[i] += state.alpha * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
  return {std::move(state), std::move(out)};
}

struct RmspropState {
  double alpha = 1e-3;
  double rho = 0.9;
  double epsilon = 1e-7;
  Vector v;
};

struct RmspropStep {
  RmspropState state;
  Vector theta;
};

inline RmspropStep rmsprop_update(RmspropState state, std::span<const double> theta, std::span<const double> grad) {
  if (theta.size() != grad.size()) throw InputError("rmsprop_update: gradient length does not match theta");
  if (state.v.empty()) state.v.assign(theta.size(), 0.0);
  if (state.v.size() != theta.size()) throw InputError("rmsprop_update: square-average vector does not match theta");
  Vector out(theta.begin(), theta.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    state.v[i] = state.rho * state.v[i] + (1.0 - state.rho) * grad[i] * grad[i];
    out[i] += state.alpha * grad[i] / (std::sqrt(state.v[i]) + state.epsilon);
  }
  return {std::move(state), std::move(out)};
}

// ---------------------------------------------------------------------------
// Metagrad step-size adapter

struct MetagradState {
  double h = 1.0;
  double beta = 0.0;
  double mu = 0.0;
  bool flip_sign = false;  // h' = h + beta * similarity instead of minus
  Vector z;
  bool skipped = false;    // last update skipped on a zero gradient
};

/// z' = mu z + g_prev/|g_prev|;  h' = max(0, h -/+ beta (g_new/|g_new|) . z').
inline MetagradState metagrad_update(MetagradState state, std::span<const double> g_prev,
                                     std::span<const double> g_new) {
  if (g_prev.size() != g_new.size()) throw InputError("metagrad_update: gradient lengths differ");
  const double np = norm2(g_prev), nn = norm2(g_new);
  if (np == 0.0 || nn == 0.0) {
    state.skipped = true;
    return state;
  }
  state.skipped = false;
  if (state.z.empty()) state.z.assign(g_prev.size(), 0.0);
  if (state.z.size() != g_prev.size()) throw InputError("metagrad_update: trace length does not match gradient");
  double sim = 0.0;
  for (std::size_t i = 0; i < state.z.size(); ++i) {
    state.z[i] = state.mu * state.z[i] + g_prev[i] / np;
    sim += g_new[i] / nn * state.z[i];
  }
  const double sign = state.flip_sign ? -1.0 : 1.0;
  state.h = std::max(0.0, state.h - sign * state.beta * sim);
  return state;
}

// ---------------------------------------------------------------------------
// Controllers for run_learning

struct BaselineSpec {
  OptimizerKind kind = OptimizerKind::Fixed;
  double alpha = 1.0;       // fixed h, decay numerator, initial h, or optimizer learning rate
  double decay_rate = 0.9;  // ExpDecay
  double beta = 0.001;      // Metagrad
  double mu = 0.0;          // Metagrad
  bool flip_sign = false;   // Metagrad
};

using Controller = std::function<StepDecision(int, const MetaState&, const BatchEstimate&, const PolicyParams&)>;

/// Fresh controller with zeroed optimizer state. Schedules and metagrad step
/// along the normalized natural gradient; Adam and RMSprop move theta along
/// the vanilla gradient and report the resulting parameter displacement as h.
inline Controller make_controller(const BaselineSpec& spec) {
  auto with_params = [](PolicyParams base, Vector theta) {
    base.theta = std::move(theta);
    return base;
  };
  switch (spec.kind) {
    case OptimizerKind::Fixed:
      return nga_controller([a = spec.alpha](int t, const MetaState&, const BatchEstimate&) { return fixed_step(a, t); });
    case OptimizerKind::Decay:
      return nga_controller(
          [a = spec.alpha](int t, const MetaState&, const BatchEstimate&) { return decay_step(a, t + 1); });
    case OptimizerKind::ExpDecay:
      return nga_controller([a = spec.alpha, r = spec.decay_rate](int t, const MetaState&, const BatchEstimate&) {
        return exp_decay_step(a, r, t);
      });
    case OptimizerKind::Adam: {
      AdamState st;
      st.alpha = spec.alpha;
      return [st, with_params](int, const MetaState&, const BatchEstimate& est, const PolicyParams& p) mutable {
        AdamStep s = adam_update(std::move(st), p.theta, est.gradient.vanilla.vector);
        st = std::move(s.state);
        Vector d(p.theta.size());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = s.theta[i] - p.theta[i];
        return StepDecision{with_params(p, std::move(s.theta)), norm2(d)};
      };
    }
    case OptimizerKind::RMSprop: {
      RmspropState st;
      st.alpha = spec.alpha;
      return [st, with_params](int, const MetaState&, const BatchEstimate& est, const PolicyParams& p) mutable {
        RmspropStep s = rmsprop_update(std::move(st), p.theta, est.gradient.vanilla.vector);
        st = std::move(s.state);
        Vector d(p.theta.size());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = s.theta[i] - p.theta[i];
        return StepDecision{with_params(p, std::move(s.theta)), norm2(d)};
      };
    }
    case OptimizerKind::Metagrad: {
      MetagradState st;
      st.h = spec.alpha;
      st.beta = spec.beta;
      st.mu = spec.mu;
      st.flip_sign = spec.flip_sign;
      Vector prev;
      return [st, prev](int t, const MetaState& x, const BatchEstimate&, const PolicyParams& p) mutable {
        if (t > 0) st = metagrad_update(std::move(st), prev, x.nat_grad);
        prev = x.nat_grad;
        return StepDecision{nga_update(p, st.h, x.nat_grad).params, st.h};
      };
    }
  }
  throw InputError("make_controller: unknown baseline");
}

inline CurveSummary run_baseline(const MetaMdpConfig& cfg, const std::vector<LearningTask>& tasks, int steps,
                                 const BaselineSpec& spec, int jobs = 1) {
  std::vector<LearningCurve> curves(tasks.size());
  parallel_for(tasks.size(), jobs, [&](std::size_t i) {
    curves[i] = run_learning(cfg, tasks[i], steps, make_controller(spec));
  });
  return summarize_curves(std::move(curves));
}

/// {h_max/16, h_max/8, h_max/4, h_max/2, h_max}.
inline Vector default_alpha_grid(double h_max) {
  return {h_max / 16.0, h_max / 8.0, h_max / 4.0, h_max / 2.0, h_max};
}

struct GridResult {
  Vector alphas;
  std::vector<CurveSummary> curves;
  std::size_t best = 0;
};

/// Runs `spec` for each alpha on the same tasks; best = highest mean final
/// return, ties to the smaller alpha.
inline GridResult grid_search(const MetaMdpConfig& cfg, const std::vector<LearningTask>& tasks, int steps,
                              BaselineSpec spec, Vector alphas, int jobs = 1) {
  if (alphas.empty()) throw InputError("grid_search: empty alpha grid");
  std::sort(alphas.begin(), alphas.end());
  GridResult out;
  out.alphas = alphas;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    spec.alpha = alphas[i];
    out.curves.push_back(run_baseline(cfg, tasks, steps, spec, jobs));
    if (out.curves.back().mean_return.back() > best) {
      best = out.curves.back().mean_return.back();
      out.best = i;
    }
  }
  return out;
}

}  // namespace metastep
