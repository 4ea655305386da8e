#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "metastep/core.hpp"
#include "metastep/environments.hpp"
#include "metastep/parallel.hpp"
#include "metastep/policy_gradient.hpp"

namespace metastep {

struct LipschitzConstants {
  double L_P = 0.0;
  double L_r = 0.0;
  double L_pi = 0.0;
  double L_omega_P = 0.0;
  double L_omega_r = 0.0;
  double gamma = 0.0;
  double M_theta = 0.0;
  double L_grad_log_pi = 0.0;
  double L_pi_theta = 0.0;
  double L_grad_log_pi_theta = 0.0;

  void validate() const {
    for (double v : {L_P, L_r, L_pi, L_omega_P, L_omega_r, M_theta, L_grad_log_pi, L_pi_theta, L_grad_log_pi_theta})
      if (!(v >= 0.0)) throw InputError("LipschitzConstants: moduli must be >= 0");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw InputError("LipschitzConstants: gamma must lie in [0, 1)");
  }
};

namespace detail {

inline double contraction_gap(const LipschitzConstants& c, double l_pi) {
  c.validate();
  const double k = c.gamma * c.L_P * (1.0 + l_pi);
  if (k >= 1.0)
    throw DomainError("contraction condition gamma * L_P * (1 + L_pi) < 1 violated (value " + std::to_string(k) + ")");
  return 1.0 - k;
}

}  // namespace detail

/// L_V = L_r (1 + L_pi) / (1 - gamma L_P (1 + L_pi)).
inline double l_v_pi(const LipschitzConstants& c) {
  return c.L_r * (1.0 + c.L_pi) / detail::contraction_gap(c, c.L_pi);
}

/// L_Q = L_r / (1 - gamma L_P (1 + L_pi)).
inline double l_q_state_action(const LipschitzConstants& c) { return c.L_r / detail::contraction_gap(c, c.L_pi); }

/// L_omegaQ = (L_omega_r + gamma L_omega_P L_V) / (1 - gamma).
inline double l_q_context(const LipschitzConstants& c) {
  const double lv = l_v_pi(c);
  return (c.L_omega_r + c.gamma * c.L_omega_P * lv) / (1.0 - c.gamma);
}

/// L_delta = gamma L_omega_P / (1 - gamma L_P (1 + L_pi(theta))).
inline double l_delta(const LipschitzConstants& c) {
  return c.gamma * c.L_omega_P / detail::contraction_gap(c, c.L_pi_theta);
}

/// L_eta = R_max / (1 - gamma) * L_grad_log_pi + M_theta * L_Q.
inline double l_eta(const LipschitzConstants& c, double r_max, double l_q) {
  c.validate();
  if (r_max < 0.0 || l_q < 0.0) throw InputError("l_eta: R_max and L_Q must be >= 0");
  return r_max / (1.0 - c.gamma) * c.L_grad_log_pi + c.M_theta * l_q;
}

inline double l_eta(const LipschitzConstants& c, double r_max) { return l_eta(c, r_max, l_q_state_action(c)); }

/// L_grad_j = L_eta (1 + L_pi(theta)) L_delta + M_theta L_omegaQ.
inline double l_grad_j(const LipschitzConstants& c, double l_eta_val, double l_delta_val, double l_q_context_val) {
  c.validate();
  return l_eta_val * (1.0 + c.L_pi_theta) * l_delta_val + c.M_theta * l_q_context_val;
}

/// Analytic constants of Navigation2D: reward is 1-Lipschitz in the goal and
/// the transition does not depend on it.
inline LipschitzConstants nav2d_constants(double gamma) {
  LipschitzConstants c;
  c.L_omega_r = 1.0;
  c.L_omega_P = 0.0;
  c.gamma = gamma;
  return c;
}

// ---------------------------------------------------------------------------
// Empirical check of |j_w - j_w'| <= L_omegaQ d(w, w') on Navigation2D.

struct BoundRow {
  int pair_id = 0;
  double distance = 0.0;
  double abs_delta = 0.0;
  double bound = 0.0;  // L_omegaQ * distance
  double slack = 0.0;  // 4 (stderr_1 + stderr_2)
  bool pass = true;
};

struct BoundReport {
  double lipschitz = 0.0;
  std::vector<BoundRow> rows;
  int violations = 0;
  double min_margin = 0.0;  // min over pairs of bound + slack - |delta j|
};

/// Paired-seed returns of one policy on `pairs` random context pairs; each
/// pair reuses the same rollout stream for both contexts.
inline BoundReport verify_return_bound(const PolicyParams& policy, int pairs, int n, const RngStream& rng,
                                       double gamma = 0.99, int jobs = 1) {
  if (pairs < 1 || n < 1) throw InputError("verify_return_bound: pairs and n must be >= 1");
  BoundReport rep;
  rep.lipschitz = l_q_context(nav2d_constants(gamma));
  const ContextBox box = family_traits(Family::Nav2D).contexts;
  rep.rows.resize(static_cast<std::size_t>(pairs));
  parallel_for(rep.rows.size(), jobs, [&](std::size_t i) {
    const RngStream s = rng.derive(Purpose::Pair, i);
    RngStream ctx = s.derive(Purpose::Context);
    const Vector a = sample_context(box, ctx);
    const Vector b = sample_context(box, ctx);
    const RngStream roll = s.derive(Purpose::Rollout);
    const ReturnEstimate ja = estimate_return(EnvInstance(Family::Nav2D, a), policy, n, gamma, roll);
    const ReturnEstimate jb = estimate_return(EnvInstance(Family::Nav2D, b), policy, n, gamma, roll);
    BoundRow& r = rep.rows[i];
    r.pair_id = static_cast<int>(i);
    r.distance = std::hypot(a[0] - b[0], a[1] - b[1]);
    r.abs_delta = std::abs(ja.mean - jb.mean);
    r.bound = rep.lipschitz * r.distance;
    r.slack = 4.0 * (ja.std_error + jb.std_error);
    r.pass = r.abs_delta <= r.bound + r.slack;
  });
  rep.min_margin = std::numeric_limits<double>::infinity();
  for (const auto& r : rep.rows) {
    rep.violations += r.pass ? 0 : 1;
    rep.min_margin = std::min(rep.min_margin, r.bound + r.slack - r.abs_delta);
  }
  return rep;
}

inline void write_bound_csv(std::ostream& os, const BoundReport& rep, const std::string& comment = {}) {
  if (!comment.empty()) os << "# " << comment << '\n';
  const auto old = os.precision(17);
  os << "pair_id,distance,abs_delta_j,bound,slack,pass\n";
  for (const auto& r : rep.rows)
    os << r.pair_id << ',' << r.distance << ',' << r.abs_delta << ',' << r.bound << ',' << r.slack << ','
       << (r.pass ? 1 : 0) << '\n';
  os.precision(old);
}

}  // namespace metastep
