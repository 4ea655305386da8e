#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "metastep/core.hpp"

namespace metastep {

struct GradientEstimate {
  Vector vector;
  int batch_size = 0;
  double norm = 0.0;

  static GradientEstimate from(Vector v, int n) {
    GradientEstimate g{std::move(v), n, 0.0};
    double ss = 0.0;
    for (double x : g.vector) ss += x * x;
    g.norm = std::sqrt(ss);
    return g;
  }
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// GPOMDP estimate: mean over trajectories of
///   sum_t (sum_{t' <= t} score_t') gamma^t r_t.
/// With `baseline`, the per-timestep batch mean of gamma^t r_t is subtracted
/// from each reward term (unbiased since it does not depend on the actions).
inline GradientEstimate pgt_gradient(std::span<const Trajectory> trajectories, const PolicyParams& params,
                                     double gamma, bool baseline = false) {
  if (trajectories.empty()) throw InputError("pgt_gradient: empty trajectory batch");
  const std::size_t dim = params.size();
  const double n = static_cast<double>(trajectories.size());

  Vector step_baseline;
  if (baseline) {
    std::size_t longest = 0;
    for (const auto& tr : trajectories) longest = std::max(longest, tr.steps.size());
    step_baseline.assign(longest, 0.0);
    for (const auto& tr : trajectories) {
      double discount = 1.0;
      for (std::size_t t = 0; t < tr.steps.size(); ++t) {
        step_baseline[t] += discount * tr.steps[t].reward;
        discount *= gamma;
      }
    }
    for (double& b : step_baseline) b /= n;
  }

  Vector total(dim, 0.0);
  Vector cumulative(dim);
  for (const auto& tr : trajectories) {
    std::fill(cumulative.begin(), cumulative.end(), 0.0);
    double discount = 1.0;
    for (std::size_t t = 0; t < tr.steps.size(); ++t) {
      const Step& st = tr.steps[t];
      const Vector score = log_policy_gradient(params, st.state, st.action);
      for (std::size_t i = 0; i < dim; ++i) cumulative[i] += score[i];
      double weight = discount * st.reward;
      if (baseline) weight -= step_baseline[t];
      for (std::size_t i = 0; i < dim; ++i) total[i] += cumulative[i] * weight;
      discount *= gamma;
    }
  }
  for (double& v : total) v /= n;
  return GradientEstimate::from(std::move(total), static_cast<int>(trajectories.size()));
}

/// Score vectors of every state-action pair in the batch.
inline std::vector<Vector> batch_scores(std::span<const Trajectory> trajectories, const PolicyParams& params) {
  std::vector<Vector> scores;
  for (const auto& tr : trajectories)
    for (const auto& st : tr.steps) scores.push_back(log_policy_gradient(params, st.state, st.action));
  return scores;
}

/// (F + damping I) v with F the empirical Fisher matrix averaged over the
/// given score vectors, computed without forming F.
inline Vector fisher_vector_product(std::span<const Vector> scores, std::span<const double> v, double damping) {
  if (damping < 0.0) throw InputError("fisher_vector_product: damping must be >= 0");
  Vector out(v.size(), 0.0);
  if (!scores.empty()) {
    for (const Vector& g : scores) {
      if (g.size() != v.size()) throw InputError("fisher_vector_product: vector length does not match theta");
      const double c = dot(g, v);
      for (std::size_t i = 0; i < v.size(); ++i) out[i] += c * g[i];
    }
    const double inv = 1.0 / static_cast<double>(scores.size());
    for (double& x : out) x *= inv;
  }
  for (std::size_t i = 0; i < v.size(); ++i) out[i] += damping * v[i];
  return out;
}

inline Vector fisher_vector_product(std::span<const Trajectory> trajectories, const PolicyParams& params,
                                    std::span<const double> v, double damping) {
  if (v.size() != params.size()) throw InputError("fisher_vector_product: vector length does not match theta");
  const std::vector<Vector> scores = batch_scores(trajectories, params);
  return fisher_vector_product(std::span<const Vector>(scores), v, damping);
}

struct CgResult {
  Vector x;
  int iterations = 0;
  double residual_norm = 0.0;
};

using LinearOperator = std::function<Vector(std::span<const double>)>;

/// Conjugate gradient for SPD systems. Stops once ||r|| <= tol ||b|| or
/// after max_iters iterations; residual_norm is the recursive residual.
inline CgResult conjugate_gradient(const LinearOperator& apply_A, std::span<const double> b, int max_iters,
                                   double tol) {
  const std::size_t n = b.size();
  CgResult res;
  res.x.assign(n, 0.0);
  Vector r(b.begin(), b.end());
  Vector p = r;
  double rr = dot(r, r);
  const double b_norm = std::sqrt(rr);
  res.residual_norm = b_norm;
  if (b_norm == 0.0) return res;
  const double target = tol * b_norm;
  for (int k = 0; k < max_iters; ++k) {
    if (std::sqrt(rr) <= target) break;
    const Vector Ap = apply_A(p);
    const double pAp = dot(p, Ap);
    if (!std::isfinite(pAp)) throw NumericalError("conjugate_gradient: non-finite curvature p'Ap");
    if (pAp <= 0.0) break;  // converged to roundoff, or the operator is not SPD on p
    const double alpha = rr / pAp;
    for (std::size_t i = 0; i < n; ++i) {
      res.x[i] += alpha * p[i];
      r[i] -= alpha * Ap[i];
    }
    const double rr_next = dot(r, r);
    if (!std::isfinite(rr_next) || !std::isfinite(alpha)) throw NumericalError("conjugate_gradient: non-finite residual");
    ++res.iterations;
    res.residual_norm = std::sqrt(rr_next);
    if (rr_next == 0.0) break;
    const double beta = rr_next / rr;
    for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
    rr = rr_next;
  }
  return res;
}

struct NaturalGradientOptions {
  int cg_iters = 10;
  double cg_tol = 1e-10;
  double damping = 1e-3;
  bool baseline = false;
};

struct NaturalGradient {
  GradientEstimate natural;  // g solving (F + damping I) g = grad
  GradientEstimate vanilla;  // plain GPOMDP gradient
  double residual = 0.0;     // ||(F + damping I) g - grad||
  int cg_iterations = 0;
  bool degenerate = false;   // zero gradient and zero Fisher: g = 0
};

inline NaturalGradient natural_gradient(std::span<const Trajectory> trajectories, const PolicyParams& params,
                                        double gamma, const NaturalGradientOptions& opt = {}) {
  NaturalGradient out;
  out.vanilla = pgt_gradient(trajectories, params, gamma, opt.baseline);
  const std::vector<Vector> scores = batch_scores(trajectories, params);

  bool fisher_zero = true;
  for (const auto& g : scores)
    for (double v : g) fisher_zero = fisher_zero && v == 0.0;
  if (out.vanilla.norm == 0.0) {
    out.natural = GradientEstimate::from(Vector(params.size(), 0.0), out.vanilla.batch_size);
    out.degenerate = fisher_zero;
    return out;
  }

  auto apply = [&](std::span<const double> v) {
    return fisher_vector_product(std::span<const Vector>(scores), v, opt.damping);
  };
  CgResult cg = conjugate_gradient(apply, out.vanilla.vector, opt.cg_iters, opt.cg_tol);
  const Vector Fg = apply(cg.x);
  Vector r(Fg.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = Fg[i] - out.vanilla.vector[i];
  out.residual = norm2(r);
  out.cg_iterations = cg.iterations;
  out.natural = GradientEstimate::from(std::move(cg.x), out.vanilla.batch_size);
  return out;
}

struct NgaStep {
  PolicyParams params;
  bool zero_gradient = false;  // update skipped because g = 0 with h > 0
};

/// theta' = theta + h g / ||g||.
inline NgaStep nga_update(const PolicyParams& params, double h, std::span<const double> direction) {
  if (!(h >= 0.0)) throw InputError("nga_update: step size must be >= 0");
  if (direction.size() != params.size()) throw InputError("nga_update: direction length does not match theta");
  NgaStep out{params, false};
  const double n = norm2(direction);
  if (n == 0.0) {
    out.zero_gradient = h > 0.0;
    return out;
  }
  if (h == 0.0) return out;
  const double scale = h / n;
  for (std::size_t i = 0; i < params.size(); ++i) out.params.theta[i] += scale * direction[i];
  return out;
}

}  // namespace metastep
