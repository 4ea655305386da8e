// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>

#include "metastep/experiment.hpp"
#include "metastep/lipschitz.hpp"

using namespace metastep;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int jobs() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

std::string num(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

double rel_err(const Vector& a, const Vector& b) {
  double num2 = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num2 += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num2 / den);
}

struct ChainEnv {
  MdpDescriptor descriptor() const { return {1, 1, 2, 1.0, 100.0}; }
  Vector reset(RngStream&) const { return {0.0}; }
  Transition step(std::span<const double> s, std::span<const double> a, RngStream&) const {
    return {{s[0] + 1.0}, -(a[0] - s[0]) * (a[0] - s[0]), false, false};
  }
};

struct Bandit {
  MdpDescriptor descriptor() const { return {1, 1, 1, 1.0, 100.0}; }
  Vector reset(RngStream&) const { return {1.0}; }
  Transition step(std::span<const double>, std::span<const double> a, RngStream&) const {
    return {{1.0}, -(a[0] - 2.0) * (a[0] - 2.0), true, false};
  }
};

Outcome gradient_correctness() {
  PolicyParams p({2.0, 1.0}, 1, 1, 0.5);
  const RngStream s(21);
  const int n = 400000;
  const Vector g = pgt_gradient(estimate_return(ChainEnv{}, p, n, 1.0, s).trajectories, p, 1.0).vector;
  Vector fd(2);
  for (int i = 0; i < 2; ++i) {
    PolicyParams hi = p, lo = p;
    hi.theta[i] += 1e-4;
    lo.theta[i] -= 1e-4;
    fd[i] = (estimate_return(ChainEnv{}, hi, n, 1.0, s).mean - estimate_return(ChainEnv{}, lo, n, 1.0, s).mean) / 2e-4;
  }
  const double chain_err = rel_err(g, fd);

  PolicyParams b({0.3, 0.4}, 1, 1, 1.0);
  const int m = 100000;
  const auto batch = estimate_return(Bandit{}, b, m, 1.0, RngStream(23)).trajectories;
  const Vector gb = pgt_gradient(batch, b, 1.0).vector;
  const double analytic = -2.0 * (0.3 + 0.4 - 2.0);
  bool bandit_ok = true;
  double worst = 0.0;
  for (int i = 0; i < 2; ++i) {
    Vector per(m);
    for (int k = 0; k < m; ++k) per[k] = pgt_gradient(std::span<const Trajectory>(&batch[k], 1), b, 1.0).vector[i];
    const double z = std::abs(gb[i] - analytic) / standard_error(per);
    worst = std::max(worst, z);
    bandit_ok = bandit_ok && z < 4.0;
  }
  return {chain_err < 1e-2 && bandit_ok,
          "chain rel err " + num(chain_err) + ", bandit max |z| " + num(worst)};
}

Outcome natural_gradient_contract() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    RngStream r(100 + seed);
    PolicyParams p(2, 2, 1.001);
    for (double& v : p.theta) v = r.normal(0.0, 0.5);
    EnvInstance env(Family::Nav2D, sample_context(Family::Nav2D, r));
    const auto batch = estimate_return(env, p, 40, 0.99, r.derive(Purpose::Rollout)).trajectories;
    const NaturalGradient ng = natural_gradient(batch, p, 0.99);
    const Vector Fg = fisher_vector_product(batch, p, ng.natural.vector, 1e-3);
    Vector res(Fg.size());
    for (std::size_t i = 0; i < res.size(); ++i) res[i] = Fg[i] - ng.vanilla.vector[i];
    worst = std::max(worst, norm2(res) / ng.vanilla.norm);
  }
  RngStream r(8);
  double cg_worst = 0.0;
  int max_iters = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 20;
    std::vector<Vector> Q(n, Vector(n));
    for (auto& row : Q)
      for (double& x : row) x = r.normal();
    std::vector<Vector> A(n, Vector(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t k = 0; k < n; ++k) A[i][j] += Q[k][i] * Q[k][j];
        if (i == j) A[i][j] += n;
      }
    Vector b(n);
    for (double& x : b) x = r.normal();
    auto apply = [&](std::span<const double> v) {
      Vector out(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i] += A[i][j] * v[j];
      return out;
    };
    const CgResult cg = conjugate_gradient(apply, b, 20, 1e-10);
    const Vector Ax = apply(cg.x);
    Vector d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = Ax[i] - b[i];
    cg_worst = std::max(cg_worst, norm2(d) / norm2(b));
    max_iters = std::max(max_iters, cg.iterations);
  }
  return {worst <= 1e-8 && cg_worst <= 1e-8 && max_iters <= 20,
          "max natural residual/|g| " + num(worst) + ", CG max rel residual " + num(cg_worst) + " in <= " +
              std::to_string(max_iters) + " iterations"};
}

Outcome nga_normalization() {
  RngStream r(31);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    PolicyParams p(3, 2, 1.0);
    for (double& v : p.theta) v = r.normal(0.0, 3.0);
    Vector g(p.size());
    for (double& v : g) v = r.normal(0.0, std::pow(10.0, r.uniform(-3.0, 3.0)));
    const double h = r.uniform(0.0, 10.0);
    const PolicyParams q = nga_update(p, h, g).params;
    Vector d(p.size());
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = q.theta[k] - p.theta[k];
    worst = std::max(worst, std::abs(norm2(d) - h) / std::max(1.0, h));
  }
  return {worst <= 1e-12, "max | |dtheta| - h | / max(1, h) = " + num(worst)};
}

Outcome extra_trees_properties() {
  RngStream r(2);
  auto matrix = [&](std::size_t rows, std::size_t cols) {
    Matrix X(rows, cols);
    for (double& v : X.data) v = r.uniform(-1.0, 1.0);
    return X;
  };
  TreeParams grown;
  grown.n_trees = 20;
  grown.min_split_fraction = 1e-9;
  grown.seed = 4;
  bool ok = true;
  std::string why;

  const Matrix Xc = matrix(200, 3);
  const double c = 0.1 + 0.2;
  const Forest fc = fit_forest(Xc, Vector(200, c), grown);
  for (std::size_t i = 0; i < Xc.rows; ++i) ok = ok && fc.predict(Xc.row(i)) == c;
  if (!ok) why += " constant";

  const Forest f1 = fit_forest(Matrix::from_rows({{0.3, -2.0}}), Vector{7.25}, grown);
  if (f1.predict(Vector{5.0, 5.0}) != 7.25) ok = false, why += " memorize";

  const Matrix X = matrix(50, 4);
  Vector y(50);
  for (double& v : y) v = r.normal();
  const Forest f = fit_forest(X, y, grown);
  for (std::size_t i = 0; i < X.rows; ++i)
    if (f.predict(X.row(i)) != y[i]) ok = false, why += " zero-train-error";

  std::ostringstream a, b;
  fit_forest(X, y, grown, 1).write(a);
  fit_forest(X, y, grown, jobs()).write(b);
  if (a.str() != b.str()) ok = false, why += " determinism";

  TreeParams coarse;
  coarse.n_trees = 30;
  coarse.min_split_fraction = 0.05;
  const Forest fb = fit_forest(X, y, coarse);
  const double lo = *std::min_element(y.begin(), y.end()), hi = *std::max_element(y.begin(), y.end());
  const Matrix probe = matrix(2000, 4);
  for (std::size_t i = 0; i < probe.rows; ++i) {
    const double v = fb.predict(probe.row(i));
    if (v < lo || v > hi) {
      ok = false;
      why += " range";
      break;
    }
  }
  return {ok, ok ? "constant, memorize, zero training error, determinism, range: exact" : "failed:" + why};
}

Outcome fqi_oracle() {
  const int next[2][2] = {{1, 0}, {1, 1}};
  const double reward[2][2] = {{0.0, 1.0}, {2.0, -1.0}};
  std::vector<FqiSample> data;
  for (int s = 0; s < 2; ++s)
    for (int a = 0; a < 2; ++a)
      data.push_back({{double(s)}, double(a), reward[s][a], {double(next[s][a])}});
  double worst = 0.0;
  for (double gamma : {1.0, 0.9}) {
    FqiOptions opt;
    opt.iterations = 5;
    opt.gamma_meta = gamma;
    opt.trees.n_trees = 3;
    opt.trees.min_split_fraction = 1e-9;
    opt.action_grid = {0.0, 1.0};
    const FqiRun run = fqi_train(data, opt);
    double q[2][2] = {};
    for (int n = 1; n <= 5; ++n) {
      double nq[2][2];
      for (int s = 0; s < 2; ++s)
        for (int a = 0; a < 2; ++a) {
          const int sp = next[s][a];
          nq[s][a] = reward[s][a] + (n == 1 ? 0.0 : gamma * std::max(q[sp][0], q[sp][1]));
        }
      std::copy(&nq[0][0], &nq[0][0] + 4, &q[0][0]);
      for (int s = 0; s < 2; ++s)
        for (int a = 0; a < 2; ++a)
          worst = std::max(worst, std::abs(clipped_value(run.models[n - 1], Vector{double(s)}, a) - q[s][a]));
    }
  }
  return {worst <= 1e-9, "max |Q_N - VI_N| over N = 1..5 = " + num(worst)};
}

Outcome clipped_identities() {
  RngStream r(3);
  Matrix X(100, 3);
  Vector y1(100), y2(100);
  for (std::size_t i = 0; i < 100; ++i) {
    for (std::size_t j = 0; j < 3; ++j) X(i, j) = r.uniform(0, 1);
    y1[i] = r.normal();
    y2[i] = r.normal();
  }
  TreeParams p;
  p.n_trees = 5;
  const Forest a = fit_forest(X, y1, p);
  p.seed = 1;
  const Forest b = fit_forest(X, y2, p);
  QPair q{a, b, 1.0, make_action_grid(0, 1, 11), 1, false};
  QPair same{a, a, 0.75, make_action_grid(0, 1, 11), 1, false};
  QPair single{a, b, 0.75, make_action_grid(0, 1, 11), 1, true};
  bool min_rule = true, single_eq = true;
  for (int k = 0; k < 200; ++k) {
    const Vector x{r.uniform(0, 1), r.uniform(0, 1)};
    const double h = r.uniform(0, 1);
    Vector in = x;
    in.push_back(h);
    min_rule = min_rule && clipped_value(q, x, h) == std::min(a.predict(in), b.predict(in));
    single_eq = single_eq && clipped_value(same, x, h) == clipped_value(single, x, h);
  }
  std::vector<FqiSample> data;
  for (int i = 0; i < 50; ++i) data.push_back({{r.normal(), r.normal()}, r.uniform(0, 1), r.normal(), {r.normal(), r.normal()}});
  const Vector t = bellman_targets(data, &q, 0.0);
  bool bandit = true;
  for (std::size_t i = 0; i < data.size(); ++i) bandit = bandit && t[i] == data[i].l;
  return {min_rule && single_eq && bandit, std::string("min rule ") + (min_rule ? "ok" : "FAILED") + ", single-Q " +
                                               (single_eq ? "ok" : "FAILED") + ", gamma_meta = 0 targets " +
                                               (bandit ? "ok" : "FAILED")};
}

Outcome lipschitz() {
  bool ok = true;
  auto near = [&](double got, double want) { ok = ok && std::abs(got - want) <= 1e-12; };
  LipschitzConstants c;
  c.L_r = 1.0;
  c.L_P = 0.5;
  c.gamma = 0.9;
  near(l_v_pi(c), 1.0 / (1.0 - 0.45));
  LipschitzConstants q;
  q.L_r = 2.0;
  q.L_P = 0.5;
  q.L_pi = 1.0;
  q.gamma = 0.5;
  near(l_q_state_action(q), 4.0);
  LipschitzConstants w;
  w.L_omega_r = 1.0;
  w.gamma = 0.5;
  near(l_q_context(w), 2.0);
  near(l_q_context(nav2d_constants(0.99)), 100.0);
  LipschitzConstants d;
  d.gamma = 0.5;
  d.L_omega_P = 2.0;
  d.L_P = 0.5;
  near(l_delta(d), 1.0 / 0.75);
  LipschitzConstants e;
  e.gamma = 0.5;
  e.L_grad_log_pi = 1.0;
  e.M_theta = 2.0;
  near(l_eta(e, 1.0, 3.0), 8.0);
  LipschitzConstants g;
  g.L_pi_theta = 1.0;
  g.M_theta = 1.0;
  near(l_grad_j(g, 2.0, 0.5, 3.0), 5.0);
  const bool formulas = ok;

  RngStream r(1);
  const BoundReport det = verify_return_bound(initial_policy(Family::Nav2D, 0.0, r), 1000, 1, RngStream(2), 0.99, jobs());
  RngStream r2(3);
  const BoundReport sto = verify_return_bound(initial_policy(Family::Nav2D, 0.5, r2), 1000, 20, RngStream(4), 0.99, jobs());
  const double rate = static_cast<double>(sto.violations) / static_cast<double>(sto.rows.size());
  return {formulas && det.violations == 0 && rate <= 0.05,
          std::string("formulas ") + (formulas ? "ok" : "FAILED") + ", sigma = 0: " + std::to_string(det.violations) +
              "/1000 violations, sigma = 0.5: " + num(100 * rate) + "% violations"};
}

struct DeskRun {
  CurveSummary fqi;
  GridResult fixed;
};

DeskRun desk_pipeline(Family f, const fs::path& dir) {
  ExperimentConfig c = ExperimentConfig::defaults(f, "desk");
  c.out_dir = dir.string();
  fs::remove_all(dir);
  std::ostringstream log;
  cmd_gen_dataset(c, jobs(), log);
  cmd_train(c, jobs(), log);
  cmd_select(c, jobs(), log);
  DeskRun r;
  r.fqi = cmd_evaluate(c, jobs(), log);
  r.fixed = cmd_baseline(c, "fixed", jobs(), log);
  return r;
}

double pooled_se(double a, double b) { return std::sqrt(a * a + b * b); }

Outcome nav2d_headline(const fs::path& root) {
  const DeskRun r = desk_pipeline(Family::Nav2D, root / "nav2d_a");
  const CurveSummary& best = r.fixed.curves[r.fixed.best];
  const std::size_t mid = r.fqi.mean_h.size() / 2;
  const double se = pooled_se(r.fqi.std_error.back(), best.std_error.back());
  const bool final_ok = r.fqi.mean_return.back() >= best.mean_return.back() - se;
  const bool mid_ok = r.fqi.mean_return[mid] > best.mean_return[mid];
  return {final_ok && mid_ok, "FQI final " + num(r.fqi.mean_return.back()) + " vs best fixed (h = " +
                                  num(r.fixed.alphas[r.fixed.best]) + ") " + num(best.mean_return.back()) +
                                  " - pooled se " + num(se) + "; step " + std::to_string(mid) + ": " +
                                  num(r.fqi.mean_return[mid]) + " vs " + num(best.mean_return[mid])};
}

double mean_failures(const CurveSummary& s) {
  double f = 0.0;
  for (std::size_t t = 1; t < s.failures.size(); ++t) f += s.failures[t];
  return f / static_cast<double>(s.failures.size() - 1);
}

Outcome minigolf_safety(const fs::path& root) {
  const DeskRun r = desk_pipeline(Family::Minigolf, root / "minigolf");
  const CurveSummary& best = r.fixed.curves[r.fixed.best];
  const CurveSummary& largest = r.fixed.curves.back();
  const double se = pooled_se(r.fqi.std_error.back(), best.std_error.back());
  const double f_fqi = mean_failures(r.fqi), f_big = mean_failures(largest);
  const bool final_ok = r.fqi.mean_return.back() >= best.mean_return.back() - se;
  return {f_fqi < f_big && final_ok, "overshoots per step: FQI " + num(f_fqi) + " vs fixed h = " +
                                         num(r.fixed.alphas.back()) + " " + num(f_big) + "; final " +
                                         num(r.fqi.mean_return.back()) + " vs best fixed " +
                                         num(best.mean_return.back()) + " - " + num(se)};
}

Outcome baseline_recursions() {
  bool ok = true;
  double worst = 0.0;
  auto check = [&](double got, double want) {
    worst = std::max(worst, std::abs(got - want));
    ok = ok && std::abs(got - want) <= 1e-12;
  };
  const std::vector<Vector> grads{{1.0, -2.0}, {0.5, 0.1}, {-3.0, 0.0}};
  {
    AdamState st;
    st.alpha = 0.1;
    Vector th{0.5, -1.0}, m(2, 0.0), v(2, 0.0);
    for (int t = 1; t <= 3; ++t) {
      const Vector& g = grads[t - 1];
      const AdamStep s = adam_update(st, th, g);
      for (int i = 0; i < 2; ++i) {
        m[i] = 0.9 * m[i] + 0.1 * g[i];
        v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
        check(s.theta[i], th[i] + 0.1 * (m[i] / (1 - std::pow(0.9, t))) /
                                      (std::sqrt(v[i] / (1 - std::pow(0.999, t))) + 1e-7));
      }
      st = s.state;
      th = s.theta;
    }
  }
  {
    RmspropState st;
    st.alpha = 0.05;
    Vector th{0.5, -1.0}, v(2, 0.0);
    for (const Vector& g : grads) {
      const RmspropStep s = rmsprop_update(st, th, g);
      for (int i = 0; i < 2; ++i) {
        v[i] = 0.9 * v[i] + 0.1 * g[i] * g[i];
        check(s.theta[i], th[i] + 0.05 * g[i] / (std::sqrt(v[i]) + 1e-7));
      }
      st = s.state;
      th = s.theta;
    }
  }
  {
    const std::vector<Vector> g{{1.0, 0.0}, {0.6, 0.8}, {0.0, -2.0}, {3.0, 4.0}};
    MetagradState st;
    st.h = 1.0;
    st.beta = 0.1;
    st.mu = 0.5;
    double h = 1.0, z[2] = {0, 0};
    for (std::size_t t = 1; t < g.size(); ++t) {
      st = metagrad_update(st, g[t - 1], g[t]);
      const double np = std::hypot(g[t - 1][0], g[t - 1][1]), nn = std::hypot(g[t][0], g[t][1]);
      double sim = 0;
      for (int i = 0; i < 2; ++i) {
        z[i] = 0.5 * z[i] + g[t - 1][i] / np;
        sim += g[t][i] / nn * z[i];
      }
      h = std::max(0.0, h - 0.1 * sim);
      check(st.h, h);
    }
  }
  MetagradState id;
  id.h = 1.0;
  id.beta = 0.25;
  const bool aligned = metagrad_update(id, Vector{3.0, 0.0}, Vector{2.0, 0.0}).h == 0.75;
  const bool orthogonal = metagrad_update(id, Vector{1.0, 0.0}, Vector{0.0, 5.0}).h == 1.0;
  return {ok && aligned && orthogonal, "max recursion error " + num(worst) + ", aligned " +
                                           (aligned ? "h - beta" : "WRONG") + ", orthogonal " +
                                           (orthogonal ? "h" : "WRONG")};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome reproducibility(const fs::path& root) {
  const fs::path a = root / "nav2d_a", b = root / "nav2d_b";
  if (!fs::exists(a / "manifest.json")) desk_pipeline(Family::Nav2D, a);
  // second run replays the first run's manifest
  ConfigOverrides flags;
  flags.out_dir = b.string();
  ExperimentConfig c = resolve_config(load_config_file((a / "manifest.json").string()), flags,
                                      [](const char*) -> const char* { return nullptr; });
  fs::remove_all(b);
  std::ostringstream log;
  cmd_gen_dataset(c, jobs(), log);
  cmd_train(c, jobs(), log);
  cmd_select(c, jobs(), log);
  cmd_evaluate(c, jobs(), log);
  cmd_baseline(c, "fixed", jobs(), log);
  int compared = 0;
  std::string differ;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    const auto ext = e.path().extension();
    if (ext != ".csv" && ext != ".txt") continue;
    const fs::path rel = fs::relative(e.path(), a);
    ++compared;
    if (!fs::exists(b / rel) || slurp(e.path()) != slurp(b / rel)) differ += " " + rel.string();
  }
  return {compared > 0 && differ.empty(),
          std::to_string(compared) + " CSV/model files compared" + (differ.empty() ? ", all byte-identical" : "; differ:" + differ)};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path root = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "metastep_acceptance";
  fs::create_directories(root);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"natural-gradient contract", natural_gradient_contract},
      {"NGA normalization", nga_normalization},
      {"ExtraTrees properties", extra_trees_properties},
      {"FQI oracle equivalence", fqi_oracle},
      {"clipped-target identities", clipped_identities},
      {"Lipschitz formulas and return bound", lipschitz},
      {"Nav2D desk headline", [&] { return nav2d_headline(root); }},
      {"Minigolf safety", [&] { return minigolf_safety(root); }},
      {"baseline recursions", baseline_recursions},
      {"reproducibility", [&] { return reproducibility(root); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << i + 1 << " (" << criteria[i].first
              << "): " << o.detail << " [" << num(secs) << " s]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
