#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "metastep/baselines.hpp"
#include "metastep/fqi.hpp"
#include "metastep/lipschitz.hpp"
#include "metastep/meta_mdp.hpp"

namespace metastep {

inline constexpr const char* kVersion = "0.1.0";

enum class DatasetMode { Trajectory, Generative };

inline std::string_view dataset_mode_name(DatasetMode m) {
  return m == DatasetMode::Trajectory ? "trajectory" : "generative";
}

inline DatasetMode parse_dataset_mode(std::string_view s) {
  if (s == "trajectory") return DatasetMode::Trajectory;
  if (s == "generative") return DatasetMode::Generative;
  throw InputError("dataset_mode: expected 'trajectory' or 'generative', got '" + std::string(s) + "'");
}

struct ExperimentConfig {
  std::string profile = "desk";
  Family family = Family::Nav2D;
  DatasetMode dataset_mode = DatasetMode::Trajectory;
  int K = 500;
  int T = 20;
  int n = 50;
  int H = 10;
  double gamma = 0.99;
  double gamma_meta = 1.0;
  double sigma = 1.001;
  double h_min = 0.0;
  double h_max = 8.0;
  int n_trees = 50;
  double min_split_fraction = 0.01;
  int k_features = 0;
  double lambda = 0.75;
  int fqi_iterations = 5;
  int action_grid_points = 101;
  int validation_tasks = 20;
  int test_tasks = 20;
  std::uint64_t seed = 42;
  bool include_context = true;
  std::string out_dir = "runs/nav2d";

  int cg_iters = 10;
  double cg_tol = 1e-10;
  double damping = 1e-3;
  bool pg_baseline = false;

  std::string baseline = "fixed";
  Vector alpha_grid;  // empty: {h_max/16, ..., h_max}
  double decay_rate = 0.9;
  double metagrad_beta = 0.001;
  double metagrad_mu = 0.0;
  bool metagrad_flip_sign = false;

  int lipschitz_pairs = 1000;
  int lipschitz_n = 20;
  double lipschitz_sigma = 0.0;

  /// Per-family defaults; `profile` is "desk" (minutes) or "paper" (full counts).
  static ExperimentConfig defaults(Family f, std::string_view profile = "desk") {
    if (profile != "desk" && profile != "paper")
      throw InputError("profile: expected 'desk' or 'paper', got '" + std::string(profile) + "'");
    const bool full = profile == "paper";
    const FamilyTraits t = family_traits(f);
    ExperimentConfig c;
    c.profile = std::string(profile);
    c.family = f;
    c.H = t.horizon;
    c.gamma = t.gamma;
    c.sigma = t.sigma;
    const StepInterval hs = default_step_interval(f);
    c.h_min = hs.lo;
    c.h_max = hs.hi;
    c.fqi_iterations = full ? 10 : 5;
    c.out_dir = "runs/" + std::string(family_name(f));
    switch (f) {
      case Family::Nav2D:
        c.dataset_mode = DatasetMode::Trajectory;
        c.K = full ? 4000 : 500;
        c.T = 20;
        c.n = full ? 200 : 50;
        c.n_trees = 50;
        c.min_split_fraction = 0.01;
        break;
      case Family::Minigolf:
        c.dataset_mode = DatasetMode::Generative;
        c.K = full ? 10000 : 2000;
        c.T = 50;
        c.n = full ? 400 : 100;
        c.n_trees = 50;
        c.min_split_fraction = 0.01;
        break;
      case Family::CartPole:
        c.dataset_mode = DatasetMode::Trajectory;
        c.K = full ? 3200 : 200;
        c.T = 15;
        c.n = full ? 100 : 50;
        c.n_trees = full ? 150 : 50;
        c.min_split_fraction = 0.05;
        break;
      case Family::SwingUp:
        c.dataset_mode = DatasetMode::Trajectory;
        c.K = full ? 300 : 60;
        c.T = 25;
        c.n = full ? 100 : 50;
        c.n_trees = full ? 150 : 50;
        c.min_split_fraction = 0.05;
        break;
    }
    return c;
  }

  void validate() const {
    auto positive = [](const char* name, long long v) {
      if (v < 1) throw InputError(std::string(name) + ": must be >= 1");
    };
    positive("K", K);
    positive("T", T);
    positive("n", n);
    positive("H", H);
    positive("n_trees", n_trees);
    positive("fqi_iterations", fqi_iterations);
    positive("validation_tasks", validation_tasks);
    positive("test_tasks", test_tasks);
    positive("action_grid_points", action_grid_points);
    positive("cg_iters", cg_iters);
    positive("lipschitz_pairs", lipschitz_pairs);
    positive("lipschitz_n", lipschitz_n);
    if (k_features < 0) throw InputError("k_features: must be >= 0");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw InputError("gamma: must lie in [0, 1]");
    if (!(gamma_meta >= 0.0 && gamma_meta <= 1.0)) throw InputError("gamma_meta: must lie in [0, 1]");
    if (!(sigma > 0.0)) throw InputError("sigma: must be > 0");
    if (!(h_min >= 0.0 && h_max > h_min)) throw InputError("h_min/h_max: need 0 <= h_min < h_max");
    if (!(min_split_fraction > 0.0 && min_split_fraction <= 1.0))
      throw InputError("min_split_fraction: must lie in (0, 1]");
    if (!(lambda > 0.5 && lambda <= 1.0)) throw InputError("lambda: must lie in (0.5, 1]");
    if (!(lipschitz_sigma >= 0.0)) throw InputError("lipschitz_sigma: must be >= 0");
    if (!(damping >= 0.0)) throw InputError("damping: must be >= 0");
    for (double a : alpha_grid)
      if (!(a >= 0.0)) throw InputError("alpha_grid: entries must be >= 0");
    parse_optimizer(baseline);
    if (out_dir.empty()) throw InputError("out_dir: must not be empty");
  }

  MetaMdpConfig meta() const {
    MetaMdpConfig m = MetaMdpConfig::defaults(family);
    m.steps = {h_min, h_max};
    m.horizon = H;
    m.gamma = gamma;
    m.sigma = sigma;
    m.batch_size = n;
    m.natural = {cg_iters, cg_tol, damping, pg_baseline};
    return m;
  }

  TreeParams trees() const {
    TreeParams p;
    p.n_trees = n_trees;
    p.min_split_fraction = min_split_fraction;
    p.k_features = k_features;
    return p;
  }

  Vector alphas() const { return alpha_grid.empty() ? default_alpha_grid(h_max) : alpha_grid; }
};

// ---------------------------------------------------------------------------
// Field table: string <-> member conversions for config files, env vars
// and the manifest snapshot.

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

inline std::string fmt_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
T parse_number(std::string_view key, std::string_view text) {
  const std::string s = trim(text);
  T v{};
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw InputError(std::string(key) + ": cannot parse '" + s + "' as a number");
  return v;
}

inline bool parse_bool(std::string_view key, std::string_view text) {
  const std::string s = trim(text);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw InputError(std::string(key) + ": expected a boolean, got '" + s + "'");
}

struct Field {
  std::string name;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class T>
Field field(std::string name, T ExperimentConfig::*m) {
  Field f;
  f.name = name;
  if constexpr (std::is_same_v<T, bool>) {
    f.set = [m, name](ExperimentConfig& c, std::string_view v) { c.*m = parse_bool(name, v); };
    f.get = [m](const ExperimentConfig& c) { return std::string(c.*m ? "true" : "false"); };
  } else if constexpr (std::is_same_v<T, double>) {
    f.set = [m, name](ExperimentConfig& c, std::string_view v) { c.*m = parse_number<double>(name, v); };
    f.get = [m](const ExperimentConfig& c) { return fmt_double(c.*m); };
  } else if constexpr (std::is_integral_v<T>) {
    f.set = [m, name](ExperimentConfig& c, std::string_view v) { c.*m = parse_number<T>(name, v); };
    f.get = [m](const ExperimentConfig& c) { return std::to_string(c.*m); };
  } else if constexpr (std::is_same_v<T, std::string>) {
    f.set = [m](ExperimentConfig& c, std::string_view v) { c.*m = trim(v); };
    f.get = [m](const ExperimentConfig& c) { return c.*m; };
  } else if constexpr (std::is_same_v<T, Vector>) {
    f.set = [m, name](ExperimentConfig& c, std::string_view v) {
      Vector out;
      std::stringstream ss{std::string(v)};
      std::string cell;
      while (std::getline(ss, cell, ','))
        if (!trim(cell).empty()) out.push_back(parse_number<double>(name, cell));
      c.*m = out;
    };
    f.get = [m](const ExperimentConfig& c) {
      std::string s;
      for (double x : c.*m) s += (s.empty() ? "" : ",") + fmt_double(x);
      return s;
    };
  }
  return f;
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> t;
    Field fam;
    fam.name = "family";
    fam.set = [](ExperimentConfig& c, std::string_view v) { c.family = parse_family(trim(v)); };
    fam.get = [](const ExperimentConfig& c) { return std::string(family_name(c.family)); };
    t.push_back(fam);
    Field mode;
    mode.name = "dataset_mode";
    mode.set = [](ExperimentConfig& c, std::string_view v) { c.dataset_mode = parse_dataset_mode(trim(v)); };
    mode.get = [](const ExperimentConfig& c) { return std::string(dataset_mode_name(c.dataset_mode)); };
    t.push_back(mode);
    t.push_back(field("profile", &ExperimentConfig::profile));
    t.push_back(field("K", &ExperimentConfig::K));
    t.push_back(field("T", &ExperimentConfig::T));
    t.push_back(field("n", &ExperimentConfig::n));
    t.push_back(field("H", &ExperimentConfig::H));
    t.push_back(field("gamma", &ExperimentConfig::gamma));
    t.push_back(field("gamma_meta", &ExperimentConfig::gamma_meta));
    t.push_back(field("sigma", &ExperimentConfig::sigma));
    t.push_back(field("h_min", &ExperimentConfig::h_min));
    t.push_back(field("h_max", &ExperimentConfig::h_max));
    t.push_back(field("n_trees", &ExperimentConfig::n_trees));
    t.push_back(field("min_split_fraction", &ExperimentConfig::min_split_fraction));
    t.push_back(field("k_features", &ExperimentConfig::k_features));
    t.push_back(field("lambda", &ExperimentConfig::lambda));
    t.push_back(field("fqi_iterations", &ExperimentConfig::fqi_iterations));
    t.push_back(field("action_grid_points", &ExperimentConfig::action_grid_points));
    t.push_back(field("validation_tasks", &ExperimentConfig::validation_tasks));
    t.push_back(field("test_tasks", &ExperimentConfig::test_tasks));
    t.push_back(field("seed", &ExperimentConfig::seed));
    t.push_back(field("include_context", &ExperimentConfig::include_context));
    t.push_back(field("out_dir", &ExperimentConfig::out_dir));
    t.push_back(field("cg_iters", &ExperimentConfig::cg_iters));
    t.push_back(field("cg_tol", &ExperimentConfig::cg_tol));
    t.push_back(field("damping", &ExperimentConfig::damping));
    t.push_back(field("pg_baseline", &ExperimentConfig::pg_baseline));
    t.push_back(field("baseline", &ExperimentConfig::baseline));
    t.push_back(field("alpha_grid", &ExperimentConfig::alpha_grid));
    t.push_back(field("decay_rate", &ExperimentConfig::decay_rate));
    t.push_back(field("metagrad_beta", &ExperimentConfig::metagrad_beta));
    t.push_back(field("metagrad_mu", &ExperimentConfig::metagrad_mu));
    t.push_back(field("metagrad_flip_sign", &ExperimentConfig::metagrad_flip_sign));
    t.push_back(field("lipschitz_pairs", &ExperimentConfig::lipschitz_pairs));
    t.push_back(field("lipschitz_n", &ExperimentConfig::lipschitz_n));
    t.push_back(field("lipschitz_sigma", &ExperimentConfig::lipschitz_sigma));
    return t;
  }();
  return table;
}

inline const Field& find_field(std::string_view key) {
  for (const auto& f : fields())
    if (f.name == key) return f;
  throw InputError("unknown config field '" + std::string(key) + "'");
}

inline std::string env_name(std::string_view key) {
  std::string s = "METASTEP_";
  for (char ch : key) s += static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return s;
}

}  // namespace detail

using ConfigMap = std::vector<std::pair<std::string, std::string>>;

/// `key = value` lines; '#' starts a comment; lists are comma separated.
inline ConfigMap parse_config_text(std::istream& is) {
  ConfigMap kv;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw InputError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    detail::find_field(key);
    kv.emplace_back(key, detail::trim(std::string_view(t).substr(eq + 1)));
  }
  return kv;
}

/// A manifest's config snapshot as a ConfigMap.
inline ConfigMap config_from_manifest(std::istream& is) {
  const nlohmann::json j = nlohmann::json::parse(is);
  if (!j.contains("config") || !j["config"].is_object()) throw InputError("manifest: missing 'config' object");
  ConfigMap kv;
  for (const auto& [k, v] : j["config"].items()) {
    detail::find_field(k);
    kv.emplace_back(k, v.get<std::string>());
  }
  return kv;
}

inline ConfigMap load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config file '" + path + "'");
  if (path.size() >= 5 && path.substr(path.size() - 5) == ".json") return config_from_manifest(in);
  return parse_config_text(in);
}

inline std::map<std::string, std::string> config_snapshot(const ExperimentConfig& c) {
  std::map<std::string, std::string> m;
  for (const auto& f : detail::fields()) m[f.name] = f.get(c);
  return m;
}

struct ConfigOverrides {
  std::optional<std::string> profile;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
};

/// Precedence: family/profile defaults < file < METASTEP_* environment < flags.
inline ExperimentConfig resolve_config(const ConfigMap& file, const ConfigOverrides& flags = {},
                                       const std::function<const char*(const char*)>& getenv_fn = std::getenv) {
  auto lookup = [&](const std::string& key) -> std::optional<std::string> {
    if (const char* v = getenv_fn(detail::env_name(key).c_str())) return std::string(v);
    std::optional<std::string> found;
    for (const auto& [k, v] : file)
      if (k == key) found = v;
    return found;
  };
  const Family family = parse_family(lookup("family").value_or("nav2d"));
  std::string profile = flags.profile.value_or(lookup("profile").value_or("desk"));
  ExperimentConfig c = ExperimentConfig::defaults(family, profile);
  for (const auto& [k, v] : file)
    if (k != "profile") detail::find_field(k).set(c, v);
  for (const auto& f : detail::fields())
    if (f.name != "profile")
      if (const char* v = getenv_fn(detail::env_name(f.name).c_str())) f.set(c, v);
  c.profile = profile;
  if (flags.seed) c.seed = *flags.seed;
  if (flags.out_dir) c.out_dir = *flags.out_dir;
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Stage seeds, hashing, manifest

struct StageStreams {
  RngStream dataset;
  RngStream validation;
  RngStream test;
  RngStream single_action;
  std::uint64_t train_seed;
};

inline StageStreams stage_streams(std::uint64_t seed) {
  const RngStream root(seed, 0);
  return {root.derive(Purpose::Trajectory), root.derive(Purpose::Validation), root.derive(Purpose::Test),
          root.derive(Purpose::Trajectory, 1), root.derive(Purpose::Forest).next_u64()};
}

inline std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read '" + path.string() + "' for hashing");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// manifest.json in the output directory.
class RunManifest {
 public:
  explicit RunManifest(std::filesystem::path dir) : dir_(std::move(dir)) {
    if (std::filesystem::exists(path())) {
      std::ifstream in(path());
      json_ = nlohmann::json::parse(in);
    }
  }

  std::filesystem::path path() const { return dir_ / "manifest.json"; }
  bool exists() const { return !json_.is_null(); }
  nlohmann::json& json() { return json_; }
  const nlohmann::json& json() const { return json_; }

  void set_config(const ExperimentConfig& c) {
    json_["version"] = kVersion;
    json_["config"] = config_snapshot(c);
    const StageStreams s = stage_streams(c.seed);
    auto stream = [](const RngStream& r) { return nlohmann::json{{"seed", r.seed()}, {"stream_id", r.stream_id()}}; };
    json_["seeds"] = {{"master", c.seed},
                      {"dataset", stream(s.dataset)},
                      {"validation", stream(s.validation)},
                      {"test", stream(s.test)},
                      {"single_action", stream(s.single_action)},
                      {"train", s.train_seed}};
  }

  void stamp(const std::string& stage) { json_["timestamps"][stage] = utc_timestamp(); }

  void add_file(const std::string& name) {
    auto& files = json_["files"];
    if (!files.is_array()) files = nlohmann::json::array();
    if (std::find(files.begin(), files.end(), name) == files.end()) files.push_back(name);
    std::vector<std::string> sorted = files.get<std::vector<std::string>>();
    std::sort(sorted.begin(), sorted.end());
    files = sorted;
  }

  void save() const {
    std::ofstream out(path());
    if (!out) throw InputError("cannot write '" + path().string() + "'");
    out << json_.dump(2) << '\n';
  }

 private:
  std::filesystem::path dir_;
  nlohmann::json json_;
};

/// Config fields that determine the dataset; later stages refuse to run if
/// they differ from the manifest snapshot.
inline void check_dataset_config(const RunManifest& m, const ExperimentConfig& c) {
  if (!m.exists()) throw InputError("no manifest.json in output directory; run gen-dataset first");
  const auto snap = config_snapshot(c);
  for (const char* key : {"family", "dataset_mode", "K", "T", "n", "H", "gamma", "sigma", "h_min", "h_max", "seed",
                          "cg_iters", "cg_tol", "damping", "pg_baseline"}) {
    const std::string stored = m.json()["config"].value(key, std::string{});
    if (stored != snap.at(key))
      throw InputError(std::string("config field '") + key + "' is " + snap.at(key) + " but the dataset was generated with " +
                       stored);
  }
}

// ---------------------------------------------------------------------------
// CSV helpers

inline constexpr const char* kManifestLine = "manifest: manifest.json";

struct Interval {
  double lo;
  double hi;
};

/// Student-t 95% interval with m - 1 degrees of freedom; degenerate for m < 2.
inline Interval student_t_interval(double mean, double std_error, std::size_t m) {
  if (m < 2) return {mean, mean};
  const boost::math::students_t dist(static_cast<double>(m - 1));
  const double q = boost::math::quantile(dist, 0.975);
  return {mean - q * std_error, mean + q * std_error};
}

inline std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out.precision(17);
  out << "# " << kManifestLine << '\n';
  return out;
}

inline void write_long_header(std::ostream& os) { os << "run,step,metric,value\n"; }

inline void write_curve_rows(std::ostream& os, const std::string& run, const CurveSummary& s) {
  const std::size_t m = s.per_task.size();
  for (std::size_t t = 0; t < s.mean_return.size(); ++t) {
    const Interval ci = student_t_interval(s.mean_return[t], s.std_error[t], m);
    os << run << ',' << t << ",mean_return," << s.mean_return[t] << '\n';
    os << run << ',' << t << ",stderr," << s.std_error[t] << '\n';
    os << run << ',' << t << ",ci95_low," << ci.lo << '\n';
    os << run << ',' << t << ",ci95_high," << ci.hi << '\n';
    os << run << ',' << t << ",failures," << s.failures[t] << '\n';
  }
  for (std::size_t t = 0; t < s.mean_h.size(); ++t) os << run << ',' << t << ",mean_h," << s.mean_h[t] << '\n';
}

/// One line per task: the (omega, theta_0, rollout stream) triple, so paired
/// runs can be checked for identical inputs.
inline void write_tasks_csv(const std::filesystem::path& path, const std::vector<LearningTask>& tasks) {
  std::ofstream out = open_csv(path);
  out << "task_id,rollout_seed,rollout_stream";
  if (!tasks.empty()) {
    for (std::size_t i = 0; i < tasks[0].context.size(); ++i) out << ",omega_" << i;
    for (std::size_t i = 0; i < tasks[0].theta0.size(); ++i) out << ",theta0_" << i;
  }
  out << '\n';
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    out << k << ',' << tasks[k].stream.seed() << ',' << tasks[k].stream.stream_id();
    for (double v : tasks[k].context) out << ',' << v;
    for (double v : tasks[k].theta0.theta) out << ',' << v;
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Stages

namespace detail {

inline std::filesystem::path ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir))
    throw InputError("cannot create output directory '" + dir + "'" + (ec ? ": " + ec.message() : ""));
  const auto probe = std::filesystem::path(dir) / ".write_probe";
  {
    std::ofstream p(probe);
    if (!p) throw InputError("output directory '" + dir + "' is not writable");
  }
  std::filesystem::remove(probe, ec);
  return dir;
}

inline std::string model_name(int iteration) {
  std::ostringstream s;
  s << "models/q_iter_" << std::setw(3) << std::setfill('0') << iteration << ".txt";
  return s.str();
}

inline std::vector<LearningTask> test_tasks(const ExperimentConfig& c, const MetaMdpConfig& meta) {
  return sample_tasks(meta, c.test_tasks, stage_streams(c.seed).test);
}

inline std::vector<LearningTask> validation_tasks(const ExperimentConfig& c, const MetaMdpConfig& meta) {
  return sample_tasks(meta, c.validation_tasks, stage_streams(c.seed).validation);
}

inline std::vector<MetaTransition> generate(const ExperimentConfig& c, const MetaMdpConfig& meta, int jobs) {
  const RngStream s = stage_streams(c.seed).dataset;
  return c.dataset_mode == DatasetMode::Trajectory ? generate_dataset_trajectory(meta, c.K, c.T, s, jobs)
                                                   : generate_dataset_generative(meta, c.K, s, jobs);
}

inline FqiOptions fqi_options(const ExperimentConfig& c, int jobs) {
  FqiOptions o;
  o.iterations = c.fqi_iterations;
  o.gamma_meta = c.gamma_meta;
  o.lambda = c.lambda;
  o.trees = c.trees();
  o.action_grid = make_action_grid(c.h_min, c.h_max, c.action_grid_points);
  o.seed = stage_streams(c.seed).train_seed;
  o.jobs = jobs;
  return o;
}

inline std::vector<MetaTransition> load_verified_dataset(const std::filesystem::path& dir, const RunManifest& m) {
  const auto file = dir / "dataset.csv";
  const std::string expected = m.json()["dataset"].value("sha256", std::string{});
  const std::string actual = sha256_file(file);
  if (expected.empty() || actual != expected)
    throw InputError("dataset.csv hash " + actual + " does not match manifest (" + expected +
                     "); regenerate the dataset or restore the original file");
  std::ifstream in(file);
  return read_dataset_csv(in);
}

inline std::vector<QPair> load_models(const std::filesystem::path& dir, const RunManifest& m) {
  const int count = m.json().value("models", 0);
  if (count < 1) throw InputError("no trained models recorded in manifest; run train first");
  std::vector<QPair> models;
  for (int i = 1; i <= count; ++i) {
    std::ifstream in(dir / model_name(i));
    if (!in) throw InputError("missing model file " + model_name(i));
    models.push_back(QPair::read(in));
  }
  return models;
}

inline void write_models(const std::filesystem::path& dir, const FqiRun& run, const std::string& prefix = "") {
  std::filesystem::create_directories(dir / std::filesystem::path(prefix + model_name(1)).parent_path());
  for (const QPair& q : run.models) {
    std::ofstream out(dir / (prefix + model_name(q.iteration)));
    if (!out) throw InputError("cannot write model file");
    q.write(out);
  }
}

inline void write_train_log(const std::filesystem::path& path, const FqiRun& run) {
  std::ofstream out = open_csv(path);
  out << "iteration,target_mean,target_min,target_max,train_mse\n";
  for (const auto& l : run.log)
    out << l.iteration << ',' << l.target_mean << ',' << l.target_min << ',' << l.target_max << ',' << l.train_mse
        << '\n';
}

inline void write_selection(const std::filesystem::path& path, const Selection& sel) {
  std::ofstream out = open_csv(path);
  out << "iteration,val_final_mean,val_final_stderr,selected\n";
  for (std::size_t i = 0; i < sel.final_means.size(); ++i)
    out << i + 1 << ',' << sel.final_means[i] << ',' << sel.final_std_errors[i] << ','
        << (static_cast<int>(i) + 1 == sel.best_iteration ? 1 : 0) << '\n';
}

}  // namespace detail

struct GenResult {
  std::size_t rows = 0;
  std::string sha256;
};

inline GenResult cmd_gen_dataset(const ExperimentConfig& c, int jobs = 1, std::ostream& log = std::cerr) {
  const auto dir = detail::ensure_dir(c.out_dir);
  const MetaMdpConfig meta = c.meta();
  const auto rows = detail::generate(c, meta, jobs);
  {
    std::ofstream out(dir / "dataset.csv");
    if (!out) throw InputError("cannot write dataset.csv");
    write_dataset_csv(out, rows, kManifestLine);
  }
  RunManifest m(dir);
  m.json() = nlohmann::json::object();
  m.set_config(c);
  GenResult r{rows.size(), sha256_file(dir / "dataset.csv")};
  m.json()["dataset"] = {{"file", "dataset.csv"}, {"sha256", r.sha256}, {"rows", r.rows}};
  m.add_file("dataset.csv");
  m.stamp("gen-dataset");
  m.save();
  log << "gen-dataset: " << r.rows << " rows -> " << (dir / "dataset.csv").string() << '\n';
  return r;
}

inline FqiRun cmd_train(const ExperimentConfig& c, int jobs = 1, std::ostream& log = std::cerr) {
  const auto dir = detail::ensure_dir(c.out_dir);
  RunManifest m(dir);
  check_dataset_config(m, c);
  const auto rows = detail::load_verified_dataset(dir, m);
  const auto data = fqi_samples(rows, c.include_context);
  FqiRun run = fqi_train(data, detail::fqi_options(c, jobs));
  detail::write_models(dir, run);
  detail::write_train_log(dir / "train_log.csv", run);
  m.json()["config"] = config_snapshot(c);
  m.json()["models"] = run.models.size();
  for (const auto& q : run.models) m.add_file(detail::model_name(q.iteration));
  m.add_file("train_log.csv");
  m.stamp("train");
  m.save();
  if (!run.aborted.empty()) log << "train: stopped early (" << run.aborted << ")\n";
  log << "train: " << run.models.size() << " iterations\n";
  if (run.models.empty()) throw NumericalError("train: no model could be fitted: " + run.aborted);
  return run;
}

inline Selection cmd_select(const ExperimentConfig& c, int jobs = 1, std::ostream& log = std::cerr) {
  const auto dir = detail::ensure_dir(c.out_dir);
  RunManifest m(dir);
  check_dataset_config(m, c);
  FqiRun run;
  run.models = detail::load_models(dir, m);
  const MetaMdpConfig meta = c.meta();
  const Selection sel =
      select_model(run, meta, detail::validation_tasks(c, meta), c.T, c.include_context, jobs);
  detail::write_selection(dir / "selection.csv", sel);
  m.json()["selected_iteration"] = sel.best_iteration;
  m.add_file("selection.csv");
  m.stamp("select");
  m.save();
  log << "select: iteration " << sel.best_iteration << '\n';
  return sel;
}

inline CurveSummary cmd_evaluate(const ExperimentConfig& c, int jobs = 1, std::ostream& log = std::cerr) {
  const auto dir = detail::ensure_dir(c.out_dir);
  RunManifest m(dir);
  check_dataset_config(m, c);
  const auto models = detail::load_models(dir, m);
  const int best = m.json().value("selected_iteration", 0);
  if (best < 1 || best > static_cast<int>(models.size())) throw InputError("no selected iteration; run select first");
  const MetaMdpConfig meta = c.meta();
  const auto tasks = detail::test_tasks(c, meta);
  const CurveSummary s = evaluate_policy(models[static_cast<std::size_t>(best - 1)], meta, tasks, c.T,
                                         c.include_context, jobs);
  {
    std::ofstream out = open_csv(dir / "evaluation.csv");
    write_long_header(out);
    write_curve_rows(out, "fqi_N" + std::to_string(best), s);
  }
  write_tasks_csv(dir / "tasks_evaluation.csv", tasks);
  m.add_file("evaluation.csv");
  m.add_file("tasks_evaluation.csv");
  m.stamp("evaluate");
  m.save();
  log << "evaluate: final mean return " << s.mean_return.back() << " +- " << s.std_error.back() << '\n';
  return s;
}

inline BaselineSpec baseline_spec(const ExperimentConfig& c, std::string_view kind) {
  BaselineSpec b;
  b.kind = parse_optimizer(kind);
  b.decay_rate = c.decay_rate;
  b.beta = c.metagrad_beta;
  b.mu = c.metagrad_mu;
  b.flip_sign = c.metagrad_flip_sign;
  return b;
}

inline std::string alpha_label(double a) { return detail::fmt_double(a); }

/// Grid search over alpha for one baseline family, on the test tasks.
inline GridResult cmd_baseline(const ExperimentConfig& c, const std::string& kind, int jobs = 1,
                               std::ostream& log = std::cerr) {
  const auto dir = detail::ensure_dir(c.out_dir);
  RunManifest m(dir);
  if (!m.exists()) m.set_config(c);
  const MetaMdpConfig meta = c.meta();
  const auto tasks = detail::test_tasks(c, meta);
  const GridResult g = grid_search(meta, tasks, c.T, baseline_spec(c, kind), c.alphas(), jobs);
  for (std::size_t i = 0; i < g.alphas.size(); ++i) {
    const std::string name = "baseline_" + kind + "_" + alpha_label(g.alphas[i]) + ".csv";
    std::ofstream out = open_csv(dir / name);
    write_long_header(out);
    write_curve_rows(out, kind + "_a" + alpha_label(g.alphas[i]), g.curves[i]);
    m.add_file(name);
  }
  {
    std::ofstream out = open_csv(dir / ("baseline_" + kind + "_summary.csv"));
    out << "alpha,final_mean,final_stderr,mid_mean,failures_per_step,best\n";
    for (std::size_t i = 0; i < g.alphas.size(); ++i) {
      const CurveSummary& s = g.curves[i];
      double fails = 0.0;
      for (double f : s.failures) fails += f;
      out << g.alphas[i] << ',' << s.mean_return.back() << ',' << s.std_error.back() << ','
          << s.mean_return[s.mean_return.size() / 2] << ',' << fails / static_cast<double>(s.failures.size()) << ','
          << (i == g.best ? 1 : 0) << '\n';
    }
  }
  write_tasks_csv(dir / ("tasks_baseline_" + kind + ".csv"), tasks);
  m.add_file("baseline_" + kind + "_summary.csv");
  m.add_file("tasks_baseline_" + kind + ".csv");
  m.stamp("baseline-" + kind);
  m.save();
  log << "baseline " << kind << ": best alpha " << g.alphas[g.best] << " final "
      << g.curves[g.best].mean_return.back() << '\n';
  return g;
}

struct AblationResult {
  std::string base_name;
  CurveSummary base;
  std::string ablated_name;
  CurveSummary ablated;
  std::size_t feature_dim_base = 0;
  std::size_t feature_dim_ablated = 0;
  Vector chosen_h;  // single-action: one h per test task
};

inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names{"no-context", "single-q", "fixed-context", "single-action"};
  return names;
}

namespace detail {

/// Trains on `rows`, selects on validation and evaluates on test tasks.
inline CurveSummary train_select_evaluate(const ExperimentConfig& c, const MetaMdpConfig& meta,
                                          const std::vector<MetaTransition>& rows, bool include_context,
                                          bool single_q, int jobs, std::size_t* feature_dim) {
  const auto data = fqi_samples(rows, include_context);
  if (feature_dim) *feature_dim = data.front().x.size();
  FqiOptions o = fqi_options(c, jobs);
  o.single_q = single_q;
  const FqiRun run = fqi_train(data, o);
  if (run.models.empty()) throw NumericalError("ablation: no model could be fitted: " + run.aborted);
  const Selection sel = select_model(run, meta, validation_tasks(c, meta), c.T, include_context, jobs);
  return evaluate_policy(run.models[static_cast<std::size_t>(sel.best_iteration - 1)], meta, test_tasks(c, meta),
                         c.T, include_context, jobs);
}

/// Regress final return on (omega, h) from K constant-step learning runs,
/// then pick h per test context by grid argmax.
inline AblationResult single_action(const ExperimentConfig& c, const MetaMdpConfig& meta, int jobs) {
  const RngStream stream = stage_streams(c.seed).single_action;
  const auto runs = sample_tasks(meta, c.K, stream);
  Vector hs(runs.size()), finals(runs.size());
  for (std::size_t k = 0; k < runs.size(); ++k) {
    RngStream h_rng = stream.derive(Purpose::StepSize, k);
    hs[k] = h_rng.uniform(c.h_min, c.h_max);
  }
  parallel_for(runs.size(), jobs, [&](std::size_t k) {
    const double h = hs[k];
    const auto curve = run_learning(meta, runs[k], c.T, nga_controller([h](int, const MetaState&, const BatchEstimate&) {
                                      return h;
                                    }));
    finals[k] = curve.returns.back();
  });
  const std::size_t dc = meta.contexts.dim();
  Matrix X(runs.size(), dc + 1);
  for (std::size_t k = 0; k < runs.size(); ++k) {
    auto row = X.row(k);
    std::copy(runs[k].context.begin(), runs[k].context.end(), row.begin());
    row.back() = hs[k];
  }
  TreeParams p = c.trees();
  p.seed = stage_streams(c.seed).train_seed;
  const Forest f = fit_forest(X, finals, p, jobs);
  const Vector grid = make_action_grid(c.h_min, c.h_max, c.action_grid_points);

  const auto tasks = test_tasks(c, meta);
  AblationResult r;
  r.chosen_h.resize(tasks.size());
  std::vector<LearningCurve> curves(tasks.size());
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    Vector x(tasks[i].context.begin(), tasks[i].context.end());
    x.push_back(0.0);
    double best = -std::numeric_limits<double>::infinity();
    for (double h : grid) {
      x.back() = h;
      const double v = f.predict(x);
      if (v > best) {
        best = v;
        r.chosen_h[i] = h;
      }
    }
  }
  parallel_for(tasks.size(), jobs, [&](std::size_t i) {
    const double h = r.chosen_h[i];
    curves[i] = run_learning(meta, tasks[i], c.T, nga_controller([h](int, const MetaState&, const BatchEstimate&) {
                               return h;
                             }));
  });
  r.ablated = summarize_curves(std::move(curves));
  r.feature_dim_ablated = dc + 1;
  return r;
}

}  // namespace detail

inline AblationResult cmd_ablate(const ExperimentConfig& c, const std::string& name, int jobs = 1,
                                 std::ostream& log = std::cerr) {
  const auto& names = ablation_names();
  if (std::find(names.begin(), names.end(), name) == names.end())
    throw InputError("unknown ablation '" + name + "' (expected no-context, single-q, fixed-context, single-action)");
  const auto dir = detail::ensure_dir(c.out_dir);
  RunManifest m(dir);
  check_dataset_config(m, c);
  MetaMdpConfig meta = c.meta();

  AblationResult r;
  if (name == "fixed-context") {
    // base: best fixed step under the fixed context; ablated: FQI trained there
    meta.fixed_context = meta.contexts.center();
    const auto rows = detail::generate(c, meta, jobs);
    r.ablated = detail::train_select_evaluate(c, meta, rows, c.include_context, false, jobs, &r.feature_dim_ablated);
    const GridResult g = grid_search(meta, detail::test_tasks(c, meta), c.T, baseline_spec(c, "fixed"), c.alphas(), jobs);
    r.base = g.curves[g.best];
    r.base_name = "fixed_a" + alpha_label(g.alphas[g.best]);
    r.ablated_name = "fqi_fixed_context";
  } else {
    const auto models = detail::load_models(dir, m);
    const int best = m.json().value("selected_iteration", 0);
    if (best < 1 || best > static_cast<int>(models.size())) throw InputError("no selected iteration; run select first");
    const QPair& base_q = models[static_cast<std::size_t>(best - 1)];
    r.base = evaluate_policy(base_q, meta, detail::test_tasks(c, meta), c.T, c.include_context, jobs);
    r.base_name = "fqi_N" + std::to_string(best);
    r.feature_dim_base = base_q.state_dim();
    if (name == "single-action") {
      AblationResult s = detail::single_action(c, meta, jobs);
      r.ablated = std::move(s.ablated);
      r.chosen_h = std::move(s.chosen_h);
      r.feature_dim_ablated = s.feature_dim_ablated;
    } else {
      const auto rows = detail::load_verified_dataset(dir, m);
      const bool no_ctx = name == "no-context";
      r.ablated = detail::train_select_evaluate(c, meta, rows, no_ctx ? false : c.include_context, !no_ctx, jobs,
                                                &r.feature_dim_ablated);
    }
    r.ablated_name = name;
  }

  const std::string file = "ablation_" + name + ".csv";
  {
    std::ofstream out = open_csv(dir / file);
    write_long_header(out);
    write_curve_rows(out, r.base_name, r.base);
    write_curve_rows(out, r.ablated_name, r.ablated);
    for (std::size_t i = 0; i < r.chosen_h.size(); ++i)
      out << r.ablated_name << ',' << i << ",task_h," << r.chosen_h[i] << '\n';
  }
  m.add_file(file);
  m.stamp("ablate-" + name);
  m.save();
  log << "ablate " << name << ": " << r.base_name << " final " << r.base.mean_return.back() << ", " << r.ablated_name
      << " final " << r.ablated.mean_return.back() << '\n';
  return r;
}

inline BoundReport cmd_lipschitz_check(const ExperimentConfig& c, int jobs = 1, std::ostream& log = std::cerr) {
  if (c.family != Family::Nav2D) throw InputError("lipschitz-check: analytic constants are only known for nav2d");
  const auto dir = detail::ensure_dir(c.out_dir);
  RunManifest m(dir);
  if (!m.exists()) m.set_config(c);
  const RngStream root(c.seed, 0);
  RngStream pol = root.derive(Purpose::InitialPolicy);
  PolicyParams policy = initial_policy(Family::Nav2D, c.lipschitz_sigma, pol);
  const int n = c.lipschitz_sigma == 0.0 ? 1 : c.lipschitz_n;
  const double gamma = std::min(c.gamma, 1.0 - 1e-12);
  const BoundReport rep = verify_return_bound(policy, c.lipschitz_pairs, n, root.derive(Purpose::Pair), gamma, jobs);
  {
    std::ofstream out = open_csv(dir / "lipschitz.csv");
    out.precision(17);
    write_bound_csv(out, rep);
  }
  m.add_file("lipschitz.csv");
  m.stamp("lipschitz-check");
  m.save();
  log << "lipschitz-check: L = " << rep.lipschitz << ", " << rep.violations << " / " << rep.rows.size()
      << " violations\n";
  return rep;
}

}  // namespace metastep
