#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metastep/errors.hpp"
#include "metastep/parallel.hpp"
#include "metastep/rng.hpp"

namespace metastep {

/// Dense row-major matrix of training inputs.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  static Matrix from_rows(const std::vector<std::vector<double>>& rows_in) {
    Matrix m(rows_in.size(), rows_in.empty() ? 0 : rows_in.front().size());
    for (std::size_t i = 0; i < m.rows; ++i) {
      if (rows_in[i].size() != m.cols) throw InputError("Matrix::from_rows: ragged rows");
      std::copy(rows_in[i].begin(), rows_in[i].end(), m.data.begin() + static_cast<std::ptrdiff_t>(i * m.cols));
    }
    return m;
  }

  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
};

struct TreeParams {
  int n_trees = 50;
  double min_split_fraction = 0.01;  // rows needed to split, as a fraction of the training set
  int k_features = 0;                // candidate features per node; 0 means all
  std::uint64_t seed = 0;

  void validate() const {
    if (n_trees < 1) throw InputError("TreeParams: n_trees must be >= 1");
    if (!(min_split_fraction > 0.0 && min_split_fraction <= 1.0))
      throw InputError("TreeParams: min_split_fraction must lie in (0, 1]");
    if (k_features < 0) throw InputError("TreeParams: k_features must be >= 0 (0 = all)");
  }
};

namespace detail {

/// Mean that is exact for constant inputs and never leaves [min, max].
template <class Range>
double bounded_mean(const Range& values) {
  double mean = 0.0, lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::size_t k = 0;
  for (double v : values) {
    ++k;
    mean += (v - mean) / static_cast<double>(k);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return k == 0 ? 0.0 : std::clamp(mean, lo, hi);
}

}  // namespace detail

struct TreeNode {
  std::int32_t feature = -1;  // -1 marks a leaf
  double threshold = 0.0;     // rows with x[feature] <= threshold go left
  std::int32_t left = -1;
  std::int32_t right = -1;
  double value = 0.0;         // mean target of the node's training rows

  bool is_leaf() const { return feature < 0; }
};

struct Tree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  double predict(std::span<const double> x) const {
    std::int32_t i = 0;
    while (!nodes[static_cast<std::size_t>(i)].is_leaf()) {
      const TreeNode& n = nodes[static_cast<std::size_t>(i)];
      i = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
    }
    return nodes[static_cast<std::size_t>(i)].value;
  }
};

/// Candidate scores evaluated at one internal node, in draw order.
struct NodeAudit {
  std::vector<double> candidate_scores;
  std::size_t chosen = 0;
};

struct FitAudit {
  std::vector<std::vector<NodeAudit>> trees;
};

class Forest {
 public:
  std::vector<Tree> trees;
  std::size_t feature_dim = 0;
  std::size_t train_size = 0;

  double predict(std::span<const double> x) const {
    if (x.size() != feature_dim)
      throw InputError("Forest::predict: input has " + std::to_string(x.size()) + " features, expected " +
                       std::to_string(feature_dim));
    return predict_unchecked(x);
  }

  double predict_unchecked(std::span<const double> x) const {
    double mean = 0.0, lo = std::numeric_limits<double>::infinity(), hi = -lo;
    std::size_t k = 0;
    for (const Tree& t : trees) {
      const double v = t.predict(x);
      ++k;
      mean += (v - mean) / static_cast<double>(k);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    return std::clamp(mean, lo, hi);
  }

  std::vector<double> predict_batch(const Matrix& X) const {
    if (X.rows > 0 && X.cols != feature_dim)
      throw InputError("Forest::predict_batch: input has " + std::to_string(X.cols) + " features, expected " +
                       std::to_string(feature_dim));
    std::vector<double> out(X.rows);
    for (std::size_t i = 0; i < X.rows; ++i) out[i] = predict_unchecked(X.row(i));
    return out;
  }

  void write(std::ostream& os) const {
    const auto old_precision = os.precision(17);
    os << "metastep-forest v1\n";
    os << feature_dim << ' ' << train_size << ' ' << trees.size() << '\n';
    for (const Tree& t : trees) {
      os << t.nodes.size() << '\n';
      for (const TreeNode& n : t.nodes)
        os << n.feature << ' ' << n.threshold << ' ' << n.left << ' ' << n.right << ' ' << n.value << '\n';
    }
    os.precision(old_precision);
  }

  static Forest read(std::istream& is) {
    std::string magic, version;
    is >> magic >> version;
    if (magic != "metastep-forest" || version != "v1") throw InputError("Forest::read: unrecognised header");
    Forest f;
    std::size_t n_trees = 0;
    is >> f.feature_dim >> f.train_size >> n_trees;
    f.trees.resize(n_trees);
    for (Tree& t : f.trees) {
      std::size_t n_nodes = 0;
      is >> n_nodes;
      t.nodes.resize(n_nodes);
      for (TreeNode& n : t.nodes) is >> n.feature >> n.threshold >> n.left >> n.right >> n.value;
    }
    if (!is) throw InputError("Forest::read: truncated forest");
    return f;
  }
};

namespace detail {

class TreeBuilder {
 public:
  TreeBuilder(const Matrix& X, std::span<const double> y, std::size_t min_split, std::size_t k_features,
              RngStream rng, std::vector<NodeAudit>* audit)
      : X_(X), y_(y), min_split_(min_split), k_(k_features), rng_(std::move(rng)), audit_(audit) {}

  Tree build() {
    std::vector<std::size_t> idx(X_.rows);
    std::iota(idx.begin(), idx.end(), 0);
    Tree tree;
    struct Pending {
      std::size_t begin, end;
      std::int32_t node;
    };
    tree.nodes.emplace_back();
    std::vector<Pending> stack{{0, idx.size(), 0}};
    std::vector<std::size_t> features(X_.cols);

    while (!stack.empty()) {
      const Pending job = stack.back();
      stack.pop_back();
      const std::span<const std::size_t> rows(idx.data() + job.begin, job.end - job.begin);
      TreeNode& node = tree.nodes[static_cast<std::size_t>(job.node)];
      node.value = node_mean(rows);

      const std::size_t m = rows.size();
      if (m < min_split_ || all_targets_equal(rows)) continue;

      double sum = 0.0;
      for (std::size_t r : rows) sum += y_[r];
      const double parent_term = sum * sum / static_cast<double>(m);

      std::iota(features.begin(), features.end(), 0);
      NodeAudit record;
      std::int32_t best_feature = -1;
      double best_threshold = 0.0, best_score = -std::numeric_limits<double>::infinity();
      std::size_t drawn = 0;
      // Partial Fisher-Yates: visit features in random order and keep the
      // first k that are not constant at this node.
      for (std::size_t j = 0; j < features.size() && drawn < k_; ++j) {
        const std::size_t pick = j + static_cast<std::size_t>(rng_.below(features.size() - j));
        std::swap(features[j], features[pick]);
        const std::size_t f = features[j];
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (std::size_t r : rows) {
          lo = std::min(lo, X_(r, f));
          hi = std::max(hi, X_(r, f));
        }
        if (!(hi > lo)) continue;
        double threshold = rng_.uniform(lo, hi);
        if (threshold >= hi) threshold = lo;
        ++drawn;

        double left_sum = 0.0;
        std::size_t left_n = 0;
        for (std::size_t r : rows)
          if (X_(r, f) <= threshold) {
            left_sum += y_[r];
            ++left_n;
          }
        const double right_sum = sum - left_sum;
        const std::size_t right_n = m - left_n;
        const double score = left_sum * left_sum / static_cast<double>(left_n) +
                             right_sum * right_sum / static_cast<double>(right_n) - parent_term;
        record.candidate_scores.push_back(score);
        if (score > best_score) {
          best_score = score;
          best_feature = static_cast<std::int32_t>(f);
          best_threshold = threshold;
          record.chosen = record.candidate_scores.size() - 1;
        }
      }
      if (best_feature < 0) continue;  // every feature constant: leaf
      if (audit_) audit_->push_back(std::move(record));

      const auto mid = std::partition(idx.begin() + static_cast<std::ptrdiff_t>(job.begin),
                                      idx.begin() + static_cast<std::ptrdiff_t>(job.end), [&](std::size_t r) {
                                        return X_(r, static_cast<std::size_t>(best_feature)) <= best_threshold;
                                      });
      const std::size_t split = static_cast<std::size_t>(mid - idx.begin());
      const auto left_id = static_cast<std::int32_t>(tree.nodes.size());
      tree.nodes.emplace_back();
      tree.nodes.emplace_back();
      TreeNode& parent = tree.nodes[static_cast<std::size_t>(job.node)];
      parent.feature = best_feature;
      parent.threshold = best_threshold;
      parent.left = left_id;
      parent.right = left_id + 1;
      stack.push_back({split, job.end, left_id + 1});
      stack.push_back({job.begin, split, left_id});
    }
    return tree;
  }

 private:
  double node_mean(std::span<const std::size_t> rows) const {
    std::vector<double> v;
    v.reserve(rows.size());
    for (std::size_t r : rows) v.push_back(y_[r]);
    return bounded_mean(v);
  }

  bool all_targets_equal(std::span<const std::size_t> rows) const {
    for (std::size_t r : rows)
      if (y_[r] != y_[rows.front()]) return false;
    return true;
  }

  const Matrix& X_;
  std::span<const double> y_;
  std::size_t min_split_;
  std::size_t k_;
  RngStream rng_;
  std::vector<NodeAudit>* audit_;
};

}  // namespace detail

/// Fits an Extremely Randomized Trees regressor. Tree t draws from the
/// stream (params.seed, Tree, t), so results do not depend on `jobs`.
inline Forest fit_forest(const Matrix& X, std::span<const double> y, const TreeParams& params, int jobs = 1,
                         FitAudit* audit = nullptr) {
  params.validate();
  if (X.rows == 0) throw InputError("fit_forest: empty training set");
  if (y.size() != X.rows) throw InputError("fit_forest: X and y row counts differ");
  for (double v : X.data)
    if (!std::isfinite(v)) throw InputError("fit_forest: non-finite feature value");
  for (double v : y)
    if (!std::isfinite(v)) throw InputError("fit_forest: non-finite target value");

  const auto scaled = static_cast<std::size_t>(std::ceil(params.min_split_fraction * static_cast<double>(X.rows)));
  const std::size_t min_split = std::max<std::size_t>(2, scaled);
  const std::size_t k = params.k_features == 0 ? X.cols : std::min<std::size_t>(X.cols, params.k_features);

  Forest forest;
  forest.feature_dim = X.cols;
  forest.train_size = X.rows;
  forest.trees.resize(static_cast<std::size_t>(params.n_trees));
  if (audit) audit->trees.assign(forest.trees.size(), {});
  const RngStream root(params.seed, 0);
  parallel_for(forest.trees.size(), jobs, [&](std::size_t t) {
    detail::TreeBuilder builder(X, y, min_split, k, root.derive(Purpose::Tree, t),
                                audit ? &audit->trees[t] : nullptr);
    forest.trees[t] = builder.build();
  });
  return forest;
}

}  // namespace metastep
