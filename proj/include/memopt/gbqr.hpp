#pragma once

// Gradient-boosted regression trees with pinball (quantile) loss.
//
// Split finding uses histogram candidates and a gradient-variance gain
//   gain = G_L^2/(n_L + lambda) + G_R^2/(n_R + lambda) - G_P^2/(n_P + lambda)
// where G sums negative gradients. The pinball loss has zero curvature, so
// leaf values come from the alpha-quantile of in-leaf residuals instead of a
// Newton step; the upper order statistic is used because it is an exact
// minimizer of the in-leaf pinball sum, which keeps training loss
// non-increasing round over round.
//
// Two growth strategies provide the ensemble's submodel diversity: leaf-wise
// growth bounded by max_leaves and level-wise growth bounded by max_depth.

#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "memopt/common.hpp"
#include "memopt/features.hpp"

namespace memopt::gbqr {

using json = nlohmann::json;

enum class Growth { leaf_wise, level_wise };

inline std::string growth_name(Growth g) { return g == Growth::leaf_wise ? "leaf_wise" : "level_wise"; }

inline Growth growth_from_name(const std::string& s) {
  if (s == "leaf_wise") return Growth::leaf_wise;
  if (s == "level_wise") return Growth::level_wise;
  throw Error(Error::Kind::ConfigError, "unknown growth: " + s);
}

struct GbqrParams {
  double quantile_alpha = 0.95;
  int n_trees = 200;
  double learning_rate = 0.1;
  int max_leaves = 31;
  int max_depth = 6;
  int min_samples_leaf = 20;
  int n_bins = 64;
  Growth growth = Growth::leaf_wise;
  double subsample = 1.0;
  double colsample = 1.0;
  double l2_leaf_reg = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(Error::Kind::InvalidParams, "gbqr params: " + m); };
    if (!(quantile_alpha > 0.0 && quantile_alpha < 1.0)) fail("quantile_alpha must be in (0,1)");
    if (n_trees < 0) fail("n_trees must be >= 0");
    if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
    if (max_leaves < 2) fail("max_leaves must be >= 2");
    if (max_depth < 1) fail("max_depth must be >= 1");
    if (min_samples_leaf < 1) fail("min_samples_leaf must be >= 1");
    if (n_bins < 2 || n_bins > 60000) fail("n_bins must be in [2, 60000]");
    if (!(subsample > 0.0 && subsample <= 1.0)) fail("subsample must be in (0,1]");
    if (!(colsample > 0.0 && colsample <= 1.0)) fail("colsample must be in (0,1]");
    if (l2_leaf_reg < 0.0) fail("l2_leaf_reg must be >= 0");
  }

  json to_json() const {
    json j;
    j["quantile_alpha"] = quantile_alpha;
    j["n_trees"] = n_trees;
    j["learning_rate"] = learning_rate;
    j["max_leaves"] = max_leaves;
    j["max_depth"] = max_depth;
    j["min_samples_leaf"] = min_samples_leaf;
    j["n_bins"] = n_bins;
    j["growth"] = growth_name(growth);
    j["subsample"] = subsample;
    j["colsample"] = colsample;
    j["l2_leaf_reg"] = l2_leaf_reg;
    j["seed"] = seed;
    return j;
  }

  static GbqrParams from_json(const json& j) {
    GbqrParams p;
    p.quantile_alpha = j.at("quantile_alpha").get<double>();
    p.n_trees = j.at("n_trees").get<int>();
    p.learning_rate = j.at("learning_rate").get<double>();
    p.max_leaves = j.at("max_leaves").get<int>();
    p.max_depth = j.at("max_depth").get<int>();
    p.min_samples_leaf = j.at("min_samples_leaf").get<int>();
    p.n_bins = j.at("n_bins").get<int>();
    p.growth = growth_from_name(j.at("growth").get<std::string>());
    p.subsample = j.at("subsample").get<double>();
    p.colsample = j.at("colsample").get<double>();
    p.l2_leaf_reg = j.at("l2_leaf_reg").get<double>();
    p.seed = j.at("seed").get<std::uint64_t>();
    p.validate();
    return p;
  }
};

// ---------------------------------------------------------------------------
// Pinball loss and its subgradient.

inline double pinball_loss(double y, double yhat, double alpha) {
  const double d = y - yhat;
  return d >= 0 ? alpha * d : (alpha - 1.0) * d;
}

// d/d(yhat) of pinball_loss; 0 at the kink (subgradient choice).
inline double pinball_gradient(double y, double yhat, double alpha) {
  if (y > yhat) return -alpha;
  if (y < yhat) return 1.0 - alpha;
  return 0.0;
}

// ---------------------------------------------------------------------------
// Histogram binning.

struct BinnedMatrix {
  std::vector<std::vector<double>> edges;  // per feature, strictly increasing bin upper edges
  std::vector<std::uint16_t> codes;        // row-major bin indices
  std::size_t n_rows = 0;
  std::size_t n_cols = 0;

  std::uint16_t code(std::size_t r, std::size_t c) const { return codes[r * n_cols + c]; }
};

// Quantile-spaced edges, at most n_bins per feature; when a feature has fewer
// distinct values than n_bins each value gets its own bin, so binned split
// search is exact. Bin b holds values v with v <= edges[b] (and
// v > edges[b-1]).
inline BinnedMatrix build_histograms(const feat::FeatureMatrix& m, int n_bins) {
  if (n_bins < 2) throw Error(Error::Kind::InvalidParams, "build_histograms: n_bins must be >= 2");
  BinnedMatrix out;
  out.n_rows = m.n_rows;
  out.n_cols = m.n_cols;
  out.edges.resize(m.n_cols);
  out.codes.assign(m.n_rows * m.n_cols, 0);

  std::vector<double> sorted(m.n_rows);
  for (std::size_t c = 0; c < m.n_cols; ++c) {
    for (std::size_t r = 0; r < m.n_rows; ++r) sorted[r] = m.at(r, c);
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> uniq(sorted);
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());

    auto& edges = out.edges[c];
    if (uniq.size() <= static_cast<std::size_t>(n_bins)) {
      edges = uniq;
    } else {
      const std::size_t n = sorted.size();
      for (int j = 1; j <= n_bins; ++j) {
        const double h = (static_cast<double>(j) / n_bins) * static_cast<double>(n - 1);
        const auto lo = static_cast<std::size_t>(h);
        const double frac = h - static_cast<double>(lo);
        const double e = lo + 1 < n ? sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]) : sorted[n - 1];
        if (edges.empty() || e > edges.back()) edges.push_back(e);
      }
      if (edges.back() < sorted.back()) edges.push_back(sorted.back());
    }
    for (std::size_t r = 0; r < m.n_rows; ++r) {
      const double v = m.at(r, c);
      const auto it = std::lower_bound(edges.begin(), edges.end(), v);
      const auto idx = it == edges.end() ? edges.size() - 1
                                         : static_cast<std::size_t>(it - edges.begin());
      out.codes[r * m.n_cols + c] = static_cast<std::uint16_t>(idx);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trees and the fitted model.

struct TreeNode {
  int feature_index = -1;     // -1 for leaves
  double bin_threshold = 0;   // go left when value <= threshold
  int left = -1;
  int right = -1;
  double leaf_value = 0;
  std::int64_t n_samples = 0;
  double gain = 0;

  bool is_leaf() const { return left < 0; }
};

struct RegressionTree {
  std::vector<TreeNode> nodes;

  double output(std::span<const double> row) const {
    int idx = 0;
    while (!nodes[static_cast<std::size_t>(idx)].is_leaf()) {
      const auto& n = nodes[static_cast<std::size_t>(idx)];
      idx = row[static_cast<std::size_t>(n.feature_index)] <= n.bin_threshold ? n.left : n.right;
    }
    return nodes[static_cast<std::size_t>(idx)].leaf_value;
  }
};

struct ModelMetadata {
  std::int64_t train_rows = 0;
  std::string data_hash;
};

struct GbqrModel {
  GbqrParams params;
  double base_score = 0;
  std::vector<RegressionTree> trees;
  std::vector<std::string> feature_names;
  std::vector<std::vector<double>> bin_edges;
  ModelMetadata metadata;

  double predict_row(std::span<const double> row) const {
    double s = base_score;
    for (const auto& t : trees) s += params.learning_rate * t.output(row);
    return s < 0.0 ? 0.0 : s;
  }

  std::vector<double> predict(const feat::FeatureMatrix& m) const {
    if (m.column_names() != feature_names) {
      throw Error(Error::Kind::SchemaMismatch,
                  "predict: matrix columns do not match the trained feature names");
    }
    std::vector<double> out(m.n_rows);
    for (std::size_t r = 0; r < m.n_rows; ++r) out[r] = predict_row(m.row(r));
    return out;
  }
};

// ---------------------------------------------------------------------------
// Training.

namespace detail {

struct SplitCandidate {
  double gain = 0;
  int feature = -1;
  int bin = -1;
  double threshold = 0;
  bool valid = false;
};

struct BuildNode {
  int tree_index = -1;
  std::vector<std::uint32_t> rows;
  int depth = 0;
  SplitCandidate best;
};

// Best histogram split for one node. Candidates iterate features then bins in
// ascending order and only strictly larger gains replace the incumbent, which
// realizes the lowest-feature-index / lowest-threshold tie rule.
inline SplitCandidate find_best_split(const BinnedMatrix& binned,
                                      std::span<const double> neg_grad,
                                      const std::vector<std::uint32_t>& rows,
                                      const std::vector<std::uint32_t>& cols,
                                      const GbqrParams& p,
                                      std::vector<double>& hist_g,
                                      std::vector<std::int64_t>& hist_n) {
  SplitCandidate best;
  const auto n = static_cast<std::int64_t>(rows.size());
  if (n < 2 * p.min_samples_leaf) return best;
  double g_total = 0;
  for (auto r : rows) g_total += neg_grad[r];
  const double lambda = p.l2_leaf_reg;
  const double parent_score = g_total * g_total / (static_cast<double>(n) + lambda);

  for (auto c : cols) {
    const auto n_edges = binned.edges[c].size();
    if (n_edges < 2) continue;
    std::fill(hist_g.begin(), hist_g.begin() + static_cast<std::ptrdiff_t>(n_edges), 0.0);
    std::fill(hist_n.begin(), hist_n.begin() + static_cast<std::ptrdiff_t>(n_edges), 0);
    for (auto r : rows) {
      const auto b = binned.code(r, c);
      hist_g[b] += neg_grad[r];
      hist_n[b] += 1;
    }
    double gl = 0;
    std::int64_t nl = 0;
    for (std::size_t b = 0; b + 1 < n_edges; ++b) {
      gl += hist_g[b];
      nl += hist_n[b];
      const std::int64_t nr = n - nl;
      if (nl < p.min_samples_leaf || nr < p.min_samples_leaf) continue;
      const double gr = g_total - gl;
      const double gain = gl * gl / (static_cast<double>(nl) + lambda) +
                          gr * gr / (static_cast<double>(nr) + lambda) - parent_score;
      if (gain > 0 && (!best.valid || gain > best.gain)) {
        best.gain = gain;
        best.feature = static_cast<int>(c);
        best.bin = static_cast<int>(b);
        best.threshold = binned.edges[c][b];
        best.valid = true;
      }
    }
  }
  return best;
}

inline double leaf_quantile(const std::vector<std::uint32_t>& rows, std::span<const double> target,
                            std::span<const double> pred, double alpha) {
  std::vector<double> residuals;
  residuals.reserve(rows.size());
  for (auto r : rows) residuals.push_back(target[r] - pred[r]);
  return quantile_upper(std::move(residuals), alpha);
}

}  // namespace detail

inline GbqrModel fit(const feat::FeatureMatrix& m, const GbqrParams& params) {
  params.validate();
  const std::size_t n = m.n_rows;
  if (n < static_cast<std::size_t>(2 * params.min_samples_leaf)) {
    throw Error(Error::Kind::InvalidParams,
                "fit: need at least 2*min_samples_leaf rows, got " + std::to_string(n));
  }

  GbqrModel model;
  model.params = params;
  model.feature_names = m.column_names();
  model.metadata.train_rows = static_cast<std::int64_t>(n);
  model.metadata.data_hash = m.data_hash();

  const BinnedMatrix binned = build_histograms(m, params.n_bins);
  model.bin_edges = binned.edges;

  const auto& y = m.target;
  const auto [mn, mx] = std::minmax_element(y.begin(), y.end());
  if (*mn == *mx) {
    // Degenerate target: the base score alone reproduces it.
    model.base_score = *mn;
    return model;
  }

  model.base_score = quantile_upper(y, params.quantile_alpha);
  std::vector<double> pred(n, model.base_score);
  std::vector<double> neg_grad(n, 0.0);

  std::size_t max_edges = 0;
  for (const auto& e : binned.edges) max_edges = std::max(max_edges, e.size());
  std::vector<double> hist_g(max_edges, 0.0);
  std::vector<std::int64_t> hist_n(max_edges, 0);

  Rng rng(params.seed);
  std::vector<std::uint32_t> all_rows(n), all_cols(m.n_cols);
  for (std::size_t i = 0; i < n; ++i) all_rows[i] = static_cast<std::uint32_t>(i);
  for (std::size_t c = 0; c < m.n_cols; ++c) all_cols[c] = static_cast<std::uint32_t>(c);

  for (int t = 0; t < params.n_trees; ++t) {
    std::vector<std::uint32_t> rows_t =
        params.subsample < 1.0
            ? rng.sample_indices(n, std::max<std::size_t>(1, static_cast<std::size_t>(
                                         params.subsample * static_cast<double>(n))))
            : all_rows;
    std::vector<std::uint32_t> cols_t =
        params.colsample < 1.0
            ? rng.sample_indices(m.n_cols, std::max<std::size_t>(1, static_cast<std::size_t>(
                                               params.colsample * static_cast<double>(m.n_cols))))
            : all_cols;

    for (std::size_t i = 0; i < n; ++i) {
      neg_grad[i] = -pinball_gradient(y[i], pred[i], params.quantile_alpha);
    }

    RegressionTree tree;
    std::vector<detail::BuildNode> open;
    {
      detail::BuildNode root;
      root.tree_index = 0;
      root.rows = rows_t;
      root.depth = 0;
      tree.nodes.emplace_back();
      tree.nodes[0].n_samples = static_cast<std::int64_t>(rows_t.size());
      root.best = detail::find_best_split(binned, neg_grad, root.rows, cols_t, params, hist_g, hist_n);
      open.push_back(std::move(root));
    }

    auto do_split = [&](detail::BuildNode& node) {
      auto& tn = tree.nodes[static_cast<std::size_t>(node.tree_index)];
      tn.feature_index = node.best.feature;
      tn.bin_threshold = node.best.threshold;
      tn.gain = node.best.gain;
      detail::BuildNode left, right;
      left.depth = right.depth = node.depth + 1;
      for (auto r : node.rows) {
        const auto b = binned.code(r, static_cast<std::size_t>(node.best.feature));
        (b <= static_cast<std::uint16_t>(node.best.bin) ? left.rows : right.rows).push_back(r);
      }
      left.tree_index = static_cast<int>(tree.nodes.size());
      tree.nodes.emplace_back();
      right.tree_index = static_cast<int>(tree.nodes.size());
      tree.nodes.emplace_back();
      auto& tn2 = tree.nodes[static_cast<std::size_t>(node.tree_index)];
      tn2.left = left.tree_index;
      tn2.right = right.tree_index;
      tree.nodes[static_cast<std::size_t>(left.tree_index)].n_samples =
          static_cast<std::int64_t>(left.rows.size());
      tree.nodes[static_cast<std::size_t>(right.tree_index)].n_samples =
          static_cast<std::int64_t>(right.rows.size());
      if (left.depth < params.max_depth) {
        left.best = detail::find_best_split(binned, neg_grad, left.rows, cols_t, params, hist_g, hist_n);
        right.best = detail::find_best_split(binned, neg_grad, right.rows, cols_t, params, hist_g, hist_n);
      }
      return std::pair{std::move(left), std::move(right)};
    };

    if (params.growth == Growth::leaf_wise) {
      int n_leaves = 1;
      while (n_leaves < params.max_leaves) {
        int pick = -1;
        for (std::size_t i = 0; i < open.size(); ++i) {
          if (!open[i].best.valid) continue;
          if (pick < 0 || open[i].best.gain > open[static_cast<std::size_t>(pick)].best.gain) {
            pick = static_cast<int>(i);
          }
        }
        if (pick < 0) break;
        detail::BuildNode node = std::move(open[static_cast<std::size_t>(pick)]);
        open.erase(open.begin() + pick);
        auto [left, right] = do_split(node);
        open.push_back(std::move(left));
        open.push_back(std::move(right));
        ++n_leaves;
      }
    } else {
      std::vector<detail::BuildNode> frontier = std::move(open);
      open.clear();
      while (!frontier.empty()) {
        std::vector<detail::BuildNode> next;
        for (auto& node : frontier) {
          if (node.best.valid && node.depth < params.max_depth) {
            auto [left, right] = do_split(node);
            next.push_back(std::move(left));
            next.push_back(std::move(right));
          } else {
            open.push_back(std::move(node));
          }
        }
        frontier = std::move(next);
      }
    }

    for (auto& leaf : open) {
      tree.nodes[static_cast<std::size_t>(leaf.tree_index)].leaf_value =
          detail::leaf_quantile(leaf.rows, y, pred, params.quantile_alpha);
    }

    for (std::size_t i = 0; i < n; ++i) {
      pred[i] += params.learning_rate * tree.output(m.row(i));
    }
    model.trees.push_back(std::move(tree));
  }
  return model;
}

// ---------------------------------------------------------------------------
// Feature importance.

struct ImportanceEntry {
  double gain_sum = 0;
  std::int64_t split_count = 0;
};

struct FeatureImportance {
  std::map<std::string, ImportanceEntry> by_feature;

  std::vector<std::pair<std::string, ImportanceEntry>> top(std::size_t k) const {
    std::vector<std::pair<std::string, ImportanceEntry>> v(by_feature.begin(), by_feature.end());
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
      if (a.second.gain_sum != b.second.gain_sum) return a.second.gain_sum > b.second.gain_sum;
      return a.first < b.first;
    });
    if (v.size() > k) v.resize(k);
    return v;
  }

  json to_json() const {
    json j = json::object();
    for (const auto& [name, e] : by_feature) {
      j[name] = {{"gain_sum", e.gain_sum}, {"split_count", e.split_count}};
    }
    return j;
  }
};

inline FeatureImportance importance(const GbqrModel& model) {
  FeatureImportance imp;
  for (const auto& tree : model.trees) {
    for (const auto& node : tree.nodes) {
      if (node.is_leaf()) continue;
      auto& e = imp.by_feature[model.feature_names[static_cast<std::size_t>(node.feature_index)]];
      e.gain_sum += node.gain;
      e.split_count += 1;
    }
  }
  return imp;
}

// ---------------------------------------------------------------------------
// Serialization. Node dicts use compact keys:
//   f feature_index, t bin_threshold, l left, r right, v leaf_value,
//   n n_samples, g gain.

inline json model_to_json(const GbqrModel& model) {
  json j;
  j["format"] = "gbqr-model";
  j["version"] = 1;
  j["params"] = model.params.to_json();
  j["base_score"] = model.base_score;
  j["feature_names"] = model.feature_names;
  j["bin_edges"] = model.bin_edges;
  json trees = json::array();
  for (const auto& tree : model.trees) {
    json nodes = json::array();
    for (const auto& n : tree.nodes) {
      nodes.push_back({{"f", n.feature_index},
                       {"t", n.bin_threshold},
                       {"l", n.left},
                       {"r", n.right},
                       {"v", n.leaf_value},
                       {"n", n.n_samples},
                       {"g", n.gain}});
    }
    trees.push_back({{"nodes", std::move(nodes)}});
  }
  j["trees"] = std::move(trees);
  j["metadata"] = {{"train_rows", model.metadata.train_rows},
                   {"data_hash", model.metadata.data_hash}};
  return j;
}

inline GbqrModel model_from_json(const json& j) {
  if (!j.contains("format") || j.at("format") != "gbqr-model") {
    throw Error(Error::Kind::ArtifactInvalid, "not a gbqr model artifact");
  }
  GbqrModel m;
  m.params = GbqrParams::from_json(j.at("params"));
  m.base_score = j.at("base_score").get<double>();
  m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
  m.bin_edges = j.at("bin_edges").get<std::vector<std::vector<double>>>();
  for (const auto& jt : j.at("trees")) {
    RegressionTree tree;
    for (const auto& jn : jt.at("nodes")) {
      TreeNode n;
      n.feature_index = jn.at("f").get<int>();
      n.bin_threshold = jn.at("t").get<double>();
      n.left = jn.at("l").get<int>();
      n.right = jn.at("r").get<int>();
      n.leaf_value = jn.at("v").get<double>();
      n.n_samples = jn.at("n").get<std::int64_t>();
      n.gain = jn.at("g").get<double>();
      tree.nodes.push_back(n);
    }
    m.trees.push_back(std::move(tree));
  }
  const auto& md = j.at("metadata");
  m.metadata.train_rows = md.at("train_rows").get<std::int64_t>();
  m.metadata.data_hash = md.at("data_hash").get<std::string>();
  return m;
}

}  // namespace memopt::gbqr
