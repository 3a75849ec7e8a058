#pragma once

// The two deployable prediction strategies plus the shared production policy.
//
// Threshold classifier: a linear model deciding whether a build's peak memory
// falls below a fixed threshold; when it does, the assignment becomes
// min(threshold * safety_factor, original). Defaults: 50 GB threshold,
// safety factor 2.
//
// Quantile ensemble: two boosted quantile submodels (leaf-wise and
// level-wise growth); the raw prediction is their elementwise maximum, then
// safety factor (default 1.2), a 1 GB floor, and clipping at the original
// requirement. Refinement can only reduce an assignment, never increase it.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "memopt/common.hpp"
#include "memopt/features.hpp"
#include "memopt/gbqr.hpp"

namespace memopt::predictor {

using json = nlohmann::json;

// Minimum assignment after safeguarding, before clipping.
constexpr double kMinAssignGb = 1.0;

enum class Strategy { classifier, ensemble, passthrough };

inline std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::classifier: return "classifier";
    case Strategy::ensemble: return "ensemble";
    default: return "passthrough";
  }
}

inline Strategy strategy_from_name(const std::string& s) {
  if (s == "classifier") return Strategy::classifier;
  if (s == "ensemble") return Strategy::ensemble;
  if (s == "passthrough") return Strategy::passthrough;
  throw Error(Error::Kind::ConfigError, "unknown strategy: " + s);
}

struct RefinementDecision {
  std::string task_id;
  double original_gb = 0;
  double raw_prediction_gb = 0;
  double safeguarded_gb = 0;  // raw * safety_factor
  double final_gb = 0;
  bool clipped = false;
  Strategy strategy = Strategy::passthrough;
  std::string model_version;

  json to_json() const {
    json j;
    j["task_id"] = task_id;
    j["original_gb"] = original_gb;
    j["raw_prediction_gb"] = raw_prediction_gb;
    j["safeguarded_gb"] = safeguarded_gb;
    j["final_gb"] = final_gb;
    j["clipped"] = clipped;
    j["strategy"] = strategy_name(strategy);
    j["model_version"] = model_version;
    return j;
  }

  static RefinementDecision from_json(const json& j) {
    RefinementDecision d;
    d.task_id = j.at("task_id").get<std::string>();
    d.original_gb = j.at("original_gb").get<double>();
    d.raw_prediction_gb = j.at("raw_prediction_gb").get<double>();
    d.safeguarded_gb = j.at("safeguarded_gb").get<double>();
    d.final_gb = j.at("final_gb").get<double>();
    d.clipped = j.at("clipped").get<bool>();
    d.strategy = strategy_from_name(j.at("strategy").get<std::string>());
    d.model_version = j.at("model_version").get<std::string>();
    return d;
  }
};

// Shared policy core: floor, then clip at the original requirement. Both the
// offline evaluator and the serving handlers funnel through here, so the two
// paths cannot drift apart.
inline RefinementDecision apply_policy(double raw_gb, double original_gb, double safety_factor,
                                       Strategy strategy, const std::string& task_id,
                                       const std::string& model_version, bool clip = true) {
  RefinementDecision d;
  d.task_id = task_id;
  d.original_gb = original_gb;
  d.raw_prediction_gb = raw_gb;
  d.safeguarded_gb = raw_gb * safety_factor;
  const double floored = std::max(d.safeguarded_gb, kMinAssignGb);
  d.clipped = d.safeguarded_gb > original_gb;
  d.final_gb = clip ? std::min(floored, original_gb) : floored;
  d.strategy = strategy;
  d.model_version = model_version;
  return d;
}

inline RefinementDecision passthrough_decision(double original_gb, const std::string& task_id) {
  RefinementDecision d;
  d.task_id = task_id;
  d.original_gb = original_gb;
  d.raw_prediction_gb = original_gb;
  d.safeguarded_gb = original_gb;
  d.final_gb = original_gb;
  d.clipped = false;
  d.strategy = Strategy::passthrough;
  d.model_version = "";
  return d;
}

// ---------------------------------------------------------------------------
// Training metadata shared by both envelopes.

struct TrainMeta {
  std::int64_t train_rows = 0;
  std::string data_hash;
  json split_spec = json::object();
  std::optional<double> cost_at_selection;
  // One training row's serving attributes; registration runs a smoke
  // prediction against it before accepting an artifact.
  std::map<std::string, std::string> smoke_row;

  json to_json() const {
    json j;
    j["train_rows"] = train_rows;
    j["data_hash"] = data_hash;
    j["split_spec"] = split_spec;
    if (cost_at_selection) j["cost_at_selection"] = *cost_at_selection;
    j["smoke_row"] = smoke_row;
    return j;
  }

  static TrainMeta from_json(const json& j) {
    TrainMeta m;
    m.train_rows = j.value("train_rows", std::int64_t{0});
    m.data_hash = j.value("data_hash", std::string());
    m.split_spec = j.value("split_spec", json::object());
    if (j.contains("cost_at_selection")) m.cost_at_selection = j.at("cost_at_selection").get<double>();
    if (j.contains("smoke_row")) m.smoke_row = j.at("smoke_row").get<std::map<std::string, std::string>>();
    return m;
  }
};

// ---------------------------------------------------------------------------
// Threshold classifier.

struct ClassifierTrainReport {
  double train_accuracy = 0;
  double false_positive_rate = 0;  // predicted below, actually above
  double fp_rate_budget = 0.10;    // accepted operating point, recorded only
};

struct ThresholdClassifier {
  std::vector<double> weights;
  double bias = 0;
  std::vector<double> feature_means;  // standardization folded into the model
  std::vector<double> feature_scales;
  double threshold_gb = 50.0;
  double safety_factor = 2.0;
  feat::EncoderState encoder;
  TrainMeta meta;
  ClassifierTrainReport report;
  std::string version = "clf-1";
  bool fitted = false;

  double score(std::span<const double> x) const {
    double s = bias;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      s += weights[i] * (x[i] - feature_means[i]) / feature_scales[i];
    }
    return s;
  }

  // Tie rule: score == 0 counts as below the threshold.
  bool predicts_below(std::span<const double> x) const { return score(x) <= 0.0; }
};

// Hinge-loss SGD with L2 regularization; label -1 = below threshold,
// +1 = above. Deterministic: seeded shuffles, fixed epoch count.
inline ThresholdClassifier train_classifier(const feat::FeatureMatrix& m,
                                            const feat::EncoderState& encoder,
                                            double threshold_gb = 50.0, int hinge_epochs = 20,
                                            double safety_factor = 2.0, double l2 = 1e-4,
                                            std::uint64_t seed = 0) {
  if (m.n_rows == 0) throw Error(Error::Kind::EmptyInput, "train_classifier: empty matrix");
  std::vector<double> labels(m.n_rows);
  std::int64_t below = 0;
  for (std::size_t i = 0; i < m.n_rows; ++i) {
    labels[i] = m.target[i] < threshold_gb ? -1.0 : 1.0;
    if (labels[i] < 0) ++below;
  }
  if (below == 0 || below == static_cast<std::int64_t>(m.n_rows)) {
    throw Error(Error::Kind::SingleClass, "train_classifier: all labels identical");
  }

  ThresholdClassifier clf;
  clf.threshold_gb = threshold_gb;
  clf.safety_factor = safety_factor;
  clf.encoder = encoder;
  clf.weights.assign(m.n_cols, 0.0);
  clf.feature_means.assign(m.n_cols, 0.0);
  clf.feature_scales.assign(m.n_cols, 1.0);
  for (std::size_t c = 0; c < m.n_cols; ++c) {
    double s = 0;
    for (std::size_t r = 0; r < m.n_rows; ++r) s += m.at(r, c);
    clf.feature_means[c] = s / static_cast<double>(m.n_rows);
    double v = 0;
    for (std::size_t r = 0; r < m.n_rows; ++r) {
      const double d = m.at(r, c) - clf.feature_means[c];
      v += d * d;
    }
    const double sd = std::sqrt(v / static_cast<double>(m.n_rows));
    clf.feature_scales[c] = sd > 1e-12 ? sd : 1.0;
  }

  Rng rng(seed);
  std::vector<std::uint32_t> order(m.n_rows);
  for (std::size_t i = 0; i < m.n_rows; ++i) order[i] = static_cast<std::uint32_t>(i);
  std::vector<double> xs(m.n_cols);
  std::size_t step = 0;
  const double eta0 = 0.5;
  for (int epoch = 0; epoch < hinge_epochs; ++epoch) {
    rng.shuffle(order);
    for (auto r : order) {
      const double eta = eta0 / (1.0 + l2 * eta0 * static_cast<double>(step++));
      for (std::size_t c = 0; c < m.n_cols; ++c) {
        xs[c] = (m.at(r, c) - clf.feature_means[c]) / clf.feature_scales[c];
      }
      double s = clf.bias;
      for (std::size_t c = 0; c < m.n_cols; ++c) s += clf.weights[c] * xs[c];
      const double yl = labels[r];
      const double decay = 1.0 - eta * l2;
      for (auto& w : clf.weights) w *= decay;
      if (yl * s < 1.0) {
        for (std::size_t c = 0; c < m.n_cols; ++c) clf.weights[c] += eta * yl * xs[c];
        clf.bias += eta * yl;
      }
    }
  }

  std::int64_t correct = 0, fp = 0, actually_above = 0;
  for (std::size_t r = 0; r < m.n_rows; ++r) {
    const bool pred_below = clf.predicts_below(m.row(r));
    const bool is_below = labels[r] < 0;
    if (pred_below == is_below) ++correct;
    if (!is_below) {
      ++actually_above;
      if (pred_below) ++fp;
    }
  }
  clf.report.train_accuracy = static_cast<double>(correct) / static_cast<double>(m.n_rows);
  clf.report.false_positive_rate =
      actually_above > 0 ? static_cast<double>(fp) / static_cast<double>(actually_above) : 0.0;
  clf.meta.train_rows = static_cast<std::int64_t>(m.n_rows);
  clf.meta.data_hash = m.data_hash();
  clf.fitted = true;
  return clf;
}

inline RefinementDecision classify_refine(const ThresholdClassifier& clf,
                                          const feat::EngineeredRow& row, double original_gb,
                                          const std::string& task_id = "") {
  if (!clf.fitted) throw Error(Error::Kind::NotFitted, "classify_refine: classifier not fitted");
  const std::vector<double> x = feat::transform_single(row, clf.encoder);
  if (clf.predicts_below(x)) {
    return apply_policy(clf.threshold_gb, original_gb, clf.safety_factor, Strategy::classifier,
                        task_id, clf.version);
  }
  RefinementDecision d =
      apply_policy(original_gb, original_gb, 1.0, Strategy::classifier, task_id, clf.version);
  return d;
}

// ---------------------------------------------------------------------------
// Quantile ensemble.

struct QuantileEnsemble {
  gbqr::GbqrModel submodel_a;  // leaf-wise growth
  gbqr::GbqrModel submodel_b;  // level-wise growth
  feat::EncoderState encoder;
  double alpha = 0.95;
  double safety_factor = 1.2;
  TrainMeta meta;
  std::string version = "ens-1";
  bool fitted = false;

  double predict_raw_row(std::span<const double> x) const {
    return std::max(submodel_a.predict_row(x), submodel_b.predict_row(x));
  }

  std::vector<double> predict_raw(const feat::FeatureMatrix& m) const {
    const auto a = submodel_a.predict(m);
    const auto b = submodel_b.predict(m);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::max(a[i], b[i]);
    return out;
  }
};

inline QuantileEnsemble train_ensemble(const feat::FeatureMatrix& m,
                                       const feat::EncoderState& encoder,
                                       gbqr::GbqrParams params_a, gbqr::GbqrParams params_b,
                                       double safety_factor = 1.2) {
  params_a.growth = gbqr::Growth::leaf_wise;
  params_b.growth = gbqr::Growth::level_wise;
  if (params_a.quantile_alpha != params_b.quantile_alpha) {
    throw Error(Error::Kind::InvalidParams, "train_ensemble: submodels must share quantile_alpha");
  }
  QuantileEnsemble ens;
  ens.submodel_a = gbqr::fit(m, params_a);
  ens.submodel_b = gbqr::fit(m, params_b);
  ens.encoder = encoder;
  ens.alpha = params_a.quantile_alpha;
  ens.safety_factor = safety_factor;
  ens.meta.train_rows = static_cast<std::int64_t>(m.n_rows);
  ens.meta.data_hash = m.data_hash();
  ens.fitted = true;
  return ens;
}

inline RefinementDecision ensemble_refine(const QuantileEnsemble& ens,
                                          const feat::EngineeredRow& row, double original_gb,
                                          const std::string& task_id = "", bool clip = true) {
  if (!ens.fitted) throw Error(Error::Kind::NotFitted, "ensemble_refine: ensemble not fitted");
  if (!(original_gb > 0)) {
    throw Error(Error::Kind::InvalidParams, "ensemble_refine: original_gb must be > 0");
  }
  const std::vector<double> x = feat::transform_single(row, ens.encoder);
  const double raw = ens.predict_raw_row(x);
  return apply_policy(raw, original_gb, ens.safety_factor, Strategy::ensemble, task_id, ens.version,
                      clip);
}

// ---------------------------------------------------------------------------
// Bin snapping (optional compatibility mode for bin-constrained schedulers).

struct SnapResult {
  double gb = 0;
  bool overflow = false;
};

inline SnapResult snap_to_bins(double final_gb, std::span<const double> bin_table) {
  if (bin_table.empty()) throw Error(Error::Kind::InvalidParams, "snap_to_bins: empty bin table");
  for (double b : bin_table) {
    if (b >= final_gb) return {b, false};
  }
  return {bin_table.back(), true};
}

// ---------------------------------------------------------------------------
// Envelopes.

inline json ensemble_to_json(const QuantileEnsemble& ens) {
  json j;
  j["format"] = "memopt-model";
  j["kind"] = "ensemble";
  j["version"] = 1;
  j["model_version"] = ens.version;
  j["alpha"] = ens.alpha;
  j["safety_factor"] = ens.safety_factor;
  j["encoder"] = ens.encoder.to_json();
  j["submodel_a"] = gbqr::model_to_json(ens.submodel_a);
  j["submodel_b"] = gbqr::model_to_json(ens.submodel_b);
  j["training_meta"] = ens.meta.to_json();
  return j;
}

inline QuantileEnsemble ensemble_from_json(const json& j) {
  if (j.value("kind", std::string()) != "ensemble") {
    throw Error(Error::Kind::ArtifactInvalid, "not an ensemble envelope");
  }
  QuantileEnsemble ens;
  ens.version = j.value("model_version", std::string("ens-1"));
  ens.alpha = j.at("alpha").get<double>();
  ens.safety_factor = j.at("safety_factor").get<double>();
  ens.encoder = feat::EncoderState::from_json(j.at("encoder"));
  ens.submodel_a = gbqr::model_from_json(j.at("submodel_a"));
  ens.submodel_b = gbqr::model_from_json(j.at("submodel_b"));
  ens.meta = TrainMeta::from_json(j.at("training_meta"));
  ens.fitted = true;
  return ens;
}

inline json classifier_to_json(const ThresholdClassifier& clf) {
  json j;
  j["format"] = "memopt-model";
  j["kind"] = "classifier";
  j["version"] = 1;
  j["model_version"] = clf.version;
  j["threshold_gb"] = clf.threshold_gb;
  j["safety_factor"] = clf.safety_factor;
  j["weights"] = clf.weights;
  j["bias"] = clf.bias;
  j["feature_means"] = clf.feature_means;
  j["feature_scales"] = clf.feature_scales;
  j["encoder"] = clf.encoder.to_json();
  j["training_meta"] = clf.meta.to_json();
  j["report"] = {{"train_accuracy", clf.report.train_accuracy},
                 {"false_positive_rate", clf.report.false_positive_rate},
                 {"fp_rate_budget", clf.report.fp_rate_budget}};
  return j;
}

inline ThresholdClassifier classifier_from_json(const json& j) {
  if (j.value("kind", std::string()) != "classifier") {
    throw Error(Error::Kind::ArtifactInvalid, "not a classifier envelope");
  }
  ThresholdClassifier clf;
  clf.version = j.value("model_version", std::string("clf-1"));
  clf.threshold_gb = j.at("threshold_gb").get<double>();
  clf.safety_factor = j.at("safety_factor").get<double>();
  clf.weights = j.at("weights").get<std::vector<double>>();
  clf.bias = j.at("bias").get<double>();
  clf.feature_means = j.at("feature_means").get<std::vector<double>>();
  clf.feature_scales = j.at("feature_scales").get<std::vector<double>>();
  clf.encoder = feat::EncoderState::from_json(j.at("encoder"));
  clf.meta = TrainMeta::from_json(j.at("training_meta"));
  if (j.contains("report")) {
    clf.report.train_accuracy = j["report"].value("train_accuracy", 0.0);
    clf.report.false_positive_rate = j["report"].value("false_positive_rate", 0.0);
    clf.report.fp_rate_budget = j["report"].value("fp_rate_budget", 0.10);
  }
  clf.fitted = true;
  return clf;
}

}  // namespace memopt::predictor
