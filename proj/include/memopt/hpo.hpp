#pragma once

// Joint hyperparameter search over both ensemble submodels, minimizing
//   cost = c * underalloc_count + sum(pred) / sum(actual)
// on an inner validation slice of the training split. No safety factor is
// applied inside the scoring loop. Samplers: seeded uniform random and a
// small kernel-density-guided variant (tpe_lite). Trials are reproducible
// from the global seed alone.

#include <chrono>
#include <cstdint>
#include <limits>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "memopt/common.hpp"
#include "memopt/features.hpp"
#include "memopt/gbqr.hpp"
#include "memopt/predictor.hpp"
#include "memopt/trace.hpp"

namespace memopt::hpo {

using json = nlohmann::json;

enum class UnderallocMeasure { count, deficit_sum };

struct CostBreakdown {
  double cost = 0;
  std::int64_t underalloc_count = 0;
  double alloc_ratio = 0;
  std::int64_t scored_rows = 0;
  std::int64_t excluded_zero_actual = 0;
};

inline CostBreakdown cost(std::span<const double> predictions, std::span<const double> actuals,
                          double c, UnderallocMeasure measure = UnderallocMeasure::count) {
  if (predictions.size() != actuals.size()) {
    throw Error(Error::Kind::LengthMismatch, "cost: prediction/actual length mismatch");
  }
  CostBreakdown out;
  double sum_pred = 0, sum_actual = 0, deficit = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (!(actuals[i] > 0)) {
      out.excluded_zero_actual++;
      continue;
    }
    out.scored_rows++;
    sum_pred += predictions[i];
    sum_actual += actuals[i];
    if (predictions[i] < actuals[i]) {
      out.underalloc_count++;
      deficit += actuals[i] - predictions[i];
    }
  }
  if (out.scored_rows == 0) {
    throw Error(Error::Kind::AllZeroActuals, "cost: no rows with positive actuals");
  }
  out.alloc_ratio = sum_pred / sum_actual;
  const double under_term =
      measure == UnderallocMeasure::count ? static_cast<double>(out.underalloc_count) : deficit;
  out.cost = c * under_term + out.alloc_ratio;
  return out;
}

// ---------------------------------------------------------------------------
// Search space.

enum class ParamKind { int_uniform, real_uniform, log_real, categorical };

struct ParamRange {
  ParamKind kind = ParamKind::real_uniform;
  double lo = 0;
  double hi = 1;
  std::vector<double> levels;  // categorical only
};

enum class Sampler { random, tpe_lite };

struct SearchSpace {
  std::map<std::string, ParamRange> submodel_a;
  std::map<std::string, ParamRange> submodel_b;
  int n_trials = 20;
  std::uint64_t seed = 0;
  Sampler sampler = Sampler::random;

  static SearchSpace defaults() {
    SearchSpace s;
    const std::map<std::string, ParamRange> shared = {
        {"n_trees", {ParamKind::int_uniform, 50, 500, {}}},
        {"learning_rate", {ParamKind::log_real, 0.01, 0.3, {}}},
        {"min_samples_leaf", {ParamKind::int_uniform, 5, 100, {}}},
        {"subsample", {ParamKind::real_uniform, 0.6, 1.0, {}}},
        {"colsample", {ParamKind::real_uniform, 0.6, 1.0, {}}},
        {"l2_leaf_reg", {ParamKind::real_uniform, 0.0, 10.0, {}}},
    };
    s.submodel_a = shared;
    s.submodel_a["max_leaves"] = {ParamKind::int_uniform, 8, 128, {}};
    s.submodel_b = shared;
    s.submodel_b["max_depth"] = {ParamKind::int_uniform, 3, 10, {}};
    return s;
  }

  static ParamKind kind_from_name(const std::string& k) {
    if (k == "int") return ParamKind::int_uniform;
    if (k == "real") return ParamKind::real_uniform;
    if (k == "log_real") return ParamKind::log_real;
    if (k == "categorical") return ParamKind::categorical;
    throw Error(Error::Kind::ConfigError, "search space: unknown kind '" + k + "'");
  }

  static std::map<std::string, ParamRange> ranges_from_json(const json& j) {
    std::map<std::string, ParamRange> out;
    for (auto& [name, spec] : j.items()) {
      ParamRange r;
      r.kind = kind_from_name(spec.at("kind").get<std::string>());
      if (r.kind == ParamKind::categorical) {
        r.levels = spec.at("levels").get<std::vector<double>>();
        if (r.levels.empty()) throw Error(Error::Kind::ConfigError, "search space: empty levels");
      } else {
        r.lo = spec.at("low").get<double>();
        r.hi = spec.at("high").get<double>();
        if (!(r.lo <= r.hi)) throw Error(Error::Kind::ConfigError, "search space: low > high");
      }
      out[name] = r;
    }
    return out;
  }

  static SearchSpace from_json(const json& j) {
    SearchSpace s = defaults();
    if (j.contains("submodel_a")) s.submodel_a = ranges_from_json(j.at("submodel_a"));
    if (j.contains("submodel_b")) s.submodel_b = ranges_from_json(j.at("submodel_b"));
    if (j.contains("n_trials")) s.n_trials = j.at("n_trials").get<int>();
    if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("sampler")) {
      const std::string name = j.at("sampler").get<std::string>();
      if (name == "random") s.sampler = Sampler::random;
      else if (name == "tpe_lite") s.sampler = Sampler::tpe_lite;
      else throw Error(Error::Kind::ConfigError, "search space: unknown sampler '" + name + "'");
    }
    return s;
  }
};

struct TrialResult {
  int trial_id = 0;
  gbqr::GbqrParams params_a;
  gbqr::GbqrParams params_b;
  double cost = std::numeric_limits<double>::infinity();
  std::int64_t underalloc_count = 0;
  double alloc_ratio = 0;
  std::int64_t excluded_zero_actual = 0;
  double wall_time_s = 0;  // in-memory only; kept out of the persisted log
  bool failed = false;
  std::string error;

  // Persisted trial-log line. wall_time_s is intentionally excluded so
  // reruns with the same seed produce byte-identical logs.
  json to_json() const {
    json j;
    j["trial_id"] = trial_id;
    j["params_a"] = params_a.to_json();
    j["params_b"] = params_b.to_json();
    j["failed"] = failed;
    if (failed) {
      j["error"] = error;
    } else {
      j["cost"] = cost;
      j["underalloc_count"] = underalloc_count;
      j["alloc_ratio"] = alloc_ratio;
      j["excluded_zero_actual"] = excluded_zero_actual;
    }
    return j;
  }
};

struct SearchResult {
  TrialResult best;
  std::vector<TrialResult> log;
};

// argmin cost over non-failed trials; ties broken by lower underalloc_count,
// then lower trial_id (log order). Null when every trial failed.
inline const TrialResult* select_best(const std::vector<TrialResult>& log) {
  const TrialResult* best = nullptr;
  for (const auto& tr : log) {
    if (tr.failed) continue;
    if (!best || tr.cost < best->cost ||
        (tr.cost == best->cost && tr.underalloc_count < best->underalloc_count)) {
      best = &tr;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Sampling.

namespace detail {

inline double sample_param(const ParamRange& r, Rng& rng) {
  switch (r.kind) {
    case ParamKind::int_uniform:
      return static_cast<double>(rng.uniform_int(static_cast<std::int64_t>(r.lo),
                                                 static_cast<std::int64_t>(r.hi)));
    case ParamKind::real_uniform:
      return rng.uniform_real(r.lo, r.hi);
    case ParamKind::log_real:
      return rng.log_uniform_real(r.lo, r.hi);
    case ParamKind::categorical:
      return r.levels[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(r.levels.size()) - 1))];
  }
  return r.lo;
}

struct Observation {
  std::map<std::string, double> values;  // keys prefixed a. / b.
  double cost = 0;
};

// Gaussian-kernel density over past observations of one parameter.
inline double kde(double x, const std::vector<double>& obs, double bandwidth) {
  if (obs.empty()) return 1e-12;
  double s = 0;
  for (double o : obs) {
    const double z = (x - o) / bandwidth;
    s += std::exp(-0.5 * z * z);
  }
  return s / (static_cast<double>(obs.size()) * bandwidth) + 1e-12;
}

// tpe_lite: candidates drawn from the prior, ranked by the density ratio of
// good (lowest-cost quartile) to bad observations.
inline double sample_param_tpe(const std::string& key, const ParamRange& r, Rng& rng,
                               const std::vector<Observation>& history) {
  std::vector<Observation> sorted = history;
  std::sort(sorted.begin(), sorted.end(),
            [](const Observation& a, const Observation& b) { return a.cost < b.cost; });
  const std::size_t n_good = std::max<std::size_t>(1, sorted.size() / 4);
  std::vector<double> good, bad;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const auto it = sorted[i].values.find(key);
    if (it == sorted[i].values.end()) continue;
    double v = it->second;
    if (r.kind == ParamKind::log_real) v = std::log(v);
    (i < n_good ? good : bad).push_back(v);
  }
  const double lo = r.kind == ParamKind::log_real ? std::log(r.lo) : r.lo;
  const double hi = r.kind == ParamKind::log_real ? std::log(r.hi) : r.hi;
  const double bw = std::max((hi - lo) / std::sqrt(static_cast<double>(history.size()) + 1.0), 1e-9);

  double best_v = 0, best_score = -1;
  constexpr int kCandidates = 24;
  for (int i = 0; i < kCandidates; ++i) {
    const double raw = sample_param(r, rng);
    double z = r.kind == ParamKind::log_real ? std::log(raw) : raw;
    const double score = kde(z, good, bw) / kde(z, bad, bw);
    if (score > best_score) {
      best_score = score;
      best_v = raw;
    }
  }
  return best_v;
}

inline void apply_param(gbqr::GbqrParams& p, const std::string& name, double v) {
  if (name == "n_trees") p.n_trees = static_cast<int>(v);
  else if (name == "learning_rate") p.learning_rate = v;
  else if (name == "max_leaves") p.max_leaves = static_cast<int>(v);
  else if (name == "max_depth") p.max_depth = static_cast<int>(v);
  else if (name == "min_samples_leaf") p.min_samples_leaf = static_cast<int>(v);
  else if (name == "n_bins") p.n_bins = static_cast<int>(v);
  else if (name == "subsample") p.subsample = v;
  else if (name == "colsample") p.colsample = v;
  else if (name == "l2_leaf_reg") p.l2_leaf_reg = v;
  else throw Error(Error::Kind::ConfigError, "search space: unknown parameter '" + name + "'");
}

}  // namespace detail

// Inner split of a (chronologically ordered) training matrix.
inline std::pair<feat::FeatureMatrix, feat::FeatureMatrix> inner_split(
    const feat::FeatureMatrix& m, const trace::SplitSpec& spec) {
  const std::size_t n = m.n_rows;
  if (n < 2) throw Error(Error::Kind::DegenerateSplit, "inner_split: need at least 2 rows");
  const auto train_n =
      static_cast<std::size_t>(std::ceil(spec.train_fraction * static_cast<double>(n)));
  if (train_n == 0 || train_n >= n) {
    throw Error(Error::Kind::DegenerateSplit, "inner_split: one side would be empty");
  }
  std::vector<std::size_t> fit_idx, val_idx;
  if (spec.mode == trace::SplitMode::chronological) {
    for (std::size_t i = 0; i < n; ++i) (i < train_n ? fit_idx : val_idx).push_back(i);
  } else {
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    Rng rng(spec.seed);
    rng.shuffle(perm);
    fit_idx.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(train_n));
    val_idx.assign(perm.begin() + static_cast<std::ptrdiff_t>(train_n), perm.end());
    std::sort(fit_idx.begin(), fit_idx.end());
    std::sort(val_idx.begin(), val_idx.end());
  }
  return {m.slice(fit_idx), m.slice(val_idx)};
}

// Base templates supply the non-searched fields (alpha, n_bins, growth).
inline SearchResult search(const feat::FeatureMatrix& train, const SearchSpace& space, double c,
                           const trace::SplitSpec& inner,
                           const gbqr::GbqrParams& template_a = {},
                           const gbqr::GbqrParams& template_b = {},
                           std::ostream* trial_log = nullptr) {
  if (space.n_trials < 1) throw Error(Error::Kind::InvalidParams, "search: n_trials must be >= 1");
  auto [fit_m, val_m] = inner_split(train, inner);

  SearchResult result;
  std::vector<detail::Observation> history;
  const std::size_t warmup = std::max<std::size_t>(4, static_cast<std::size_t>(space.n_trials) / 5);

  for (int trial = 0; trial < space.n_trials; ++trial) {
    Rng rng(mix_seed(space.seed, static_cast<std::uint64_t>(trial)));
    TrialResult tr;
    tr.trial_id = trial;
    tr.params_a = template_a;
    tr.params_a.growth = gbqr::Growth::leaf_wise;
    tr.params_b = template_b;
    tr.params_b.growth = gbqr::Growth::level_wise;

    detail::Observation obs;
    const bool use_tpe = space.sampler == Sampler::tpe_lite && history.size() >= warmup;
    auto draw = [&](const std::map<std::string, ParamRange>& ranges, gbqr::GbqrParams& p,
                    const std::string& prefix) {
      for (const auto& [name, range] : ranges) {
        const std::string key = prefix + name;
        const double v = use_tpe ? detail::sample_param_tpe(key, range, rng, history)
                                 : detail::sample_param(range, rng);
        detail::apply_param(p, name, v);
        obs.values[key] = v;
      }
    };
    draw(space.submodel_a, tr.params_a, "a.");
    draw(space.submodel_b, tr.params_b, "b.");
    tr.params_a.seed = mix_seed(space.seed, static_cast<std::uint64_t>(trial) * 2 + 1);
    tr.params_b.seed = mix_seed(space.seed, static_cast<std::uint64_t>(trial) * 2 + 2);

    const auto t0 = std::chrono::steady_clock::now();
    try {
      const auto model_a = gbqr::fit(fit_m, tr.params_a);
      const auto model_b = gbqr::fit(fit_m, tr.params_b);
      const auto pa = model_a.predict(val_m);
      const auto pb = model_b.predict(val_m);
      std::vector<double> raw(pa.size());
      for (std::size_t i = 0; i < pa.size(); ++i) raw[i] = std::max(pa[i], pb[i]);
      const CostBreakdown cb = cost(raw, val_m.target, c);
      tr.cost = cb.cost;
      tr.underalloc_count = cb.underalloc_count;
      tr.alloc_ratio = cb.alloc_ratio;
      tr.excluded_zero_actual = cb.excluded_zero_actual;
      obs.cost = cb.cost;
      history.push_back(obs);
    } catch (const std::exception& e) {
      tr.failed = true;
      tr.error = e.what();
      tr.cost = std::numeric_limits<double>::infinity();
    }
    tr.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (trial_log) {
      *trial_log << tr.to_json().dump() << "\n";
      trial_log->flush();
    }
    result.log.push_back(tr);
  }

  const TrialResult* best = select_best(result.log);
  if (!best) {
    throw Error(Error::Kind::InvalidParams, "search: every trial failed");
  }
  result.best = *best;
  return result;
}

}  // namespace memopt::hpo
