#pragma once

// Feature engineering: build-profile decomposition, temporal decomposition,
// leak-free lag/rolling aggregates, and a one-hot/numeric encoder producing a
// dense design matrix. Two feature sets exist: the raw reduced set consumed by
// the threshold classifier and the engineered set consumed by the ensemble.

#include <cstdint>
#include <map>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "memopt/common.hpp"
#include "memopt/trace.hpp"

namespace memopt::feat {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Build-profile decomposition.

struct DecomposeRule {
  std::string field;    // bp_arch | bp_compiler | bp_opt
  std::string pattern;  // ECMAScript regex, first match wins per field
  std::string value;    // literal, or "$0" for the matched text
};

struct DecomposeRules {
  std::vector<DecomposeRule> rules;

  static DecomposeRules defaults() {
    DecomposeRules r;
    r.rules = {
        {"bp_arch", "x86_64", "$0"},
        {"bp_arch", "aarch64|arm64", "$0"},
        {"bp_arch", "ppc64le|ppc64", "$0"},
        {"bp_compiler", "gcc[0-9]*", "$0"},
        {"bp_compiler", "clang[0-9]*", "$0"},
        {"bp_compiler", "msvc[0-9]*|icc[0-9]*", "$0"},
        {"bp_opt", "opt|release|rel", "$0"},
        {"bp_opt", "dbg|debug", "$0"},
    };
    return r;
  }

  static DecomposeRules from_json(const json& j) {
    DecomposeRules r;
    for (const auto& e : j) {
      r.rules.push_back({e.at("field").get<std::string>(), e.at("pattern").get<std::string>(),
                         e.at("value").get<std::string>()});
    }
    return r;
  }

  json to_json() const {
    json j = json::array();
    for (const auto& e : rules) {
      j.push_back({{"field", e.field}, {"pattern", e.pattern}, {"value", e.value}});
    }
    return j;
  }
};

struct ProfileParts {
  std::string arch = "unknown";
  std::string compiler = "unknown";
  std::string opt = "unknown";
};

inline ProfileParts decompose_build_profile(const std::string& profile, const DecomposeRules& rules) {
  ProfileParts out;
  auto assign = [&](const std::string& field, const std::string& v) {
    if (field == "bp_arch") out.arch = v;
    else if (field == "bp_compiler") out.compiler = v;
    else if (field == "bp_opt") out.opt = v;
  };
  std::map<std::string, bool> done;
  for (const auto& rule : rules.rules) {
    if (done[rule.field]) continue;
    std::smatch m;
    try {
      if (std::regex_search(profile, m, std::regex(rule.pattern))) {
        std::string v = rule.value;
        const auto pos = v.find("$0");
        if (pos != std::string::npos) v = v.substr(0, pos) + m.str(0) + v.substr(pos + 2);
        assign(rule.field, v);
        done[rule.field] = true;
      }
    } catch (const std::regex_error&) {
      throw Error(Error::Kind::ConfigError, "bad decomposition pattern: " + rule.pattern);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Temporal decomposition: ISO week of year, day of week with Monday = 0.

struct TemporalParts {
  int ts_year = 1970;
  int ts_month = 1;
  int ts_dow = 0;
  int ts_hour = 0;
  int ts_weekofyear = 1;
};

inline TemporalParts temporal_features(std::int64_t epoch_s) {
  const CivilTime c = civil_from_epoch(epoch_s);
  TemporalParts t;
  t.ts_year = c.year;
  t.ts_month = c.month;
  t.ts_dow = weekday_monday0(epoch_s);
  t.ts_hour = c.hour;
  t.ts_weekofyear = iso_week_of_year(epoch_s);
  return t;
}

// ---------------------------------------------------------------------------
// Engineered rows.

struct EngineeredRow {
  // Raw passthrough.
  std::string branch;
  std::string build_profile;
  std::string location;
  std::string make_type;
  std::string targets;
  std::string component;
  double jobs = 1;
  double local_jobs = 0;
  // Decomposed build profile.
  std::string bp_arch = "unknown";
  std::string bp_compiler = "unknown";
  std::string bp_opt = "unknown";
  // Temporal.
  int ts_year = 1970;
  int ts_month = 1;
  int ts_dow = 0;
  int ts_hour = 0;
  int ts_weekofyear = 1;
  // Target list.
  double target_cnt = 0;
  bool target_has_dist = false;
  // Lag/rolling aggregates, strictly from earlier rows. Missing until enough
  // history exists; the encoder fills them at transform time.
  std::optional<double> lag_1_grouped;
  std::optional<double> lag_max_rss_global_w5;
  std::optional<double> rolling_p95_rss_g1_w5;
  // Prediction target.
  double max_rss_gb = 0;
  std::int64_t row_id = 0;
};

inline double count_targets(const std::string& targets) {
  double n = 0;
  for (const auto& tok : split_string(targets, ',')) {
    if (!trim(tok).empty()) n += 1;
  }
  return n;
}

inline bool has_dist_target(const std::string& targets) {
  for (const auto& tok : split_string(targets, ',')) {
    if (trim(tok) == "dist") return true;
  }
  return false;
}

struct FeatureConfig {
  DecomposeRules rules = DecomposeRules::defaults();
  std::vector<std::string> group_key = {"branch", "component", "bp_arch", "bp_opt"};
  int window = 5;

  static FeatureConfig from_json(const json& j) {
    FeatureConfig c;
    if (j.contains("decompose_rules")) c.rules = DecomposeRules::from_json(j.at("decompose_rules"));
    if (j.contains("group_key")) c.group_key = j.at("group_key").get<std::vector<std::string>>();
    if (j.contains("window")) c.window = j.at("window").get<int>();
    if (c.window < 1) throw Error(Error::Kind::ConfigError, "features: window must be >= 1");
    return c;
  }

  json to_json() const {
    json j;
    j["decompose_rules"] = rules.to_json();
    j["group_key"] = group_key;
    j["window"] = window;
    return j;
  }
};

namespace detail {

inline std::string group_key_of(const EngineeredRow& row, const std::vector<std::string>& fields) {
  std::string key;
  for (const auto& f : fields) {
    if (f == "branch") key += row.branch;
    else if (f == "component") key += row.component;
    else if (f == "bp_arch") key += row.bp_arch;
    else if (f == "bp_compiler") key += row.bp_compiler;
    else if (f == "bp_opt") key += row.bp_opt;
    else if (f == "location") key += row.location;
    else if (f == "makeType") key += row.make_type;
    else if (f == "buildProfile") key += row.build_profile;
    else throw Error(Error::Kind::ConfigError, "features: unknown group key field '" + f + "'");
    key += '\x1f';
  }
  return key;
}

}  // namespace detail

struct RollingFeatures {
  std::vector<std::optional<double>> lag_1_grouped;
  std::vector<std::optional<double>> lag_max_rss_global_w5;
  std::vector<std::optional<double>> rolling_p95_rss_g1_w5;
};

// Computes the three history aggregates for a time-sorted dataset. Position i
// only sees rows j < i, so the features are leak-free by construction.
// Partial windows with at least one prior observation are allowed.
inline RollingFeatures rolling_features(std::span<const EngineeredRow> rows,
                                        const std::vector<std::string>& group_key, int window) {
  if (window < 1) throw Error(Error::Kind::InvalidParams, "rolling_features: window must be >= 1");
  const std::size_t n = rows.size();
  RollingFeatures out;
  out.lag_1_grouped.resize(n);
  out.lag_max_rss_global_w5.resize(n);
  out.rolling_p95_rss_g1_w5.resize(n);

  std::map<std::string, std::vector<double>> group_hist;
  std::vector<double> global_window;  // last `window` targets

  double global_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string key = detail::group_key_of(rows[i], group_key);
    auto& hist = group_hist[key];
    if (!hist.empty()) {
      out.lag_1_grouped[i] = hist.back();
      const std::size_t take = std::min<std::size_t>(hist.size(), static_cast<std::size_t>(window));
      std::vector<double> tail(hist.end() - static_cast<std::ptrdiff_t>(take), hist.end());
      out.rolling_p95_rss_g1_w5[i] = quantile_linear(std::move(tail), 0.95);
    }
    if (!global_window.empty()) {
      out.lag_max_rss_global_w5[i] = global_sum / static_cast<double>(global_window.size());
    }

    const double y = rows[i].max_rss_gb;
    hist.push_back(y);
    global_window.push_back(y);
    global_sum += y;
    if (global_window.size() > static_cast<std::size_t>(window)) {
      global_sum -= global_window.front();
      global_window.erase(global_window.begin());
    }
  }
  return out;
}

inline std::vector<EngineeredRow> engineer_rows(const trace::TraceDataset& ds,
                                                const FeatureConfig& cfg) {
  std::vector<EngineeredRow> rows;
  rows.reserve(ds.records.size());
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& r = ds.records[i];
    EngineeredRow row;
    row.branch = r.branch;
    row.build_profile = r.build_profile;
    row.location = r.location;
    row.make_type = r.make_type;
    row.targets = r.targets;
    row.component = r.component;
    row.jobs = static_cast<double>(r.jobs);
    row.local_jobs = static_cast<double>(r.local_jobs);
    const ProfileParts p = decompose_build_profile(r.build_profile, cfg.rules);
    row.bp_arch = p.arch;
    row.bp_compiler = p.compiler;
    row.bp_opt = p.opt;
    const TemporalParts t = temporal_features(r.time);
    row.ts_year = t.ts_year;
    row.ts_month = t.ts_month;
    row.ts_dow = t.ts_dow;
    row.ts_hour = t.ts_hour;
    row.ts_weekofyear = t.ts_weekofyear;
    row.target_cnt = count_targets(r.targets);
    row.target_has_dist = has_dist_target(r.targets);
    row.max_rss_gb = r.max_rss_gb();
    row.row_id = static_cast<std::int64_t>(i);
    rows.push_back(std::move(row));
  }
  const RollingFeatures rf = rolling_features(rows, cfg.group_key, cfg.window);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].lag_1_grouped = rf.lag_1_grouped[i];
    rows[i].lag_max_rss_global_w5 = rf.lag_max_rss_global_w5[i];
    rows[i].rolling_p95_rss_g1_w5 = rf.rolling_p95_rss_g1_w5[i];
  }
  return rows;
}

// Builds an engineered row for a single serving request: no trace history is
// available, so lag/rolling values stay missing unless the caller supplies
// them in the attribute map.
inline EngineeredRow engineer_single(const std::map<std::string, std::string>& attrs,
                                     const FeatureConfig& cfg) {
  EngineeredRow row;
  auto get = [&](const char* k) -> std::string {
    auto it = attrs.find(k);
    return it == attrs.end() ? std::string() : it->second;
  };
  row.branch = get("branch");
  row.build_profile = get("buildProfile");
  row.location = get("location");
  row.make_type = get("makeType");
  row.targets = get("targets");
  row.component = get("component");
  if (auto v = parse_double(get("jobs")); v && *v >= 1) row.jobs = *v;
  if (auto v = parse_double(get("localJobs")); v && *v >= 0) row.local_jobs = *v;
  const ProfileParts p = decompose_build_profile(row.build_profile, cfg.rules);
  row.bp_arch = p.arch;
  row.bp_compiler = p.compiler;
  row.bp_opt = p.opt;
  std::int64_t ts = 0;
  if (auto t = parse_timestamp(get("time"))) ts = *t;
  const TemporalParts t = temporal_features(ts);
  row.ts_year = t.ts_year;
  row.ts_month = t.ts_month;
  row.ts_dow = t.ts_dow;
  row.ts_hour = t.ts_hour;
  row.ts_weekofyear = t.ts_weekofyear;
  row.target_cnt = count_targets(row.targets);
  row.target_has_dist = has_dist_target(row.targets);
  if (auto v = parse_double(get("lag_1_grouped"))) row.lag_1_grouped = *v;
  if (auto v = parse_double(get("lag_max_rss_global_w5"))) row.lag_max_rss_global_w5 = *v;
  if (auto v = parse_double(get("rolling_p95_rss_g1_w5"))) row.rolling_p95_rss_g1_w5 = *v;
  return row;
}

// Serving-equivalent attribute map for a row. Feeding this back through
// engineer_single reproduces the row, which is what keeps offline evaluation
// and the orchestrator's online decisions in lockstep.
inline std::map<std::string, std::string> serving_attributes(const EngineeredRow& row,
                                                             std::int64_t time_epoch_s) {
  std::map<std::string, std::string> a;
  a["branch"] = row.branch;
  a["buildProfile"] = row.build_profile;
  a["location"] = row.location;
  a["makeType"] = row.make_type;
  a["targets"] = row.targets;
  a["component"] = row.component;
  a["jobs"] = format_double(row.jobs);
  a["localJobs"] = format_double(row.local_jobs);
  a["time"] = std::to_string(time_epoch_s);
  if (row.lag_1_grouped) a["lag_1_grouped"] = format_double(*row.lag_1_grouped);
  if (row.lag_max_rss_global_w5) a["lag_max_rss_global_w5"] = format_double(*row.lag_max_rss_global_w5);
  if (row.rolling_p95_rss_g1_w5) a["rolling_p95_rss_g1_w5"] = format_double(*row.rolling_p95_rss_g1_w5);
  return a;
}

// ---------------------------------------------------------------------------
// Encoding.

enum class FeatureSet { ensemble_table1, classifier_table1 };

inline std::string feature_set_name(FeatureSet s) {
  return s == FeatureSet::ensemble_table1 ? "ensemble_table1" : "classifier_table1";
}

inline FeatureSet feature_set_from_name(const std::string& s) {
  if (s == "ensemble_table1") return FeatureSet::ensemble_table1;
  if (s == "classifier_table1") return FeatureSet::classifier_table1;
  throw Error(Error::Kind::ConfigError, "unknown feature set: " + s);
}

namespace detail {

struct FeatureDesc {
  std::string name;
  bool categorical;
};

inline const std::vector<FeatureDesc>& feature_descs(FeatureSet set) {
  static const std::vector<FeatureDesc> ensemble = {
      {"branch", true},         {"jobs", false},
      {"location", true},       {"makeType", true},
      {"localJobs", false},     {"component", true},
      {"bp_arch", true},        {"bp_compiler", true},
      {"bp_opt", true},         {"ts_year", false},
      {"ts_month", false},      {"ts_dow", false},
      {"ts_hour", false},       {"ts_weekofyear", false},
      {"target_cnt", false},    {"target_has_dist", false},
      {"lag_1_grouped", false}, {"lag_max_rss_global_w5", false},
      {"rolling_p95_rss_g1_w5", false},
  };
  static const std::vector<FeatureDesc> classifier = {
      {"branch", true},    {"buildProfile", true}, {"jobs", false},
      {"location", true},  {"makeType", true},     {"targets", true},
      {"localJobs", false}, {"component", true},
  };
  return set == FeatureSet::ensemble_table1 ? ensemble : classifier;
}

inline std::string categorical_value(const EngineeredRow& r, const std::string& f) {
  if (f == "branch") return r.branch;
  if (f == "buildProfile") return r.build_profile;
  if (f == "location") return r.location;
  if (f == "makeType") return r.make_type;
  if (f == "targets") return r.targets;
  if (f == "component") return r.component;
  if (f == "bp_arch") return r.bp_arch;
  if (f == "bp_compiler") return r.bp_compiler;
  if (f == "bp_opt") return r.bp_opt;
  throw Error(Error::Kind::ConfigError, "unknown categorical feature: " + f);
}

inline std::optional<double> numeric_value(const EngineeredRow& r, const std::string& f) {
  if (f == "jobs") return r.jobs;
  if (f == "localJobs") return r.local_jobs;
  if (f == "ts_year") return static_cast<double>(r.ts_year);
  if (f == "ts_month") return static_cast<double>(r.ts_month);
  if (f == "ts_dow") return static_cast<double>(r.ts_dow);
  if (f == "ts_hour") return static_cast<double>(r.ts_hour);
  if (f == "ts_weekofyear") return static_cast<double>(r.ts_weekofyear);
  if (f == "target_cnt") return r.target_cnt;
  if (f == "target_has_dist") return r.target_has_dist ? 1.0 : 0.0;
  if (f == "lag_1_grouped") return r.lag_1_grouped;
  if (f == "lag_max_rss_global_w5") return r.lag_max_rss_global_w5;
  if (f == "rolling_p95_rss_g1_w5") return r.rolling_p95_rss_g1_w5;
  throw Error(Error::Kind::ConfigError, "unknown numeric feature: " + f);
}

}  // namespace detail

enum class ColumnKind { numeric, one_hot };

struct ColumnMeta {
  std::string name;            // "jobs" or "branch=main"
  ColumnKind kind = ColumnKind::numeric;
  std::string source_feature;  // "jobs" or "branch"
  std::string level;           // one-hot level, empty for numeric
};

struct FeatureMatrix {
  std::vector<double> values;  // row-major, n_rows x n_cols
  std::size_t n_rows = 0;
  std::size_t n_cols = 0;
  std::vector<ColumnMeta> column_meta;
  std::vector<double> target;
  std::vector<std::int64_t> row_ids;

  double at(std::size_t r, std::size_t c) const { return values[r * n_cols + c]; }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(values.data() + r * n_cols, n_cols);
  }
  std::vector<std::string> column_names() const {
    std::vector<std::string> names;
    names.reserve(column_meta.size());
    for (const auto& c : column_meta) names.push_back(c.name);
    return names;
  }

  FeatureMatrix slice(std::span<const std::size_t> rows) const {
    FeatureMatrix out;
    out.n_rows = rows.size();
    out.n_cols = n_cols;
    out.column_meta = column_meta;
    out.values.reserve(rows.size() * n_cols);
    for (auto r : rows) {
      out.values.insert(out.values.end(), values.begin() + static_cast<std::ptrdiff_t>(r * n_cols),
                        values.begin() + static_cast<std::ptrdiff_t>((r + 1) * n_cols));
      out.target.push_back(target[r]);
      out.row_ids.push_back(row_ids[r]);
    }
    return out;
  }

  std::string data_hash() const {
    std::string bytes;
    bytes.reserve(values.size() * sizeof(double) + target.size() * sizeof(double));
    bytes.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double));
    bytes.append(reinterpret_cast<const char*>(target.data()), target.size() * sizeof(double));
    return hash_hex(fnv1a64(bytes));
  }
};

struct EncoderState {
  FeatureSet set = FeatureSet::ensemble_table1;
  std::map<std::string, std::vector<std::string>> vocab;  // categorical feature -> sorted levels
  std::map<std::string, double> fill;                     // numeric feature -> missing fill
  bool fitted = false;

  json to_json() const {
    json j;
    j["feature_set"] = feature_set_name(set);
    j["vocab"] = vocab;
    j["fill"] = fill;
    return j;
  }

  static EncoderState from_json(const json& j) {
    EncoderState e;
    e.set = feature_set_from_name(j.at("feature_set").get<std::string>());
    e.vocab = j.at("vocab").get<std::map<std::string, std::vector<std::string>>>();
    e.fill = j.at("fill").get<std::map<std::string, double>>();
    e.fitted = true;
    return e;
  }
};

inline EncoderState fit_encoder(std::span<const EngineeredRow> rows, FeatureSet set) {
  if (rows.empty()) throw Error(Error::Kind::EmptyInput, "fit_encoder: no rows");
  EncoderState enc;
  enc.set = set;
  for (const auto& desc : detail::feature_descs(set)) {
    if (desc.categorical) {
      std::set<std::string> levels;
      for (const auto& r : rows) levels.insert(detail::categorical_value(r, desc.name));
      enc.vocab[desc.name] = std::vector<std::string>(levels.begin(), levels.end());
    } else {
      std::vector<double> present;
      for (const auto& r : rows) {
        if (auto v = detail::numeric_value(r, desc.name)) present.push_back(*v);
      }
      // Missing fill = training median; 0 if the column never appears.
      enc.fill[desc.name] = present.empty() ? 0.0 : quantile_linear(std::move(present), 0.5);
    }
  }
  enc.fitted = true;
  return enc;
}

namespace detail {

inline std::vector<ColumnMeta> build_columns(const EncoderState& enc) {
  std::vector<ColumnMeta> cols;
  for (const auto& desc : feature_descs(enc.set)) {
    if (desc.categorical) {
      for (const auto& level : enc.vocab.at(desc.name)) {
        cols.push_back({desc.name + "=" + level, ColumnKind::one_hot, desc.name, level});
      }
    } else {
      cols.push_back({desc.name, ColumnKind::numeric, desc.name, ""});
    }
  }
  // Lexicographic column order, the DictVectorizer convention.
  std::sort(cols.begin(), cols.end(),
            [](const ColumnMeta& a, const ColumnMeta& b) { return a.name < b.name; });
  return cols;
}

}  // namespace detail

inline void transform_row_into(const EngineeredRow& row, const EncoderState& enc,
                               const std::vector<ColumnMeta>& cols, std::span<double> out) {
  for (std::size_t c = 0; c < cols.size(); ++c) {
    const auto& meta = cols[c];
    if (meta.kind == ColumnKind::one_hot) {
      out[c] = (detail::categorical_value(row, meta.source_feature) == meta.level) ? 1.0 : 0.0;
    } else {
      const auto v = detail::numeric_value(row, meta.source_feature);
      out[c] = v ? *v : enc.fill.at(meta.source_feature);
    }
  }
}

inline FeatureMatrix transform(std::span<const EngineeredRow> rows, const EncoderState& enc) {
  if (!enc.fitted) throw Error(Error::Kind::NotFitted, "transform: encoder not fitted");
  FeatureMatrix m;
  m.column_meta = detail::build_columns(enc);
  m.n_cols = m.column_meta.size();
  m.n_rows = rows.size();
  m.values.assign(m.n_rows * m.n_cols, 0.0);
  m.target.reserve(rows.size());
  m.row_ids.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    transform_row_into(rows[r], enc, m.column_meta,
                       std::span<double>(m.values.data() + r * m.n_cols, m.n_cols));
    m.target.push_back(rows[r].max_rss_gb);
    m.row_ids.push_back(rows[r].row_id);
  }
  return m;
}

inline std::vector<double> transform_single(const EngineeredRow& row, const EncoderState& enc) {
  if (!enc.fitted) throw Error(Error::Kind::NotFitted, "transform_single: encoder not fitted");
  const auto cols = detail::build_columns(enc);
  std::vector<double> out(cols.size(), 0.0);
  transform_row_into(row, enc, cols, out);
  return out;
}

}  // namespace memopt::feat
