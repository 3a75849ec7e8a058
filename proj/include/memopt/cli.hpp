#pragma once

// Command-line entry point: ingest, split, tune, train, eval, serve,
// simulate, report. Every subcommand is a file-to-file transformation driven
// by (inputs, config, seed) and writes exactly one run manifest next to its
// outputs. Config precedence: flags > environment > config file > defaults.
//
// Environment overrides: MEMOPT_CONFIG, MEMOPT_SEED, MEMOPT_OUT_DIR,
// MEMOPT_LOG_LEVEL, MEMOPT_LISTEN, MEMOPT_DEADLINE_MS, MEMOPT_DECISION_LOG.

#include <array>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "memopt/cluster_sim.hpp"
#include "memopt/common.hpp"
#include "memopt/evaluate.hpp"
#include "memopt/features.hpp"
#include "memopt/gbqr.hpp"
#include "memopt/hpo.hpp"
#include "memopt/orchestrator.hpp"
#include "memopt/predictor.hpp"
#include "memopt/trace.hpp"

#ifndef MEMOPT_VERSION
#define MEMOPT_VERSION "0.0.0-dev"
#endif

namespace memopt::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Logging.

enum class LogLevel { error = 0, warn = 1, info = 2, debug = 3 };

inline LogLevel& log_level() {
  static LogLevel level = LogLevel::info;
  return level;
}

inline LogLevel log_level_from_name(const std::string& s) {
  if (s == "error") return LogLevel::error;
  if (s == "warn") return LogLevel::warn;
  if (s == "info") return LogLevel::info;
  if (s == "debug") return LogLevel::debug;
  throw Error(Error::Kind::ConfigError, "unknown log level: " + s);
}

inline void log_msg(LogLevel level, const std::string& msg) {
  if (level > log_level()) return;
  static const char* names[] = {"error", "warn", "info", "debug"};
  std::cerr << "[" << names[static_cast<int>(level)] << "] " << msg << "\n";
}

// ---------------------------------------------------------------------------
// Configuration.

struct ToolConfig {
  trace::TraceSchema schema;
  feat::FeatureConfig features;

  double alpha = 0.95;
  double ensemble_safety = 1.2;
  double classifier_threshold_gb = 50.0;
  double classifier_safety = 2.0;
  int classifier_epochs = 20;
  double classifier_l2 = 1e-4;
  gbqr::GbqrParams params_a;
  gbqr::GbqrParams params_b;

  hpo::SearchSpace space = hpo::SearchSpace::defaults();
  double hpo_c = 3.0;
  double inner_train_fraction = 0.8;

  trace::SplitSpec split;

  bool eval_unclipped = false;
  bool eval_snap_bins = false;

  std::string listen = "127.0.0.1:8080";
  double deadline_ms = 100.0;
  std::string decision_log;
  bool fsync_decision_log = false;
  std::map<std::string, std::string> serve_models;  // task_kind -> artifact path

  double oom_fraction = 0.7;
  double target_utilization = 0.8;
  double node_memory_gb = 512.0;
  double node_cpus = 64.0;
  int node_count = 0;  // 0 = auto-size
  double synth_duration_median_s = 900.0;
  double synth_duration_sigma = 0.5;

  ToolConfig() {
    params_a.growth = gbqr::Growth::leaf_wise;
    params_b.growth = gbqr::Growth::level_wise;
  }

  static ToolConfig from_json(const json& j) {
    ToolConfig c;
    if (j.contains("schema")) c.schema = trace::TraceSchema::from_json(j.at("schema"));
    if (j.contains("features")) c.features = feat::FeatureConfig::from_json(j.at("features"));
    if (j.contains("model")) {
      const auto& m = j.at("model");
      c.alpha = m.value("alpha", c.alpha);
      c.ensemble_safety = m.value("safety_factor", c.ensemble_safety);
      if (m.contains("classifier")) {
        const auto& cl = m.at("classifier");
        c.classifier_threshold_gb = cl.value("threshold_gb", c.classifier_threshold_gb);
        c.classifier_safety = cl.value("safety_factor", c.classifier_safety);
        c.classifier_epochs = cl.value("epochs", c.classifier_epochs);
        c.classifier_l2 = cl.value("l2", c.classifier_l2);
      }
      if (m.contains("params_a")) c.params_a = gbqr::GbqrParams::from_json(m.at("params_a"));
      if (m.contains("params_b")) c.params_b = gbqr::GbqrParams::from_json(m.at("params_b"));
    }
    if (j.contains("hpo")) {
      const auto& h = j.at("hpo");
      c.space = hpo::SearchSpace::from_json(h);
      c.hpo_c = h.value("c", c.hpo_c);
      c.inner_train_fraction = h.value("inner_train_fraction", c.inner_train_fraction);
    }
    if (j.contains("split")) c.split = trace::SplitSpec::from_json(j.at("split"));
    if (j.contains("eval")) {
      c.eval_unclipped = j.at("eval").value("unclipped", false);
      c.eval_snap_bins = j.at("eval").value("snap_to_bins", false);
    }
    if (j.contains("serve")) {
      const auto& s = j.at("serve");
      c.listen = s.value("listen", c.listen);
      c.deadline_ms = s.value("deadline_ms", c.deadline_ms);
      c.decision_log = s.value("decision_log", c.decision_log);
      c.fsync_decision_log = s.value("fsync", c.fsync_decision_log);
      if (s.contains("models")) {
        c.serve_models = s.at("models").get<std::map<std::string, std::string>>();
      }
    }
    if (j.contains("sim")) {
      const auto& s = j.at("sim");
      c.oom_fraction = s.value("oom_fraction", c.oom_fraction);
      c.target_utilization = s.value("target_utilization", c.target_utilization);
      c.node_memory_gb = s.value("node_memory_gb", c.node_memory_gb);
      c.node_cpus = s.value("node_cpus", c.node_cpus);
      c.node_count = s.value("node_count", c.node_count);
      c.synth_duration_median_s = s.value("synth_duration_median_s", c.synth_duration_median_s);
      c.synth_duration_sigma = s.value("synth_duration_sigma", c.synth_duration_sigma);
    }
    return c;
  }

  json to_json() const {
    json j;
    j["schema"] = schema.to_json();
    j["features"] = features.to_json();
    j["model"] = {{"alpha", alpha},
                  {"safety_factor", ensemble_safety},
                  {"classifier",
                   {{"threshold_gb", classifier_threshold_gb},
                    {"safety_factor", classifier_safety},
                    {"epochs", classifier_epochs},
                    {"l2", classifier_l2}}},
                  {"params_a", params_a.to_json()},
                  {"params_b", params_b.to_json()}};
    j["hpo"] = {{"c", hpo_c},
                {"n_trials", space.n_trials},
                {"inner_train_fraction", inner_train_fraction},
                {"sampler", space.sampler == hpo::Sampler::random ? "random" : "tpe_lite"}};
    j["split"] = split.to_json();
    j["eval"] = {{"unclipped", eval_unclipped}, {"snap_to_bins", eval_snap_bins}};
    j["serve"] = {{"listen", listen},
                  {"deadline_ms", deadline_ms},
                  {"decision_log", decision_log},
                  {"fsync", fsync_decision_log},
                  {"models", serve_models}};
    j["sim"] = {{"oom_fraction", oom_fraction},
                {"target_utilization", target_utilization},
                {"node_memory_gb", node_memory_gb},
                {"node_cpus", node_cpus},
                {"node_count", node_count},
                {"synth_duration_median_s", synth_duration_median_s},
                {"synth_duration_sigma", synth_duration_sigma}};
    return j;
  }
};

// ---------------------------------------------------------------------------
// Run manifests.

inline std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Error::Kind::IoError, "cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return hash_hex(fnv1a64(ss.str()));
}

struct RunManifest {
  std::string command;
  std::string config_hash;
  std::map<std::string, std::string> input_hashes;
  std::vector<std::string> outputs;
  std::uint64_t seed = 0;
  std::string tool_version = MEMOPT_VERSION;
  double wall_time_s = 0;
  std::string created_utc;
  bool reproduction = false;

  json to_json() const {
    json j;
    j["command"] = command;
    j["config_hash"] = config_hash;
    j["input_hashes"] = input_hashes;
    j["outputs"] = outputs;
    j["seed"] = seed;
    j["tool_version"] = tool_version;
    j["wall_time_s"] = wall_time_s;
    j["created_utc"] = created_utc;
    j["reproduction"] = reproduction;
    return j;
  }
};

inline void write_json_file(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Error::Kind::IoError, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Error::Kind::IoError, "cannot read " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw Error(Error::Kind::ParseError, path + ": " + e.what());
  }
  return j;
}

inline void finalize_manifest(RunManifest& m, const std::string& out_dir,
                              std::chrono::steady_clock::time_point t0) {
  m.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto now = std::chrono::system_clock::now();
  m.created_utc = format_iso_utc(
      std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch()).count());
  const fs::path path = fs::path(out_dir) / (m.command + ".manifest.json");
  if (fs::exists(path)) {
    try {
      const json prev = read_json_file(path.string());
      if (prev.value("config_hash", std::string()) == m.config_hash &&
          prev.value("input_hashes", json::object()) == json(m.input_hashes)) {
        m.reproduction = true;
      }
    } catch (const std::exception&) {
      // Unreadable previous manifest: treat as a fresh run.
    }
  }
  write_json_file(path, m.to_json());
}

// ---------------------------------------------------------------------------
// Shared helpers.

struct GlobalOpts {
  std::string config_path;
  std::uint64_t seed = 42;
  std::string out_dir = "out";
  std::string log_level = "info";
  bool json_out = false;
  ToolConfig cfg;
};

inline void emit_summary(const GlobalOpts& g, const json& summary, const std::string& human) {
  if (g.json_out) {
    std::cout << summary.dump(2) << "\n";
  } else if (!human.empty()) {
    std::cout << human;
  }
}

inline std::pair<std::string, int> parse_listen(const std::string& listen) {
  const auto pos = listen.rfind(':');
  if (pos == std::string::npos) {
    throw Error(Error::Kind::ConfigError, "listen must be host:port, got " + listen);
  }
  const auto port = parse_int(listen.substr(pos + 1));
  if (!port || *port < 0 || *port > 65535) {
    throw Error(Error::Kind::ConfigError, "bad port in " + listen);
  }
  return {listen.substr(0, pos), static_cast<int>(*port)};
}

// Decisions for every record of a dataset, plus the serving-equivalent
// attribute map per row (what the orchestrator would have been sent).
struct OfflineDecisions {
  std::vector<predictor::RefinementDecision> decisions;
  std::vector<std::map<std::string, std::string>> attributes;
  std::string strategy;
  double safety_factor = 1.0;
};

inline feat::FeatureConfig feature_config_from_envelope(const json& envelope,
                                                        const feat::FeatureConfig& fallback) {
  if (envelope.contains("feature_config")) {
    return feat::FeatureConfig::from_json(envelope.at("feature_config"));
  }
  return fallback;
}

inline OfflineDecisions decide_offline(const json& envelope, const trace::TraceDataset& ds,
                                       const ToolConfig& cfg, bool clip) {
  const std::string kind = envelope.value("kind", std::string());
  const feat::FeatureConfig fcfg = feature_config_from_envelope(envelope, cfg.features);
  const auto rows = feat::engineer_rows(ds, fcfg);

  OfflineDecisions out;
  out.strategy = kind;
  out.decisions.reserve(rows.size());
  out.attributes.reserve(rows.size());

  if (kind == "ensemble") {
    const auto ens = predictor::ensemble_from_json(envelope);
    out.safety_factor = ens.safety_factor;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const std::string task_id = "row-" + std::to_string(i);
      auto d = predictor::ensemble_refine(ens, rows[i], ds.records[i].baseline_assigned_gb,
                                          task_id, clip);
      out.decisions.push_back(std::move(d));
      out.attributes.push_back(feat::serving_attributes(rows[i], ds.records[i].time));
    }
  } else if (kind == "classifier") {
    const auto clf = predictor::classifier_from_json(envelope);
    out.safety_factor = clf.safety_factor;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const std::string task_id = "row-" + std::to_string(i);
      auto d = predictor::classify_refine(clf, rows[i], ds.records[i].baseline_assigned_gb, task_id);
      out.decisions.push_back(std::move(d));
      out.attributes.push_back(feat::serving_attributes(rows[i], ds.records[i].time));
    }
  } else {
    throw Error(Error::Kind::ArtifactInvalid, "unknown model kind: " + kind);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands.

inline int cmd_ingest(const GlobalOpts& g, const std::vector<std::string>& inputs) {
  const auto t0 = std::chrono::steady_clock::now();
  RunManifest manifest;
  manifest.command = "ingest";
  manifest.seed = g.seed;
  manifest.config_hash = hash_hex(fnv1a64(g.cfg.to_json().dump()));

  trace::TraceDataset merged;
  trace::ParseSummary total;
  for (const auto& path : inputs) {
    manifest.input_hashes[path] = file_hash(path);
    trace::ParseSummary summary;
    auto ds = trace::parse_trace_file(path, g.cfg.schema, &summary);
    total.rows_read += summary.rows_read;
    total.rows_kept += summary.rows_kept;
    total.rows_dropped += summary.rows_dropped;
    total.zero_rss_flagged += summary.zero_rss_flagged;
    for (const auto& [k, v] : summary.reasons) total.reasons[k] += v;
    merged.source_files.push_back(path);
    merged.records.insert(merged.records.end(), ds.records.begin(), ds.records.end());
  }
  std::stable_sort(merged.records.begin(), merged.records.end(),
                   [](const trace::BuildRecord& a, const trace::BuildRecord& b) {
                     return a.time < b.time;
                   });

  fs::create_directories(g.out_dir);
  const fs::path dataset_path = fs::path(g.out_dir) / "dataset.csv";
  {
    std::ofstream out(dataset_path, std::ios::binary);
    trace::write_canonical_csv(merged, out);
  }
  const fs::path summary_path = fs::path(g.out_dir) / "parse_summary.json";
  write_json_file(summary_path, total.to_json());
  manifest.outputs = {dataset_path.string(), summary_path.string()};
  finalize_manifest(manifest, g.out_dir, t0);

  json summary = total.to_json();
  summary["dataset"] = dataset_path.string();
  summary["dataset_hash"] = trace::dataset_hash(merged);
  std::ostringstream human;
  human << "ingested " << total.rows_kept << "/" << total.rows_read << " rows ("
        << total.rows_dropped << " dropped) -> " << dataset_path.string() << "\n";
  emit_summary(g, summary, human.str());
  return 0;
}

inline int cmd_split(const GlobalOpts& g, const std::string& dataset_path) {
  const auto t0 = std::chrono::steady_clock::now();
  RunManifest manifest;
  manifest.command = "split";
  manifest.seed = g.seed;
  manifest.config_hash = hash_hex(fnv1a64(g.cfg.to_json().dump()));
  manifest.input_hashes[dataset_path] = file_hash(dataset_path);

  const auto ds = trace::parse_trace_file(dataset_path, g.cfg.schema);
  trace::SplitSpec spec = g.cfg.split;
  if (spec.mode == trace::SplitMode::seeded_random && spec.seed == 0) spec.seed = g.seed;
  const auto [train, test] = trace::split(ds, spec);

  fs::create_directories(g.out_dir);
  const fs::path train_path = fs::path(g.out_dir) / "train.csv";
  const fs::path test_path = fs::path(g.out_dir) / "test.csv";
  {
    std::ofstream out(train_path, std::ios::binary);
    trace::write_canonical_csv(train, out);
  }
  {
    std::ofstream out(test_path, std::ios::binary);
    trace::write_canonical_csv(test, out);
  }
  manifest.outputs = {train_path.string(), test_path.string()};
  finalize_manifest(manifest, g.out_dir, t0);

  json summary;
  summary["train_rows"] = train.records.size();
  summary["test_rows"] = test.records.size();
  summary["train"] = train_path.string();
  summary["test"] = test_path.string();
  summary["spec"] = spec.to_json();
  std::ostringstream human;
  human << "split " << ds.records.size() << " rows into " << train.records.size() << " train / "
        << test.records.size() << " test\n";
  emit_summary(g, summary, human.str());
  return 0;
}

inline int cmd_tune(const GlobalOpts& g, const std::string& train_path, int n_trials, double c,
                    const std::string& sampler_name) {
  const auto t0 = std::chrono::steady_clock::now();
  RunManifest manifest;
  manifest.command = "tune";
  manifest.seed = g.seed;
  manifest.config_hash = hash_hex(fnv1a64(g.cfg.to_json().dump()));
  manifest.input_hashes[train_path] = file_hash(train_path);

  const auto ds = trace::parse_trace_file(train_path, g.cfg.schema);
  const auto rows = feat::engineer_rows(ds, g.cfg.features);
  const auto encoder = feat::fit_encoder(rows, feat::FeatureSet::ensemble_table1);
  const auto matrix = feat::transform(rows, encoder);

  hpo::SearchSpace space = g.cfg.space;
  if (n_trials > 0) space.n_trials = n_trials;
  space.seed = mix_seed(g.seed, 0xA11CE);
  if (!sampler_name.empty()) {
    space.sampler = sampler_name == "tpe_lite" ? hpo::Sampler::tpe_lite : hpo::Sampler::random;
  }
  gbqr::GbqrParams template_a = g.cfg.params_a;
  gbqr::GbqrParams template_b = g.cfg.params_b;
  template_a.quantile_alpha = g.cfg.alpha;
  template_b.quantile_alpha = g.cfg.alpha;

  trace::SplitSpec inner;
  inner.train_fraction = g.cfg.inner_train_fraction;
  inner.mode = trace::SplitMode::chronological;

  fs::create_directories(g.out_dir);
  const fs::path log_path = fs::path(g.out_dir) / "trials.jsonl";
  std::ofstream log_out(log_path, std::ios::binary);
  const auto result = hpo::search(matrix, space, c, inner, template_a, template_b, &log_out);
  log_out.close();

  const fs::path best_path = fs::path(g.out_dir) / "best_params.json";
  json best;
  best["trial_id"] = result.best.trial_id;
  best["cost"] = result.best.cost;
  best["underalloc_count"] = result.best.underalloc_count;
  best["alloc_ratio"] = result.best.alloc_ratio;
  best["c"] = c;
  best["params_a"] = result.best.params_a.to_json();
  best["params_b"] = result.best.params_b.to_json();
  write_json_file(best_path, best);
  manifest.outputs = {log_path.string(), best_path.string()};
  finalize_manifest(manifest, g.out_dir, t0);

  json summary = best;
  summary["trials"] = result.log.size();
  summary["trial_log"] = log_path.string();
  std::ostringstream human;
  human << "tuned " << result.log.size() << " trials; best cost " << format_double(result.best.cost)
        << " (trial " << result.best.trial_id << ", under=" << result.best.underalloc_count
        << ", ratio=" << format_double(result.best.alloc_ratio) << ")\n";
  emit_summary(g, summary, human.str());
  return 0;
}

inline int cmd_train(const GlobalOpts& g, const std::string& train_path,
                     const std::string& strategy, const std::string& params_path) {
  const auto t0 = std::chrono::steady_clock::now();
  RunManifest manifest;
  manifest.command = "train";
  manifest.seed = g.seed;
  manifest.config_hash = hash_hex(fnv1a64(g.cfg.to_json().dump()));
  manifest.input_hashes[train_path] = file_hash(train_path);

  const auto ds = trace::parse_trace_file(train_path, g.cfg.schema);
  const auto rows = feat::engineer_rows(ds, g.cfg.features);

  json envelope;
  if (strategy == "ensemble") {
    gbqr::GbqrParams pa = g.cfg.params_a;
    gbqr::GbqrParams pb = g.cfg.params_b;
    pa.quantile_alpha = g.cfg.alpha;
    pb.quantile_alpha = g.cfg.alpha;
    pa.seed = mix_seed(g.seed, 1);
    pb.seed = mix_seed(g.seed, 2);
    if (!params_path.empty()) {
      manifest.input_hashes[params_path] = file_hash(params_path);
      const json best = read_json_file(params_path);
      pa = gbqr::GbqrParams::from_json(best.at("params_a"));
      pb = gbqr::GbqrParams::from_json(best.at("params_b"));
    }
    const auto encoder = feat::fit_encoder(rows, feat::FeatureSet::ensemble_table1);
    const auto matrix = feat::transform(rows, encoder);
    auto ens = predictor::train_ensemble(matrix, encoder, pa, pb, g.cfg.ensemble_safety);
    ens.meta.split_spec = g.cfg.split.to_json();
    if (!params_path.empty()) {
      ens.meta.cost_at_selection = read_json_file(params_path).value("cost", 0.0);
    }
    ens.meta.smoke_row = feat::serving_attributes(rows.front(), ds.records.front().time);
    envelope = predictor::ensemble_to_json(ens);
  } else if (strategy == "classifier") {
    const auto encoder = feat::fit_encoder(rows, feat::FeatureSet::classifier_table1);
    const auto matrix = feat::transform(rows, encoder);
    auto clf = predictor::train_classifier(matrix, encoder, g.cfg.classifier_threshold_gb,
                                           g.cfg.classifier_epochs, g.cfg.classifier_safety,
                                           g.cfg.classifier_l2, mix_seed(g.seed, 3));
    clf.meta.split_spec = g.cfg.split.to_json();
    clf.meta.smoke_row = feat::serving_attributes(rows.front(), ds.records.front().time);
    envelope = predictor::classifier_to_json(clf);
  } else {
    throw Error(Error::Kind::ConfigError, "strategy must be ensemble or classifier");
  }
  envelope["feature_config"] = g.cfg.features.to_json();

  fs::create_directories(g.out_dir);
  const fs::path model_path = fs::path(g.out_dir) / ("model_" + strategy + ".json");
  write_json_file(model_path, envelope);
  manifest.outputs = {model_path.string()};

  if (strategy == "ensemble") {
    // Top-20 feature terms per submodel by split gain.
    json imp;
    for (const char* key : {"submodel_a", "submodel_b"}) {
      const auto model = gbqr::model_from_json(envelope.at(key));
      json top = json::array();
      for (const auto& [name, e] : gbqr::importance(model).top(20)) {
        top.push_back({{"feature", name}, {"gain_sum", e.gain_sum}, {"split_count", e.split_count}});
      }
      imp[key] = std::move(top);
    }
    const fs::path imp_path = fs::path(g.out_dir) / "feature_importance.json";
    write_json_file(imp_path, imp);
    manifest.outputs.push_back(imp_path.string());
  }
  finalize_manifest(manifest, g.out_dir, t0);

  json summary;
  summary["model"] = model_path.string();
  summary["strategy"] = strategy;
  summary["train_rows"] = ds.records.size();
  summary["data_hash"] = envelope.at("training_meta").value("data_hash", std::string());
  std::ostringstream human;
  human << "trained " << strategy << " on " << ds.records.size() << " rows -> "
        << model_path.string() << "\n";
  emit_summary(g, summary, human.str());
  return 0;
}

inline int cmd_eval(const GlobalOpts& g, const std::string& model_path,
                    const std::string& test_path, bool unclipped, bool snap_bins) {
  const auto t0 = std::chrono::steady_clock::now();
  RunManifest manifest;
  manifest.command = "eval";
  manifest.seed = g.seed;
  manifest.config_hash = hash_hex(fnv1a64(g.cfg.to_json().dump()));
  manifest.input_hashes[model_path] = file_hash(model_path);
  manifest.input_hashes[test_path] = file_hash(test_path);

  const json envelope = read_json_file(model_path);
  const auto ds = trace::parse_trace_file(test_path, g.cfg.schema);
  auto offline = decide_offline(envelope, ds, g.cfg, /*clip=*/!unclipped);

  if (snap_bins) {
    const auto& bins = g.cfg.schema.baseline_bins_gb.empty() ? std::vector<double>{}
                                                             : g.cfg.schema.baseline_bins_gb;
    if (bins.empty()) {
      throw Error(Error::Kind::ConfigError, "snap_to_bins enabled but no baseline_bins_gb configured");
    }
    for (auto& d : offline.decisions) {
      const auto snapped = predictor::snap_to_bins(d.final_gb, bins);
      // Snapping rounds up; the production clip still applies.
      d.final_gb = std::min(snapped.gb, d.original_gb);
    }
  }

  auto report = eval::evaluate_strategy(ds, offline.decisions, offline.safety_factor,
                                        offline.strategy);
  bool have_durations = false;
  for (const auto& r : ds.records) {
    if (r.duration_s) {
      have_durations = true;
      break;
    }
  }
  eval::GbhTimeline gbh;
  if (have_durations) gbh = eval::gbh_timeline(offline.decisions, ds.records);

  fs::create_directories(g.out_dir);
  const fs::path report_path = fs::path(g.out_dir) / "report.json";
  json report_json = report.to_json();
  report_json["clipped"] = !unclipped;
  if (have_durations) {
    report_json["gbh"] = {{"total_gbh", gbh.total_gbh},
                          {"excluded_no_duration", gbh.excluded_no_duration}};
  } else {
    report_json["gbh"] = {{"notice", "no duration column in dataset; GB·h analysis skipped"}};
  }
  write_json_file(report_path, report_json);

  const fs::path decisions_path = fs::path(g.out_dir) / "decisions.jsonl";
  {
    std::ofstream out(decisions_path, std::ios::binary);
    for (std::size_t i = 0; i < offline.decisions.size(); ++i) {
      json line;
      line["attributes"] = offline.attributes[i];
      line["original_gb"] = ds.records[i].baseline_assigned_gb;
      line["decision"] = offline.decisions[i].to_json();
      out << line.dump() << "\n";
    }
  }

  const std::string plots_dir = (fs::path(g.out_dir) / "plots").string();
  auto written = eval::emit_plot_data(report, ds, have_durations ? &gbh : nullptr, plots_dir);

  manifest.outputs = {report_path.string(), decisions_path.string()};
  manifest.outputs.insert(manifest.outputs.end(), written.begin(), written.end());
  finalize_manifest(manifest, g.out_dir, t0);

  json summary;
  summary["report"] = report_path.string();
  summary["well_share_baseline"] = report.baseline.shares.share(eval::AllocationClass::well);
  summary["well_share_refined"] = report.refined.shares.share(eval::AllocationClass::well);
  summary["underalloc_rate_refined"] = report.refined.savings.underalloc_rate;
  summary["mean_savings_gb"] = report.refined.savings.mean_gb;
  if (have_durations) summary["total_gbh_savings"] = gbh.total_gbh;
  std::ostringstream human;
  human << "Population share by memory allocation class\n"
        << eval::render_share_table(report) << "mean savings "
        << format_double(report.refined.savings.mean_gb) << " GB/build (sigma "
        << format_double(report.refined.savings.sigma_gb) << "), under-allocation rate "
        << format_double(100.0 * report.refined.savings.underalloc_rate) << "%\n";
  if (have_durations) {
    human << "cumulative savings " << format_double(gbh.total_gbh) << " GB·h\n";
  }
  emit_summary(g, summary, human.str());
  return 0;
}

namespace detail {

inline volatile std::sig_atomic_t g_stop_requested = 0;
inline void handle_stop_signal(int) { g_stop_requested = 1; }

}  // namespace detail

inline int cmd_serve(const GlobalOpts& g, const std::map<std::string, std::string>& models,
                     const std::string& listen, double deadline_ms,
                     const std::string& decision_log, double max_runtime_s) {
  const auto t0 = std::chrono::steady_clock::now();
  RunManifest manifest;
  manifest.command = "serve";
  manifest.seed = g.seed;
  manifest.config_hash = hash_hex(fnv1a64(g.cfg.to_json().dump()));

  serve::ServiceConfig scfg;
  scfg.deadline_ms = deadline_ms;
  scfg.decision_log_path = decision_log;
  scfg.fsync_decision_log = g.cfg.fsync_decision_log;
  scfg.features = g.cfg.features;
  serve::RefineService service(scfg);

  for (const auto& [kind, path] : models) {
    manifest.input_hashes[path] = file_hash(path);
    service.register_artifact_file(kind, path);
    log_msg(LogLevel::info, "registered handler '" + kind + "' from " + path);
  }

  const auto [host, port] = parse_listen(listen);
  serve::HttpServer server(service);
  const int bound = server.start(host, port);
  log_msg(LogLevel::info, "serving on " + host + ":" + std::to_string(bound));
  if (g.json_out) {
    std::cout << json{{"listening", host + ":" + std::to_string(bound)}}.dump() << "\n"
              << std::flush;
  }

  detail::g_stop_requested = 0;
  std::signal(SIGINT, detail::handle_stop_signal);
  std::signal(SIGTERM, detail::handle_stop_signal);
  while (!detail::g_stop_requested) {
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    if (max_runtime_s > 0 &&
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() >=
            max_runtime_s) {
      break;
    }
  }
  server.stop();  // flushes the decision log
  if (!decision_log.empty()) manifest.outputs.push_back(decision_log);
  finalize_manifest(manifest, g.out_dir, t0);
  log_msg(LogLevel::info, "shutdown complete; refine_total=" + std::to_string(service.refine_total()));
  return 0;
}

inline int cmd_simulate(const GlobalOpts& g, const std::string& dataset_path,
                        const std::string& model_path, const std::string& scenario_path) {
  const auto t0 = std::chrono::steady_clock::now();
  RunManifest manifest;
  manifest.command = "simulate";
  manifest.seed = g.seed;
  manifest.config_hash = hash_hex(fnv1a64(g.cfg.to_json().dump()));
  manifest.input_hashes[dataset_path] = file_hash(dataset_path);
  manifest.input_hashes[model_path] = file_hash(model_path);

  ToolConfig cfg = g.cfg;
  std::uint64_t sim_seed = g.seed;
  std::vector<sim::SimNode> nodes;
  if (!scenario_path.empty()) {
    manifest.input_hashes[scenario_path] = file_hash(scenario_path);
    const json sc = read_json_file(scenario_path);
    if (sc.contains("seed")) sim_seed = sc.at("seed").get<std::uint64_t>();
    if (sc.contains("oom_fraction")) cfg.oom_fraction = sc.at("oom_fraction").get<double>();
    if (sc.contains("node_count")) cfg.node_count = sc.at("node_count").get<int>();
    if (sc.contains("node_memory_gb")) cfg.node_memory_gb = sc.at("node_memory_gb").get<double>();
    if (sc.contains("target_utilization")) {
      cfg.target_utilization = sc.at("target_utilization").get<double>();
    }
    if (sc.contains("nodes")) {
      for (const auto& n : sc.at("nodes")) {
        nodes.push_back({n.at("node_id").get<std::string>(), n.at("memory_capacity_gb").get<double>(),
                         n.value("cpu_capacity", 64.0)});
      }
    }
  }

  const json envelope = read_json_file(model_path);
  const auto ds = trace::parse_trace_file(dataset_path, g.cfg.schema);
  const auto offline = decide_offline(envelope, ds, g.cfg, /*clip=*/true);

  // Build the task list. Durations missing from the trace are sampled from a
  // configured lognormal and the outputs are labeled synthetic.
  Rng dur_rng(mix_seed(sim_seed, 0xD0));
  bool synthetic_durations = false;
  std::vector<sim::TaskInput> tasks;
  tasks.reserve(ds.records.size());
  const std::int64_t t_min = ds.records.empty() ? 0 : ds.records.front().time;
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& rec = ds.records[i];
    sim::TaskInput task;
    task.task_id = "row-" + std::to_string(i);
    task.submit_time = static_cast<double>(rec.time - t_min);
    if (rec.duration_s) {
      task.duration = *rec.duration_s;
    } else {
      synthetic_durations = true;
      task.duration = cfg.synth_duration_median_s *
                      std::exp(dur_rng.normal(0.0, cfg.synth_duration_sigma));
    }
    task.true_peak_gb = rec.max_rss_gb();
    task.baseline_gb = rec.baseline_assigned_gb;
    task.refined_gb = offline.decisions[i].final_gb;
    tasks.push_back(task);
  }

  if (nodes.empty()) {
    if (cfg.node_count > 0) {
      for (int i = 0; i < cfg.node_count; ++i) {
        nodes.push_back({"node-" + std::to_string(i), cfg.node_memory_gb, cfg.node_cpus});
      }
    } else {
      // Auto-size: peak concurrent baseline demand (ignoring queueing) over
      // target utilization.
      std::vector<std::pair<double, double>> deltas;
      for (const auto& t : tasks) {
        deltas.push_back({t.submit_time, t.baseline_gb});
        deltas.push_back({t.submit_time + t.duration, -t.baseline_gb});
      }
      std::sort(deltas.begin(), deltas.end());
      double cur = 0, peak = 0;
      for (const auto& [time, d] : deltas) {
        cur += d;
        peak = std::max(peak, cur);
      }
      const double fleet_mem = std::max(cfg.node_memory_gb, peak / cfg.target_utilization);
      const int count = std::max(1, static_cast<int>(std::ceil(fleet_mem / cfg.node_memory_gb)));
      for (int i = 0; i < count; ++i) {
        nodes.push_back({"node-" + std::to_string(i), cfg.node_memory_gb, cfg.node_cpus});
      }
    }
  }
  log_msg(LogLevel::info, "fleet: " + std::to_string(nodes.size()) + " nodes x " +
                              format_double(nodes.front().memory_capacity_gb) + " GB");

  const auto result = sim::compare(tasks, nodes, cfg.oom_fraction);

  fs::create_directories(g.out_dir);
  const fs::path cmp_path = fs::path(g.out_dir) / "compare.json";
  json cmp;
  cmp["baseline"] = result.baseline.to_json();
  cmp["refined"] = result.refined.to_json();
  cmp["delta"] = result.delta();
  cmp["nodes"] = nodes.size();
  cmp["node_memory_gb"] = nodes.front().memory_capacity_gb;
  cmp["oom_fraction"] = cfg.oom_fraction;
  cmp["synthetic_durations"] = synthetic_durations;
  write_json_file(cmp_path, cmp);

  const fs::path ev_b = fs::path(g.out_dir) / "events_baseline.csv";
  const fs::path ev_r = fs::path(g.out_dir) / "events_refined.csv";
  {
    std::ofstream out(ev_b, std::ios::binary);
    sim::write_event_csv(result.baseline, out);
  }
  {
    std::ofstream out(ev_r, std::ios::binary);
    sim::write_event_csv(result.refined, out);
  }
  manifest.outputs = {cmp_path.string(), ev_b.string(), ev_r.string()};
  finalize_manifest(manifest, g.out_dir, t0);

  json summary = cmp["delta"];
  summary["compare"] = cmp_path.string();
  summary["synthetic_durations"] = synthetic_durations;
  std::ostringstream human;
  human << "simulated " << tasks.size() << " tasks on " << nodes.size() << " nodes\n"
        << "  baseline: oom_rate=" << format_double(result.baseline.agg.oom_task_rate)
        << " mean_wait=" << format_double(result.baseline.agg.mean_wait_s) << "s\n"
        << "  refined:  oom_rate=" << format_double(result.refined.agg.oom_task_rate)
        << " mean_wait=" << format_double(result.refined.agg.mean_wait_s) << "s\n"
        << "  realized savings " << format_double(result.delta()["realized_gbh_savings"].get<double>())
        << " GB·h\n";
  emit_summary(g, summary, human.str());
  return 0;
}

inline int cmd_report(const GlobalOpts& g, const std::string& dataset_path) {
  const auto t0 = std::chrono::steady_clock::now();
  RunManifest manifest;
  manifest.command = "report";
  manifest.seed = g.seed;
  manifest.config_hash = hash_hex(fnv1a64(g.cfg.to_json().dump()));
  manifest.input_hashes[dataset_path] = file_hash(dataset_path);

  const auto ds = trace::parse_trace_file(dataset_path, g.cfg.schema);
  const auto stats = trace::baseline_stats(ds);

  fs::create_directories(g.out_dir);
  const fs::path stats_path = fs::path(g.out_dir) / "baseline_stats.json";
  write_json_file(stats_path, stats.to_json());

  const fs::path hist_path = fs::path(g.out_dir) / "unused_memory_hist.csv";
  {
    std::ofstream out(hist_path, std::ios::binary);
    out << "bucket_lo_pct,bucket_hi_pct,count\n";
    std::array<std::int64_t, 20> hist{};
    for (const auto& rec : ds.records) {
      if (trace::baseline_underallocated(rec)) continue;
      const double unused =
          100.0 * (rec.baseline_assigned_gb - rec.max_rss_gb()) / rec.baseline_assigned_gb;
      hist[static_cast<std::size_t>(std::clamp(static_cast<int>(unused / 5.0), 0, 19))]++;
    }
    for (int b = 0; b < 20; ++b) {
      out << b * 5 << "," << (b + 1) * 5 << "," << hist[static_cast<std::size_t>(b)] << "\n";
    }
  }
  manifest.outputs = {stats_path.string(), hist_path.string()};
  finalize_manifest(manifest, g.out_dir, t0);

  std::ostringstream human;
  human << "rows " << stats.rows << ", bins " << stats.bin_count << ", median unused "
        << format_double(stats.median_unused_pct) << "%, under-allocation rate "
        << format_double(100.0 * stats.underalloc_rate) << "%\n";
  emit_summary(g, stats.to_json(), human.str());
  return 0;
}

// ---------------------------------------------------------------------------
// Argument wiring.

inline std::optional<std::string> env_var(const char* name) {
  const char* v = std::getenv(name);
  if (v && *v) return std::string(v);
  return std::nullopt;
}

inline int run_cli(std::vector<std::string> args) {
  GlobalOpts g;

  // Pre-scan for --config so file values become the defaults flags override.
  if (auto v = env_var("MEMOPT_CONFIG")) g.config_path = *v;
  for (std::size_t i = 0; i + 1 < args.size(); ++i) {
    if (args[i] == "--config") g.config_path = args[i + 1];
  }
  if (!g.config_path.empty()) {
    g.cfg = ToolConfig::from_json(read_json_file(g.config_path));
  }
  if (auto v = env_var("MEMOPT_SEED")) {
    if (auto n = parse_int(*v)) g.seed = static_cast<std::uint64_t>(*n);
  }
  if (auto v = env_var("MEMOPT_OUT_DIR")) g.out_dir = *v;
  if (auto v = env_var("MEMOPT_LOG_LEVEL")) g.log_level = *v;
  if (auto v = env_var("MEMOPT_LISTEN")) g.cfg.listen = *v;
  if (auto v = env_var("MEMOPT_DEADLINE_MS")) {
    if (auto n = parse_double(*v)) g.cfg.deadline_ms = *n;
  }
  if (auto v = env_var("MEMOPT_DECISION_LOG")) g.cfg.decision_log = *v;

  CLI::App app{"CI build memory prediction and refinement toolkit"};
  app.set_version_flag("--version", std::string(MEMOPT_VERSION));
  app.add_option("--config", g.config_path, "Config file (JSON)");
  app.add_option("--seed", g.seed, "Global seed; all randomness derives from it");
  app.add_option("--out-dir", g.out_dir, "Output directory");
  app.add_option("--log-level", g.log_level, "error|warn|info|debug");
  app.add_flag("--json", g.json_out, "Machine-readable stdout");
  app.require_subcommand(1);

  std::vector<std::string> ingest_inputs;
  auto* ingest = app.add_subcommand("ingest", "Parse trace exports into a dataset artifact");
  ingest->add_option("--input", ingest_inputs, "Trace CSV file(s)")->required();

  std::string split_dataset;
  double split_fraction = -1;
  std::string split_mode;
  auto* split_cmd = app.add_subcommand("split", "Produce disjoint train/test artifacts");
  split_cmd->add_option("--dataset", split_dataset, "Dataset CSV")->required();
  split_cmd->add_option("--train-fraction", split_fraction, "Train fraction (default 0.6)");
  split_cmd->add_option("--mode", split_mode, "chronological|seeded_random");

  std::string tune_train;
  int tune_trials = 0;
  double tune_c = -1;
  std::string tune_sampler;
  auto* tune = app.add_subcommand("tune", "Hyperparameter search for the ensemble");
  tune->add_option("--train", tune_train, "Training CSV")->required();
  tune->add_option("--trials", tune_trials, "Number of trials");
  tune->add_option("--c", tune_c, "Under-allocation weight in the cost (default 3)");
  tune->add_option("--sampler", tune_sampler, "random|tpe_lite");

  std::string train_train, train_strategy = "ensemble", train_params;
  auto* train = app.add_subcommand("train", "Train a model envelope");
  train->add_option("--train", train_train, "Training CSV")->required();
  train->add_option("--strategy", train_strategy, "ensemble|classifier");
  train->add_option("--params", train_params, "best_params.json from tune");

  std::string eval_model, eval_test;
  bool eval_unclipped = false, eval_snap = false;
  auto* eval_cmd = app.add_subcommand("eval", "Offline evaluation against a test artifact");
  eval_cmd->add_option("--model", eval_model, "Model envelope JSON")->required();
  eval_cmd->add_option("--test", eval_test, "Test CSV")->required();
  eval_cmd->add_flag("--unclipped", eval_unclipped, "Report raw safeguarded output (analysis only)");
  eval_cmd->add_flag("--snap-bins", eval_snap, "Snap assignments to the configured bin table");

  std::vector<std::string> serve_models_kv;
  std::string serve_listen;
  double serve_deadline = -1;
  std::string serve_log;
  double serve_max_runtime = 0;
  auto* serve_cmd = app.add_subcommand("serve", "Run the refinement orchestrator");
  serve_cmd->add_option("--model", serve_models_kv, "task_kind=artifact.json (repeatable)");
  serve_cmd->add_option("--listen", serve_listen, "host:port (port 0 picks a free one)");
  serve_cmd->add_option("--deadline-ms", serve_deadline, "Per-request deadline");
  serve_cmd->add_option("--decision-log", serve_log, "JSON-lines decision log path");
  serve_cmd->add_option("--max-runtime-s", serve_max_runtime, "Stop after N seconds (0 = run until signal)");

  std::string sim_dataset, sim_model, sim_scenario;
  auto* sim_cmd = app.add_subcommand("simulate", "Trace replay through the offer-matching scheduler");
  sim_cmd->add_option("--dataset", sim_dataset, "Dataset CSV (typically the test split)")->required();
  sim_cmd->add_option("--model", sim_model, "Model envelope JSON")->required();
  sim_cmd->add_option("--scenario", sim_scenario, "Scenario JSON (nodes, oom_fraction)");

  std::string report_dataset;
  auto* report_cmd = app.add_subcommand("report", "Baseline allocation statistics for a dataset");
  report_cmd->add_option("--dataset", report_dataset, "Dataset CSV")->required();

  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("memopt");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    log_level() = log_level_from_name(g.log_level);
    if (split_fraction > 0) g.cfg.split.train_fraction = split_fraction;
    if (!split_mode.empty()) {
      g.cfg.split.mode = split_mode == "seeded_random" ? trace::SplitMode::seeded_random
                                                       : trace::SplitMode::chronological;
    }
    if (app.got_subcommand(ingest)) return cmd_ingest(g, ingest_inputs);
    if (app.got_subcommand(split_cmd)) return cmd_split(g, split_dataset);
    if (app.got_subcommand(tune)) {
      return cmd_tune(g, tune_train, tune_trials, tune_c > 0 ? tune_c : g.cfg.hpo_c, tune_sampler);
    }
    if (app.got_subcommand(train)) return cmd_train(g, train_train, train_strategy, train_params);
    if (app.got_subcommand(eval_cmd)) {
      return cmd_eval(g, eval_model, eval_test, eval_unclipped || g.cfg.eval_unclipped,
                      eval_snap || g.cfg.eval_snap_bins);
    }
    if (app.got_subcommand(serve_cmd)) {
      std::map<std::string, std::string> models = g.cfg.serve_models;
      for (const auto& kv : serve_models_kv) {
        const auto pos = kv.find('=');
        if (pos == std::string::npos) {
          throw Error(Error::Kind::ConfigError, "--model expects task_kind=path, got " + kv);
        }
        models[kv.substr(0, pos)] = kv.substr(pos + 1);
      }
      return cmd_serve(g, models, serve_listen.empty() ? g.cfg.listen : serve_listen,
                       serve_deadline > 0 ? serve_deadline : g.cfg.deadline_ms,
                       serve_log.empty() ? g.cfg.decision_log : serve_log, serve_max_runtime);
    }
    if (app.got_subcommand(sim_cmd)) return cmd_simulate(g, sim_dataset, sim_model, sim_scenario);
    if (app.got_subcommand(report_cmd)) return cmd_report(g, report_dataset);
  } catch (const Error& e) {
    log_msg(LogLevel::error, e.what());
    return 2;
  } catch (const std::exception& e) {
    log_msg(LogLevel::error, std::string("unexpected: ") + e.what());
    return 3;
  }
  return 1;
}

}  // namespace memopt::cli
