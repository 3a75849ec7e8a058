#pragma once

// Build-trace ingestion: parse delimiter-separated exports into validated
// records, normalize units and timestamps, produce deterministic train/test
// splits and the baseline allocation statistics.

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "memopt/common.hpp"
#include "memopt/csv.hpp"

namespace memopt::trace {

using json = nlohmann::json;

constexpr double kBytesPerGb = 1073741824.0;  // 2^30

struct BuildRecord {
  std::int64_t time = 0;  // UTC epoch seconds
  std::string branch;
  std::string build_profile;
  std::int64_t jobs = 1;
  std::string location;
  std::string make_type;
  std::string targets;  // comma-separated target list
  std::int64_t local_jobs = 0;
  std::string component;
  std::int64_t max_rss_bytes = 0;
  std::int64_t memory_fail_count = 0;
  std::int64_t max_memory_usage_bytes = 0;
  double baseline_assigned_gb = 0.0;  // the empirically configured requirement
  std::optional<double> duration_s;   // present only if the export carries it
  bool zero_rss_flag = false;

  double max_rss_gb() const { return static_cast<double>(max_rss_bytes) / kBytesPerGb; }
};

struct TraceDataset {
  std::vector<BuildRecord> records;  // ascending time, stable on ties
  std::vector<std::string> source_files;
  std::string schema_version = "1";
};

struct ParseSummary {
  std::int64_t rows_read = 0;
  std::int64_t rows_kept = 0;
  std::int64_t rows_dropped = 0;
  std::map<std::string, std::int64_t> reasons;
  std::int64_t zero_rss_flagged = 0;

  json to_json() const {
    json j;
    j["rows_read"] = rows_read;
    j["rows_kept"] = rows_kept;
    j["rows_dropped"] = rows_dropped;
    j["reasons"] = reasons;
    j["zero_rss_flagged"] = zero_rss_flagged;
    return j;
  }
};

// Maps logical field names to export header names. Canonical names follow the
// export's own field naming.
struct TraceSchema {
  char delimiter = ',';
  std::map<std::string, std::string> columns = {
      {"time", "time"},
      {"branch", "branch"},
      {"buildProfile", "buildProfile"},
      {"jobs", "jobs"},
      {"location", "location"},
      {"makeType", "makeType"},
      {"targets", "targets"},
      {"localJobs", "localJobs"},
      {"component", "component"},
      {"max_rss", "max_rss"},
      {"memory_fail_count", "memory_fail_count"},
      {"maxMemoryUsageBytes", "maxMemoryUsageBytes"},
  };
  // Optional columns; empty string disables the mapping.
  std::string baseline_column = "baseline_assigned_gb";
  std::string duration_column = "duration_s";
  // Bin table used to reconstruct the baseline when the column is absent:
  // smallest bin >= maxMemoryUsageBytes (in GB).
  std::vector<double> baseline_bins_gb;

  static TraceSchema from_json(const json& j) {
    TraceSchema s;
    if (j.contains("delimiter")) {
      const std::string d = j.at("delimiter").get<std::string>();
      if (d.size() != 1) throw Error(Error::Kind::ConfigError, "schema: delimiter must be one character");
      s.delimiter = d[0];
    }
    if (j.contains("columns")) {
      for (auto& [k, v] : j.at("columns").items()) {
        if (k == "baseline_assigned_gb") s.baseline_column = v.get<std::string>();
        else if (k == "duration_s") s.duration_column = v.get<std::string>();
        else if (s.columns.count(k)) s.columns[k] = v.get<std::string>();
        else throw Error(Error::Kind::ConfigError, "schema: unknown logical column '" + k + "'");
      }
    }
    if (j.contains("baseline_column")) s.baseline_column = j.at("baseline_column").get<std::string>();
    if (j.contains("duration_column")) s.duration_column = j.at("duration_column").get<std::string>();
    if (j.contains("baseline_bins_gb")) s.baseline_bins_gb = j.at("baseline_bins_gb").get<std::vector<double>>();
    return s;
  }

  json to_json() const {
    json j;
    j["delimiter"] = std::string(1, delimiter);
    j["columns"] = columns;
    j["baseline_column"] = baseline_column;
    j["duration_column"] = duration_column;
    j["baseline_bins_gb"] = baseline_bins_gb;
    return j;
  }
};

namespace detail {

inline int find_column(const std::vector<std::string>& header, const std::string& name) {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return static_cast<int>(i);
  }
  return -1;
}

inline double snap_up_gb(double gb, const std::vector<double>& bins) {
  for (double b : bins) {
    if (b >= gb) return b;
  }
  return bins.back();  // overflow: largest bin
}

}  // namespace detail

inline TraceDataset parse_trace(std::istream& in, const TraceSchema& schema,
                                ParseSummary* summary_out = nullptr,
                                const std::string& source_name = "<stream>") {
  csv::Table table = csv::read(in, schema.delimiter);

  std::map<std::string, int> col;
  for (const auto& [logical, header_name] : schema.columns) {
    const int idx = detail::find_column(table.header, header_name);
    if (idx < 0) {
      throw Error(Error::Kind::MissingColumn, "missing column '" + header_name + "' (field " + logical + ")");
    }
    col[logical] = idx;
  }
  int baseline_idx = -1;
  if (!schema.baseline_column.empty()) {
    baseline_idx = detail::find_column(table.header, schema.baseline_column);
  }
  if (baseline_idx < 0 && schema.baseline_bins_gb.empty()) {
    throw Error(Error::Kind::ConfigError,
                "no baseline source: column '" + schema.baseline_column +
                    "' absent and no baseline_bins_gb configured");
  }
  int duration_idx = -1;
  if (!schema.duration_column.empty()) {
    duration_idx = detail::find_column(table.header, schema.duration_column);
  }

  ParseSummary summary;
  TraceDataset ds;
  ds.source_files.push_back(source_name);
  ds.records.reserve(table.rows.size());

  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    summary.rows_read++;
    auto drop = [&](const std::string& reason) {
      summary.rows_dropped++;
      summary.reasons[reason]++;
    };
    auto cell = [&](const std::string& logical) -> const std::string& {
      static const std::string empty;
      const int i = col.at(logical);
      return static_cast<std::size_t>(i) < row.size() ? row[static_cast<std::size_t>(i)] : empty;
    };

    BuildRecord rec;
    const auto ts = parse_timestamp(cell("time"));
    if (!ts) {
      drop("bad_time");
      continue;
    }
    rec.time = *ts;

    const auto rss = parse_int(cell("max_rss"));
    if (!rss || *rss < 0) {
      drop("missing_target");
      continue;
    }
    rec.max_rss_bytes = *rss;
    rec.zero_rss_flag = (*rss == 0);

    bool bad = false;
    auto need_int = [&](const std::string& logical, std::int64_t min_v, const char* reason) {
      const auto v = parse_int(cell(logical));
      if (!v || *v < min_v) {
        drop(reason);
        bad = true;
        return std::int64_t{0};
      }
      return *v;
    };
    rec.jobs = need_int("jobs", 1, "bad_jobs");
    if (bad) continue;
    rec.local_jobs = need_int("localJobs", 0, "bad_localJobs");
    if (bad) continue;
    rec.memory_fail_count = need_int("memory_fail_count", 0, "bad_memory_fail_count");
    if (bad) continue;
    rec.max_memory_usage_bytes = need_int("maxMemoryUsageBytes", 0, "bad_maxMemoryUsageBytes");
    if (bad) continue;

    rec.branch = cell("branch");
    rec.build_profile = cell("buildProfile");
    rec.location = cell("location");
    rec.make_type = cell("makeType");
    rec.targets = cell("targets");
    rec.component = cell("component");

    if (baseline_idx >= 0 && static_cast<std::size_t>(baseline_idx) < row.size()) {
      const auto b = parse_double(row[static_cast<std::size_t>(baseline_idx)]);
      if (b && *b > 0.0) {
        rec.baseline_assigned_gb = *b;
      } else if (!schema.baseline_bins_gb.empty()) {
        rec.baseline_assigned_gb = detail::snap_up_gb(
            static_cast<double>(rec.max_memory_usage_bytes) / kBytesPerGb, schema.baseline_bins_gb);
      } else {
        drop("bad_baseline");
        continue;
      }
    } else {
      rec.baseline_assigned_gb = detail::snap_up_gb(
          static_cast<double>(rec.max_memory_usage_bytes) / kBytesPerGb, schema.baseline_bins_gb);
    }

    if (duration_idx >= 0 && static_cast<std::size_t>(duration_idx) < row.size()) {
      const auto d = parse_double(row[static_cast<std::size_t>(duration_idx)]);
      if (d && *d > 0.0) rec.duration_s = *d;
    }

    if (rec.zero_rss_flag) summary.zero_rss_flagged++;
    summary.rows_kept++;
    ds.records.push_back(std::move(rec));
  }

  if (ds.records.empty()) {
    throw Error(Error::Kind::EmptyDataset, "no valid rows after parsing " + source_name);
  }

  std::stable_sort(ds.records.begin(), ds.records.end(),
                   [](const BuildRecord& a, const BuildRecord& b) { return a.time < b.time; });

  if (summary_out) *summary_out = summary;
  return ds;
}

inline TraceDataset parse_trace_file(const std::string& path, const TraceSchema& schema,
                                     ParseSummary* summary_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Error::Kind::IoError, "cannot open trace file: " + path);
  return parse_trace(in, schema, summary_out, path);
}

// ---------------------------------------------------------------------------
// Splits.

enum class SplitMode { chronological, seeded_random };

struct SplitSpec {
  double train_fraction = 0.6;
  SplitMode mode = SplitMode::chronological;
  std::uint64_t seed = 0;

  static SplitSpec from_json(const json& j) {
    SplitSpec s;
    if (j.contains("train_fraction")) s.train_fraction = j.at("train_fraction").get<double>();
    if (j.contains("mode")) {
      const std::string m = j.at("mode").get<std::string>();
      if (m == "chronological") s.mode = SplitMode::chronological;
      else if (m == "seeded_random") s.mode = SplitMode::seeded_random;
      else throw Error(Error::Kind::ConfigError, "split: unknown mode '" + m + "'");
    }
    if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
    return s;
  }

  json to_json() const {
    json j;
    j["train_fraction"] = train_fraction;
    j["mode"] = mode == SplitMode::chronological ? "chronological" : "seeded_random";
    j["seed"] = seed;
    return j;
  }
};

inline std::pair<TraceDataset, TraceDataset> split(const TraceDataset& ds, const SplitSpec& spec) {
  const std::size_t n = ds.records.size();
  if (n == 0) throw Error(Error::Kind::EmptyDataset, "split: empty dataset");
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
    throw Error(Error::Kind::InvalidParams, "split: train_fraction must be in (0,1)");
  }
  const auto train_n = static_cast<std::size_t>(
      std::ceil(spec.train_fraction * static_cast<double>(n)));
  if (train_n == 0 || train_n >= n) {
    throw Error(Error::Kind::DegenerateSplit,
                "split: one side would be empty (n=" + std::to_string(n) +
                    ", train=" + std::to_string(train_n) + ")");
  }

  std::vector<std::uint32_t> train_idx, test_idx;
  if (spec.mode == SplitMode::chronological) {
    for (std::size_t i = 0; i < n; ++i) {
      (i < train_n ? train_idx : test_idx).push_back(static_cast<std::uint32_t>(i));
    }
  } else {
    std::vector<std::uint32_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = static_cast<std::uint32_t>(i);
    Rng rng(spec.seed);
    rng.shuffle(perm);
    train_idx.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(train_n));
    test_idx.assign(perm.begin() + static_cast<std::ptrdiff_t>(train_n), perm.end());
    // Each side stays in chronological order so rolling features remain valid.
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(test_idx.begin(), test_idx.end());
  }

  auto take = [&](const std::vector<std::uint32_t>& idx) {
    TraceDataset out;
    out.source_files = ds.source_files;
    out.schema_version = ds.schema_version;
    out.records.reserve(idx.size());
    for (auto i : idx) out.records.push_back(ds.records[i]);
    return out;
  };
  return {take(train_idx), take(test_idx)};
}

// ---------------------------------------------------------------------------
// Baseline allocation statistics.

struct BaselineStats {
  std::int64_t rows = 0;
  std::int64_t underallocated = 0;
  double underalloc_rate = 0.0;
  std::int64_t bin_count = 0;
  std::int64_t zero_rss = 0;
  // Distribution of the unused fraction over rows that were not
  // under-allocated (the successfully executed population).
  double median_unused_pct = 0.0;
  std::map<std::string, double> unused_quantiles_pct;  // p5..p95

  json to_json() const {
    json j;
    j["rows"] = rows;
    j["underallocated"] = underallocated;
    j["underalloc_rate"] = underalloc_rate;
    j["bin_count"] = bin_count;
    j["zero_rss"] = zero_rss;
    j["median_unused_pct"] = median_unused_pct;
    j["unused_quantiles_pct"] = unused_quantiles_pct;
    return j;
  }
};

// A record counts as baseline-under-allocated when memory_fail_count > 0 OR
// max_rss_gb > baseline_assigned_gb. The fail-count half of the rule is
// switchable because node-level allocation failures do not necessarily
// originate from the build itself.
inline bool baseline_underallocated(const BuildRecord& r, bool use_fail_count = true) {
  if (use_fail_count && r.memory_fail_count > 0) return true;
  return r.max_rss_gb() > r.baseline_assigned_gb;
}

inline BaselineStats baseline_stats(const TraceDataset& ds, bool use_fail_count = true) {
  if (ds.records.empty()) throw Error(Error::Kind::EmptyDataset, "baseline_stats: empty dataset");
  BaselineStats st;
  st.rows = static_cast<std::int64_t>(ds.records.size());
  std::set<double> bins;
  std::vector<double> unused_ok;
  for (const auto& r : ds.records) {
    bins.insert(r.baseline_assigned_gb);
    if (r.zero_rss_flag) st.zero_rss++;
    if (baseline_underallocated(r, use_fail_count)) {
      st.underallocated++;
    } else {
      unused_ok.push_back((r.baseline_assigned_gb - r.max_rss_gb()) / r.baseline_assigned_gb);
    }
  }
  st.bin_count = static_cast<std::int64_t>(bins.size());
  st.underalloc_rate = static_cast<double>(st.underallocated) / static_cast<double>(st.rows);
  if (!unused_ok.empty()) {
    for (double q : {0.05, 0.25, 0.50, 0.75, 0.95}) {
      char key[8];
      std::snprintf(key, sizeof(key), "p%d", static_cast<int>(q * 100 + 0.5));
      st.unused_quantiles_pct[key] = 100.0 * quantile_linear(unused_ok, q);
    }
    st.median_unused_pct = st.unused_quantiles_pct["p50"];
  }
  return st;
}

// ---------------------------------------------------------------------------
// Canonical CSV re-emission. parse(serialize(ds)) round-trips retained fields
// bit-exact; doubles use shortest round-trip formatting.

inline void write_canonical_csv(const TraceDataset& ds, std::ostream& out) {
  bool any_duration = false;
  for (const auto& r : ds.records) {
    if (r.duration_s) {
      any_duration = true;
      break;
    }
  }
  std::vector<std::string> header = {"time",      "branch",   "buildProfile",
                                     "jobs",      "location", "makeType",
                                     "targets",   "localJobs", "component",
                                     "max_rss",   "memory_fail_count", "maxMemoryUsageBytes",
                                     "baseline_assigned_gb"};
  if (any_duration) header.push_back("duration_s");
  csv::write_record(out, header);
  for (const auto& r : ds.records) {
    std::vector<std::string> row = {
        std::to_string(r.time),
        r.branch,
        r.build_profile,
        std::to_string(r.jobs),
        r.location,
        r.make_type,
        r.targets,
        std::to_string(r.local_jobs),
        r.component,
        std::to_string(r.max_rss_bytes),
        std::to_string(r.memory_fail_count),
        std::to_string(r.max_memory_usage_bytes),
        format_double(r.baseline_assigned_gb),
    };
    if (any_duration) row.push_back(r.duration_s ? format_double(*r.duration_s) : "");
    csv::write_record(out, row);
  }
}

inline std::string canonical_csv_string(const TraceDataset& ds) {
  std::ostringstream out;
  write_canonical_csv(ds, out);
  return out.str();
}

inline std::string dataset_hash(const TraceDataset& ds) {
  return hash_hex(fnv1a64(canonical_csv_string(ds)));
}

}  // namespace memopt::trace
