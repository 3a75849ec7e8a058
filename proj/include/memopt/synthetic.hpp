#pragma once

// Deterministic synthetic build-trace generator for tests and demos. The
// workload mimics a CI build cluster: peak memory depends on component,
// branch, build profile, parallelism and target list, with group-level
// autocorrelation (so lag/rolling features carry signal) and a bin-snapped
// static baseline that over-provisions most tuples and under-provisions a
// small share of them.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "memopt/common.hpp"
#include "memopt/trace.hpp"

namespace memopt::synth {

// The 22 predefined allocation bins (GB) used for the empirical baseline.
inline const std::vector<double>& default_bins_gb() {
  static const std::vector<double> bins = {1,  2,  4,  6,  8,   12,  16,  24,  32,  48,  64,
                                           80, 96, 112, 128, 160, 192, 224, 256, 320, 384, 512};
  return bins;
}

struct SynthConfig {
  int n_rows = 6000;
  std::uint64_t seed = 7;
  std::int64_t start_time = 1704067200;  // 2024-01-01T00:00:00Z
  double mean_interarrival_s = 55.0;
  bool include_duration = true;
  double weekly_drift = 0.05;   // relative amplitude of the weekly cycle
  double ar_sigma = 0.18;       // innovation sd of the per-group AR(1) residual
  double noise_sigma = 0.16;    // iid log-noise sd on the peak
};

namespace detail {

struct ComponentSpec {
  std::string name;
  double base_gb;
};

inline double snap_up(double gb, const std::vector<double>& bins) {
  for (double b : bins) {
    if (b >= gb) return b;
  }
  return bins.back();
}

}  // namespace detail

inline trace::TraceDataset make_trace(const SynthConfig& cfg) {
  const std::vector<std::string> branches = {"main",     "rel-2024.1", "rel-2023.4", "feat-engine",
                                             "feat-ui",  "perf-lab",   "exp-sandbox", "hotfix-urgent"};
  const std::vector<double> branch_mult = {1.0, 0.95, 0.9, 1.15, 0.35, 1.3, 0.5, 0.8};
  const std::vector<detail::ComponentSpec> components = {
      {"core-engine", 38}, {"query-planner", 24}, {"storage", 30},   {"network", 9},
      {"replication", 16}, {"compiler-fe", 21},   {"runtime", 27},   {"tools", 5},
      {"tests-unit", 12},  {"docs", 2},           {"bindings", 7},   {"monitoring", 4}};
  const std::vector<std::string> archs = {"x86_64", "aarch64", "ppc64le"};
  const std::vector<double> arch_mult = {1.0, 0.85, 1.12};
  const std::vector<std::string> compilers = {"gcc12", "gcc13", "clang15"};
  const std::vector<std::string> opts = {"opt", "dbg", "rel"};
  const std::vector<double> opt_mult = {1.0, 1.4, 0.92};
  const std::vector<std::string> locations = {"dc-eu1", "dc-us1", "cloud-az1"};
  const std::vector<std::int64_t> jobs_levels = {8, 16, 32, 64};
  const std::vector<std::string> target_sets = {"all", "dist", "all,dist", "unit,integration",
                                                "all,unit", "docs"};

  Rng rng(cfg.seed);
  trace::TraceDataset ds;
  ds.source_files.push_back("synthetic");
  ds.records.reserve(static_cast<std::size_t>(cfg.n_rows));

  // Static per-tuple over-provision factor, mirroring an empirical bin table
  // that rarely matches actual needs. A small share of tuples is
  // under-provisioned on purpose.
  std::map<std::string, double> tuple_factor;
  std::map<std::string, double> group_residual;

  double t = static_cast<double>(cfg.start_time);
  for (int i = 0; i < cfg.n_rows; ++i) {
    trace::BuildRecord rec;
    const std::size_t bi = static_cast<std::size_t>(rng.uniform_int(0, 7));
    const auto& comp = components[static_cast<std::size_t>(rng.uniform_int(0, 11))];
    const std::size_t ai = static_cast<std::size_t>(rng.uniform_int(0, 2));
    const std::size_t ci = static_cast<std::size_t>(rng.uniform_int(0, 2));
    const std::size_t oi = static_cast<std::size_t>(rng.uniform_int(0, 2));
    const std::size_t li = static_cast<std::size_t>(rng.uniform_int(0, 2));
    const std::int64_t jobs = jobs_levels[static_cast<std::size_t>(rng.uniform_int(0, 3))];
    const std::string targets = target_sets[static_cast<std::size_t>(rng.uniform_int(0, 5))];

    rec.branch = branches[bi];
    rec.component = comp.name;
    rec.build_profile = "linux" + archs[ai] + "-" + compilers[ci] + "-" + opts[oi];
    rec.location = locations[li];
    rec.make_type = opts[oi];
    rec.targets = targets;
    rec.jobs = jobs;
    rec.local_jobs = std::max<std::int64_t>(2, jobs / 4);

    t += -std::log(rng.uniform_real(1e-9, 1.0)) * cfg.mean_interarrival_s;
    rec.time = static_cast<std::int64_t>(t);

    const bool has_dist = rec.targets.find("dist") != std::string::npos;
    double peak = comp.base_gb * branch_mult[bi] * arch_mult[ai] * opt_mult[oi];
    peak *= 1.0 + 0.012 * static_cast<double>(jobs);
    if (has_dist) peak *= 1.5;
    // Weekly drift.
    peak *= 1.0 + cfg.weekly_drift *
                      std::sin(2.0 * 3.14159265358979 * (t - cfg.start_time) / (86400.0 * 7));

    // AR(1) residual per (branch, component) so history features matter.
    const std::string gkey = rec.branch + "|" + rec.component;
    double& resid = group_residual[gkey];
    resid = 0.6 * resid + rng.normal(0.0, cfg.ar_sigma);
    peak *= std::exp(resid + rng.normal(0.0, cfg.noise_sigma));
    peak = std::max(peak, 0.05);

    rec.max_rss_bytes = static_cast<std::int64_t>(peak * trace::kBytesPerGb);
    rec.max_memory_usage_bytes =
        static_cast<std::int64_t>(peak * rng.uniform_real(1.02, 1.15) * trace::kBytesPerGb);

    const std::string tuple = rec.component + "|" + rec.build_profile + "|" + rec.location;
    auto it = tuple_factor.find(tuple);
    if (it == tuple_factor.end()) {
      const double f = rng.uniform_real(0, 1) < 0.07 ? rng.uniform_real(0.55, 0.95)
                                                     : std::exp(rng.normal(0.95, 0.45));
      it = tuple_factor.emplace(tuple, f).first;
    }
    const double typical = comp.base_gb * arch_mult[ai] * opt_mult[oi] * (has_dist ? 1.5 : 1.0) *
                           (1.0 + 0.012 * 32.0);
    rec.baseline_assigned_gb = detail::snap_up(typical * it->second, default_bins_gb());

    const double rss_gb = rec.max_rss_gb();
    if (rss_gb > rec.baseline_assigned_gb) {
      rec.memory_fail_count = 1 + rng.uniform_int(0, 2);
    } else if (rng.uniform_real(0, 1) < 0.01) {
      rec.memory_fail_count = 1;  // node-level noise unrelated to the build
    }

    if (cfg.include_duration) {
      const double base_dur = 900.0 * std::sqrt(comp.base_gb / 16.0);
      double dur = base_dur * std::sqrt(32.0 / static_cast<double>(jobs)) *
                   std::exp(rng.normal(0.0, 0.3));
      rec.duration_s = std::clamp(dur, 90.0, 14400.0);
    }

    ds.records.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace memopt::synth
