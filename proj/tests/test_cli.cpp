#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <thread>

#include <httplib.h>

#include "memopt/cli.hpp"
#include "memopt/synthetic.hpp"

using namespace memopt;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string s(const std::string& rel) const { return (path / rel).string(); }
};

int run_tool(std::initializer_list<std::string> args) {
  return cli::run_cli(std::vector<std::string>(args));
}

void write_sample_trace(const std::string& path, int rows = 500, std::uint64_t seed = 7) {
  synth::SynthConfig cfg;
  cfg.n_rows = rows;
  cfg.seed = seed;
  const auto ds = synth::make_trace(cfg);
  std::ofstream out(path, std::ios::binary);
  trace::write_canonical_csv(ds, out);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small search space so tune stays fast in unit tests.
std::string write_small_config(const TempDir& dir) {
  const json cfg = {
      {"model",
       {{"params_a", {{"quantile_alpha", 0.95}, {"n_trees", 40}, {"learning_rate", 0.15},
                      {"max_leaves", 31}, {"max_depth", 8}, {"min_samples_leaf", 10},
                      {"n_bins", 64}, {"growth", "leaf_wise"}, {"subsample", 1.0},
                      {"colsample", 1.0}, {"l2_leaf_reg", 1.0}, {"seed", 0}}},
        {"params_b", {{"quantile_alpha", 0.95}, {"n_trees", 40}, {"learning_rate", 0.15},
                      {"max_leaves", 31}, {"max_depth", 5}, {"min_samples_leaf", 10},
                      {"n_bins", 64}, {"growth", "level_wise"}, {"subsample", 1.0},
                      {"colsample", 1.0}, {"l2_leaf_reg", 1.0}, {"seed", 0}}}}},
      {"hpo",
       {{"submodel_a",
         {{"n_trees", {{"kind", "int"}, {"low", 10}, {"high", 25}}},
          {"learning_rate", {{"kind", "log_real"}, {"low", 0.05}, {"high", 0.3}}}}},
        {"submodel_b",
         {{"n_trees", {{"kind", "int"}, {"low", 10}, {"high", 25}}},
          {"max_depth", {{"kind", "int"}, {"low", 3}, {"high", 6}}}}}}}};
  const std::string path = dir.s("config.json");
  std::ofstream out(path);
  out << cfg.dump(2);
  return path;
}

}  // namespace

TEST_CASE("full pipeline: ingest, split, tune, train, eval, simulate, report") {
  TempDir dir("memopt_cli_e2e");
  write_sample_trace(dir.s("raw.csv"), 600);
  const auto config = write_small_config(dir);

  CHECK(run_tool({"--config", config, "--out-dir", dir.s("ingest"), "ingest", "--input",
             dir.s("raw.csv")}) == 0);
  CHECK(fs::exists(dir.s("ingest/dataset.csv")));
  CHECK(fs::exists(dir.s("ingest/parse_summary.json")));
  CHECK(fs::exists(dir.s("ingest/ingest.manifest.json")));

  CHECK(run_tool({"--config", config, "--out-dir", dir.s("split"), "split", "--dataset",
             dir.s("ingest/dataset.csv")}) == 0);
  REQUIRE(fs::exists(dir.s("split/train.csv")));
  REQUIRE(fs::exists(dir.s("split/test.csv")));

  // Default split is 60/40 chronological; sizes sum to the total.
  const auto train_ds = trace::parse_trace_file(dir.s("split/train.csv"), {});
  const auto test_ds = trace::parse_trace_file(dir.s("split/test.csv"), {});
  CHECK(train_ds.records.size() + test_ds.records.size() == 600);
  CHECK(train_ds.records.size() == 360);

  CHECK(run_tool({"--config", config, "--seed", "11", "--out-dir", dir.s("tune"), "tune", "--train",
             dir.s("split/train.csv"), "--trials", "3"}) == 0);
  REQUIRE(fs::exists(dir.s("tune/trials.jsonl")));
  REQUIRE(fs::exists(dir.s("tune/best_params.json")));
  {
    std::ifstream in(dir.s("tune/trials.jsonl"));
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) {
      if (!line.empty()) lines++;
    }
    CHECK(lines == 3);
    const auto best = json::parse(read_file(dir.s("tune/best_params.json")));
    CHECK(best.at("c").get<double>() == 3.0);  // default weight
  }

  CHECK(run_tool({"--config", config, "--seed", "11", "--out-dir", dir.s("train"), "train", "--train",
             dir.s("split/train.csv"), "--strategy", "ensemble", "--params",
             dir.s("tune/best_params.json")}) == 0);
  REQUIRE(fs::exists(dir.s("train/model_ensemble.json")));
  {
    const auto envelope = json::parse(read_file(dir.s("train/model_ensemble.json")));
    CHECK(envelope.at("kind") == "ensemble");
    CHECK(envelope.at("safety_factor").get<double>() == 1.2);
    CHECK_FALSE(envelope.at("training_meta").at("data_hash").get<std::string>().empty());
  }
  REQUIRE(fs::exists(dir.s("train/feature_importance.json")));
  {
    const auto imp = json::parse(read_file(dir.s("train/feature_importance.json")));
    for (const char* key : {"submodel_a", "submodel_b"}) {
      REQUIRE(imp.contains(key));
      const auto& top = imp.at(key);
      CHECK(top.size() > 0);
      CHECK(top.size() <= 20);
      CHECK(top[0].at("gain_sum").get<double>() > 0.0);
    }
    // History and branch terms should register among the top features on a
    // trace with group-level autocorrelation.
    bool informative = false;
    for (const auto& e : imp.at("submodel_a")) {
      const auto name = e.at("feature").get<std::string>();
      if (name.rfind("lag_", 0) == 0 || name.rfind("rolling_", 0) == 0 ||
          name.rfind("branch", 0) == 0 || name.rfind("component", 0) == 0) {
        informative = true;
      }
    }
    CHECK(informative);
  }

  CHECK(run_tool({"--config", config, "--out-dir", dir.s("eval"), "eval", "--model",
             dir.s("train/model_ensemble.json"), "--test", dir.s("split/test.csv")}) == 0);
  REQUIRE(fs::exists(dir.s("eval/report.json")));
  REQUIRE(fs::exists(dir.s("eval/decisions.jsonl")));
  REQUIRE(fs::exists(dir.s("eval/plots/class_population.csv")));
  {
    const auto report = json::parse(read_file(dir.s("eval/report.json")));
    CHECK(report.at("clipped").get<bool>());
    // Clipping: no refined row may exceed its baseline.
    for (const auto& row : report.at("rows")) {
      CHECK(row.at("refined_set_gb").get<double>() <=
            row.at("baseline_set_gb").get<double>() + 1e-12);
    }
  }

  CHECK(run_tool({"--config", config, "--out-dir", dir.s("sim"), "simulate", "--dataset",
             dir.s("split/test.csv"), "--model", dir.s("train/model_ensemble.json")}) == 0);
  REQUIRE(fs::exists(dir.s("sim/compare.json")));
  REQUIRE(fs::exists(dir.s("sim/events_baseline.csv")));
  REQUIRE(fs::exists(dir.s("sim/events_refined.csv")));

  CHECK(run_tool({"--config", config, "--out-dir", dir.s("report"), "report", "--dataset",
             dir.s("ingest/dataset.csv")}) == 0);
  REQUIRE(fs::exists(dir.s("report/baseline_stats.json")));
  REQUIRE(fs::exists(dir.s("report/unused_memory_hist.csv")));
}

TEST_CASE("classifier strategy trains and honors the 50 GB / 2x defaults") {
  TempDir dir("memopt_cli_clf");
  write_sample_trace(dir.s("raw.csv"), 400);
  CHECK(run_tool({"--out-dir", dir.s("train"), "train", "--train", dir.s("raw.csv"), "--strategy",
             "classifier"}) == 0);
  const auto envelope = json::parse(read_file(dir.s("train/model_classifier.json")));
  CHECK(envelope.at("kind") == "classifier");
  CHECK(envelope.at("threshold_gb").get<double>() == 50.0);
  CHECK(envelope.at("safety_factor").get<double>() == 2.0);
  CHECK(envelope.at("report").at("fp_rate_budget").get<double>() == 0.10);

  write_sample_trace(dir.s("test.csv"), 150, 8);
  CHECK(run_tool({"--out-dir", dir.s("eval"), "eval", "--model", dir.s("train/model_classifier.json"),
             "--test", dir.s("test.csv")}) == 0);
  const auto report = json::parse(read_file(dir.s("eval/report.json")));
  CHECK(report.at("strategy") == "classifier");
}

TEST_CASE("ingest with a missing column exits nonzero with MissingColumn") {
  TempDir dir("memopt_cli_badcol");
  {
    std::ofstream out(dir.s("bad.csv"));
    out << "time,branch\n100,main\n";
  }
  CHECK(run_tool({"--out-dir", dir.s("out"), "ingest", "--input", dir.s("bad.csv")}) != 0);
}

TEST_CASE("rerunning ingest flags a reproduction with an identical hash") {
  TempDir dir("memopt_cli_repro");
  write_sample_trace(dir.s("raw.csv"), 200);
  CHECK(run_tool({"--out-dir", dir.s("out"), "ingest", "--input", dir.s("raw.csv")}) == 0);
  const auto first = read_file(dir.s("out/dataset.csv"));
  const auto manifest1 = json::parse(read_file(dir.s("out/ingest.manifest.json")));
  CHECK_FALSE(manifest1.at("reproduction").get<bool>());

  CHECK(run_tool({"--out-dir", dir.s("out"), "ingest", "--input", dir.s("raw.csv")}) == 0);
  const auto second = read_file(dir.s("out/dataset.csv"));
  const auto manifest2 = json::parse(read_file(dir.s("out/ingest.manifest.json")));
  CHECK(first == second);
  CHECK(manifest2.at("reproduction").get<bool>());
}

TEST_CASE("unclipped eval differs only where the safeguarded value exceeds the baseline") {
  TempDir dir("memopt_cli_unclipped");
  write_sample_trace(dir.s("raw.csv"), 400);
  CHECK(run_tool({"--out-dir", dir.s("train"), "train", "--train", dir.s("raw.csv")}) == 0);
  write_sample_trace(dir.s("test.csv"), 120, 9);
  CHECK(run_tool({"--out-dir", dir.s("clipped"), "eval", "--model", dir.s("train/model_ensemble.json"),
             "--test", dir.s("test.csv")}) == 0);
  CHECK(run_tool({"--out-dir", dir.s("unclipped"), "eval", "--model",
             dir.s("train/model_ensemble.json"), "--test", dir.s("test.csv"), "--unclipped"}) ==
        0);
  const auto clipped = json::parse(read_file(dir.s("clipped/report.json")));
  const auto unclipped = json::parse(read_file(dir.s("unclipped/report.json")));
  const auto& rc = clipped.at("rows");
  const auto& ru = unclipped.at("rows");
  REQUIRE(rc.size() == ru.size());
  for (std::size_t i = 0; i < rc.size(); ++i) {
    const double baseline = rc[i].at("baseline_set_gb").get<double>();
    const double safeguarded = rc[i].at("safeguarded_gb").get<double>();
    const double c = rc[i].at("refined_set_gb").get<double>();
    const double u = ru[i].at("refined_set_gb").get<double>();
    if (std::max(safeguarded, 1.0) <= baseline) {
      CHECK(c == u);
    } else {
      CHECK(u > c);
    }
  }
}

TEST_CASE("serve answers refine requests and writes the decision log") {
  TempDir dir("memopt_cli_serve");
  write_sample_trace(dir.s("raw.csv"), 300);
  REQUIRE(run_tool({"--out-dir", dir.s("train"), "train", "--train", dir.s("raw.csv")}) == 0);

  const int port = 18731;
  std::thread server([&] {
    run_tool({"--out-dir", dir.s("serve"), "serve", "--model",
         "cpp_build=" + dir.s("train/model_ensemble.json"), "--listen",
         "127.0.0.1:" + std::to_string(port), "--decision-log", dir.s("serve/decisions.jsonl"),
         "--max-runtime-s", "6"});
  });

  httplib::Client client("127.0.0.1", port);
  client.set_connection_timeout(1, 0);
  json body;
  bool ok = false;
  for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    auto health = client.Get("/v1/health");
    ok = health && health->status == 200;
  }
  if (!ok) server.join();  // never leave the thread joinable on failure
  REQUIRE(ok);

  const json req = {{"task_id", "t-1"},
                    {"task_kind", "cpp_build"},
                    {"attributes",
                     {{"branch", "main"}, {"buildProfile", "linuxx86_64-gcc13-opt"},
                      {"jobs", "32"}, {"component", "core-engine"}, {"time", "1704067200"}}},
                    {"original_requirements", {{"memory_gb", 256.0}, {"cpu", 16.0}}}};
  auto res = client.Post("/v1/refine", req.dump(), "application/json");
  REQUIRE(res);
  CHECK(res->status == 200);
  body = json::parse(res->body);
  CHECK(body.at("refined_requirements").at("memory_gb").get<double>() <= 256.0);

  server.join();
  // Shutdown flushed the decision log.
  REQUIRE(fs::exists(dir.s("serve/decisions.jsonl")));
  std::ifstream log(dir.s("serve/decisions.jsonl"));
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    if (!line.empty()) lines++;
  }
  CHECK(lines >= 1);
}

TEST_CASE("scenario file drives the simulator fleet") {
  TempDir dir("memopt_cli_scenario");
  write_sample_trace(dir.s("raw.csv"), 200);
  REQUIRE(run_tool({"--out-dir", dir.s("train"), "train", "--train", dir.s("raw.csv")}) == 0);
  {
    std::ofstream out(dir.s("scenario.json"));
    out << R"({"node_count": 4, "node_memory_gb": 768, "oom_fraction": 0.5})";
  }
  CHECK(run_tool({"--out-dir", dir.s("sim"), "simulate", "--dataset", dir.s("raw.csv"), "--model",
             dir.s("train/model_ensemble.json"), "--scenario", dir.s("scenario.json")}) == 0);
  const auto cmp = json::parse(read_file(dir.s("sim/compare.json")));
  CHECK(cmp.at("nodes").get<int>() == 4);
  CHECK(cmp.at("oom_fraction").get<double>() == 0.5);
}

TEST_CASE("json output mode emits a machine-readable summary") {
  TempDir dir("memopt_cli_json");
  write_sample_trace(dir.s("raw.csv"), 150);
  // Redirect stdout through a pipe-free capture: reuse the --json flag and
  // verify by parsing the summary file-backed artifacts instead.
  CHECK(run_tool({"--json", "--out-dir", dir.s("out"), "ingest", "--input", dir.s("raw.csv")}) == 0);
  const auto summary = json::parse(read_file(dir.s("out/parse_summary.json")));
  CHECK(summary.at("rows_kept").get<int>() == 150);
}
