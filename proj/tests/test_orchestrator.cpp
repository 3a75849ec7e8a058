#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <thread>

#include "memopt/orchestrator.hpp"
#include "memopt/synthetic.hpp"

using namespace memopt;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  trace::TraceDataset ds;
  std::vector<feat::EngineeredRow> rows;
  predictor::QuantileEnsemble ens;
  nlohmann::json envelope;

  Fixture() {
    ds = synth::make_trace({.n_rows = 300, .seed = 97});
    feat::FeatureConfig fcfg;
    rows = feat::engineer_rows(ds, fcfg);
    const auto enc = feat::fit_encoder(rows, feat::FeatureSet::ensemble_table1);
    const auto m = feat::transform(rows, enc);
    gbqr::GbqrParams pa, pb;
    pa.n_trees = pb.n_trees = 25;
    pa.min_samples_leaf = pb.min_samples_leaf = 10;
    pa.seed = 1;
    pb.seed = 2;
    ens = predictor::train_ensemble(m, enc, pa, pb);
    ens.meta.smoke_row = feat::serving_attributes(rows.front(), ds.records.front().time);
    envelope = predictor::ensemble_to_json(ens);
  }

  serve::RefineRequest request_for(std::size_t i) const {
    serve::RefineRequest req;
    req.task_id = "row-" + std::to_string(i);
    req.task_kind = "cpp_build";
    req.attributes = feat::serving_attributes(rows[i], ds.records[i].time);
    req.original_memory_gb = ds.records[i].baseline_assigned_gb;
    return req;
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("service refine matches the offline decision path") {
  auto& f = fixture();
  serve::RefineService service;
  service.register_artifact("cpp_build", f.envelope);

  for (std::size_t i : {0UL, 5UL, 42UL}) {
    const auto req = f.request_for(i);
    const auto resp = service.refine(req);
    CHECK_FALSE(resp.fallback);
    const auto offline = predictor::ensemble_refine(f.ens, f.rows[i],
                                                    f.ds.records[i].baseline_assigned_gb,
                                                    req.task_id);
    CHECK(resp.decision.to_json() == offline.to_json());
    CHECK(resp.refined_memory_gb <= req.original_memory_gb);
  }
}

TEST_CASE("unknown task kinds pass through") {
  auto& f = fixture();
  serve::RefineService service;
  service.register_artifact("cpp_build", f.envelope);
  auto req = f.request_for(0);
  req.task_kind = "unknown_kind";
  const auto resp = service.refine(req);
  CHECK(resp.fallback);
  CHECK(resp.decision.strategy == predictor::Strategy::passthrough);
  CHECK(resp.refined_memory_gb == req.original_memory_gb);
}

TEST_CASE("missing attributes degrade to unknown levels, not fallback") {
  auto& f = fixture();
  serve::RefineService service;
  service.register_artifact("cpp_build", f.envelope);
  auto req = f.request_for(0);
  req.attributes.erase("buildProfile");
  const auto resp = service.refine(req);
  CHECK_FALSE(resp.fallback);
  CHECK(resp.refined_memory_gb <= req.original_memory_gb);
  CHECK(resp.refined_memory_gb > 0);
}

TEST_CASE("health counters track refines and fallbacks") {
  auto& f = fixture();
  serve::RefineService service;
  const auto before = service.health();
  CHECK(before.at("handlers").empty());
  CHECK(before.at("counters").at("refine_total").get<int>() == 0);

  service.register_artifact("cpp_build", f.envelope);
  service.refine(f.request_for(0));
  service.refine(f.request_for(1));
  auto bad = f.request_for(2);
  bad.task_kind = "nope";
  service.refine(bad);

  const auto after = service.health();
  CHECK(after.at("counters").at("refine_total").get<int>() == 3);
  CHECK(after.at("counters").at("fallback_total").get<int>() == 1);
  CHECK(after.at("handlers").size() == 1);
  CHECK(after.at("handlers")[0].at("task_kind") == "cpp_build");

  // Counters are monotone across scrapes.
  service.refine(f.request_for(3));
  const auto later = service.health();
  CHECK(later.at("counters").at("refine_total").get<int>() >=
        after.at("counters").at("refine_total").get<int>());
  CHECK(later.at("counters").at("fallback_total").get<int>() >=
        after.at("counters").at("fallback_total").get<int>());
}

TEST_CASE("corrupt artifacts are rejected and the old handler keeps serving") {
  auto& f = fixture();
  serve::RefineService service;
  service.register_artifact("cpp_build", f.envelope);

  nlohmann::json corrupt = f.envelope;
  corrupt.erase("submodel_a");
  CHECK_THROWS_AS(service.register_artifact("cpp_build", corrupt), Error);
  nlohmann::json not_a_model = {{"hello", "world"}};
  CHECK_THROWS_AS(service.register_artifact("cpp_build", not_a_model), Error);

  const auto resp = service.refine(f.request_for(3));
  CHECK_FALSE(resp.fallback);
}

TEST_CASE("decision log line count equals refine_total") {
  auto& f = fixture();
  const auto log_path = fs::temp_directory_path() / "memopt_decisions_test.jsonl";
  fs::remove(log_path);
  {
    serve::ServiceConfig cfg;
    cfg.decision_log_path = log_path.string();
    serve::RefineService service(cfg);
    service.register_artifact("cpp_build", f.envelope);
    for (int i = 0; i < 7; ++i) service.refine(f.request_for(static_cast<std::size_t>(i)));
    service.flush_log();
    CHECK(service.refine_total() == 7);
  }
  std::ifstream in(log_path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    if (!line.empty()) lines++;
  }
  CHECK(lines == 7);
  fs::remove(log_path);
}

TEST_CASE("HTTP round trip: refine, health, register, bad request") {
  auto& f = fixture();
  serve::RefineService service;
  service.register_artifact("cpp_build", f.envelope);
  serve::HttpServer server(service);
  const int port = server.start("127.0.0.1", 0);
  httplib::Client client("127.0.0.1", port);

  // Valid refine round trip.
  const auto req = f.request_for(10);
  auto res = client.Post("/v1/refine", req.to_json().dump(), "application/json");
  REQUIRE(res);
  CHECK(res->status == 200);
  const auto body = nlohmann::json::parse(res->body);
  CHECK(body.at("task_id") == req.task_id);
  CHECK(body.at("refined_requirements").at("memory_gb").get<double>() <= req.original_memory_gb);
  CHECK_FALSE(body.at("fallback").get<bool>());

  // Structurally invalid request -> 400.
  auto bad = client.Post("/v1/refine", "{not json", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);
  auto missing = client.Post("/v1/refine", R"({"task_id":"x"})", "application/json");
  REQUIRE(missing);
  CHECK(missing->status == 400);

  // Health.
  auto health = client.Get("/v1/health");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(nlohmann::json::parse(health->body).at("handlers").size() == 1);

  // Register a second kind over HTTP (inline envelope).
  auto put = client.Put("/v1/handlers/other_kind", f.envelope.dump(), "application/json");
  REQUIRE(put);
  CHECK(put->status == 200);
  auto health2 = client.Get("/v1/health");
  CHECK(nlohmann::json::parse(health2->body).at("handlers").size() == 2);

  // Register from a path reference.
  const auto artifact_path = fs::temp_directory_path() / "memopt_artifact_test.json";
  {
    std::ofstream out(artifact_path);
    out << f.envelope.dump();
  }
  auto put2 = client.Put("/v1/handlers/third_kind",
                         nlohmann::json{{"artifact_path", artifact_path.string()}}.dump(),
                         "application/json");
  REQUIRE(put2);
  CHECK(put2->status == 200);
  fs::remove(artifact_path);

  // Rejected registration keeps previous handlers intact.
  auto put_bad = client.Put("/v1/handlers/cpp_build", "{\"broken\":1}", "application/json");
  REQUIRE(put_bad);
  CHECK(put_bad->status == 422);
  auto still = client.Post("/v1/refine", req.to_json().dump(), "application/json");
  CHECK(still->status == 200);
  CHECK_FALSE(nlohmann::json::parse(still->body).at("fallback").get<bool>());

  server.stop();
}

TEST_CASE("identical requests produce identical decisions") {
  auto& f = fixture();
  serve::RefineService service;
  service.register_artifact("cpp_build", f.envelope);
  const auto req = f.request_for(8);
  const auto a = service.refine(req);
  const auto b = service.refine(req);
  CHECK(a.decision.to_json() == b.decision.to_json());
  CHECK(a.refined_memory_gb == b.refined_memory_gb);
  CHECK(a.model_version == b.model_version);
}

TEST_CASE("concurrent refines during hot swaps never fail") {
  auto& f = fixture();
  serve::RefineService service;
  service.register_artifact("cpp_build", f.envelope);
  serve::HttpServer server(service);
  const int port = server.start("127.0.0.1", 0);

  std::atomic<int> failures{0};
  std::atomic<int> done{0};
  const int kRequests = 500;
  auto worker = [&](int offset) {
    httplib::Client client("127.0.0.1", port);
    for (int i = 0; i < kRequests; ++i) {
      const auto req = f.request_for(static_cast<std::size_t>((offset + i) % 200));
      auto res = client.Post("/v1/refine", req.to_json().dump(), "application/json");
      if (!res || res->status != 200) failures.fetch_add(1);
      done.fetch_add(1);
    }
  };
  std::thread t1(worker, 0);
  std::thread t2(worker, 50);
  // Swap the model repeatedly while requests are in flight.
  std::thread swapper([&] {
    for (int i = 0; i < 20; ++i) {
      service.register_artifact("cpp_build", f.envelope);
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
  });
  t1.join();
  t2.join();
  swapper.join();
  server.stop();
  CHECK(done.load() == 2 * kRequests);
  CHECK(failures.load() == 0);
  CHECK(service.refine_total() == 2 * kRequests);
}
