#pragma once

// Refinement orchestrator: accepts task refinement requests from a scheduler,
// dispatches to the handler registered for the task kind, and returns refined
// requirements with full decision provenance. The service never blocks
// scheduling: any handler error, malformed attribute or deadline overrun
// degrades to a passthrough response with the original requirements.
//
// HTTP surface:
//   POST /v1/refine            RefineRequest -> RefineResponse
//   PUT  /v1/handlers/{kind}   {"artifact_path": ...} or an inline envelope
//   GET  /v1/health            status, handlers, counters

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "memopt/common.hpp"
#include "memopt/features.hpp"
#include "memopt/predictor.hpp"

namespace memopt::serve {

using json = nlohmann::json;

struct RefineRequest {
  std::string task_id;
  std::string task_kind;
  std::map<std::string, std::string> attributes;
  double original_memory_gb = 0;
  double original_cpu = 0;

  // Throws Error(ArtifactInvalid) on structural problems; the HTTP layer
  // turns that into a 400.
  static RefineRequest from_json(const json& j) {
    RefineRequest r;
    if (!j.is_object()) throw Error(Error::Kind::ArtifactInvalid, "request must be a JSON object");
    if (!j.contains("task_id") || !j.at("task_id").is_string() ||
        j.at("task_id").get<std::string>().empty()) {
      throw Error(Error::Kind::ArtifactInvalid, "task_id missing or empty");
    }
    r.task_id = j.at("task_id").get<std::string>();
    r.task_kind = j.value("task_kind", std::string());
    if (j.contains("attributes")) {
      if (!j.at("attributes").is_object()) {
        throw Error(Error::Kind::ArtifactInvalid, "attributes must be an object");
      }
      for (auto& [k, v] : j.at("attributes").items()) {
        r.attributes[k] = v.is_string() ? v.get<std::string>() : v.dump();
      }
    }
    if (!j.contains("original_requirements") || !j.at("original_requirements").is_object()) {
      throw Error(Error::Kind::ArtifactInvalid, "original_requirements missing");
    }
    const auto& req = j.at("original_requirements");
    if (!req.contains("memory_gb") || !req.at("memory_gb").is_number()) {
      throw Error(Error::Kind::ArtifactInvalid, "original_requirements.memory_gb missing");
    }
    r.original_memory_gb = req.at("memory_gb").get<double>();
    if (!(r.original_memory_gb > 0)) {
      throw Error(Error::Kind::ArtifactInvalid, "original_requirements.memory_gb must be > 0");
    }
    r.original_cpu = req.value("cpu", 0.0);
    return r;
  }

  json to_json() const {
    json j;
    j["task_id"] = task_id;
    j["task_kind"] = task_kind;
    j["attributes"] = attributes;
    j["original_requirements"] = {{"memory_gb", original_memory_gb}, {"cpu", original_cpu}};
    return j;
  }
};

struct RefineResponse {
  std::string task_id;
  double refined_memory_gb = 0;
  predictor::RefinementDecision decision;
  std::string handler;
  std::string model_version;
  double latency_ms = 0;
  bool fallback = false;

  json to_json() const {
    json j;
    j["task_id"] = task_id;
    j["refined_requirements"] = {{"memory_gb", refined_memory_gb}};
    j["decision"] = decision.to_json();
    j["handler"] = handler;
    j["model_version"] = model_version;
    j["latency_ms"] = latency_ms;
    j["fallback"] = fallback;
    return j;
  }
};

// ---------------------------------------------------------------------------
// Handlers wrap a loaded predictor behind a uniform refine call.

class Handler {
public:
  virtual ~Handler() = default;
  virtual predictor::RefinementDecision refine(const std::map<std::string, std::string>& attributes,
                                               double original_gb,
                                               const std::string& task_id) const = 0;
  virtual std::string model_version() const = 0;
  virtual std::string kind_label() const = 0;
  // Registration gate: must complete a prediction on the artifact's embedded
  // smoke row without throwing.
  virtual void smoke_check() const = 0;
};

class EnsembleHandler : public Handler {
public:
  EnsembleHandler(predictor::QuantileEnsemble ens, feat::FeatureConfig cfg)
      : ens_(std::move(ens)), cfg_(std::move(cfg)) {}

  predictor::RefinementDecision refine(const std::map<std::string, std::string>& attributes,
                                       double original_gb,
                                       const std::string& task_id) const override {
    const feat::EngineeredRow row = feat::engineer_single(attributes, cfg_);
    return predictor::ensemble_refine(ens_, row, original_gb, task_id);
  }

  std::string model_version() const override { return ens_.version; }
  std::string kind_label() const override { return "ensemble"; }

  void smoke_check() const override {
    auto attrs = ens_.meta.smoke_row;
    const auto d = refine(attrs, 1024.0, "smoke");
    if (!(d.final_gb > 0) || !std::isfinite(d.final_gb)) {
      throw Error(Error::Kind::ArtifactInvalid, "smoke prediction produced a non-finite value");
    }
  }

  const predictor::QuantileEnsemble& model() const { return ens_; }

private:
  predictor::QuantileEnsemble ens_;
  feat::FeatureConfig cfg_;
};

class ClassifierHandler : public Handler {
public:
  ClassifierHandler(predictor::ThresholdClassifier clf, feat::FeatureConfig cfg)
      : clf_(std::move(clf)), cfg_(std::move(cfg)) {}

  predictor::RefinementDecision refine(const std::map<std::string, std::string>& attributes,
                                       double original_gb,
                                       const std::string& task_id) const override {
    const feat::EngineeredRow row = feat::engineer_single(attributes, cfg_);
    return predictor::classify_refine(clf_, row, original_gb, task_id);
  }

  std::string model_version() const override { return clf_.version; }
  std::string kind_label() const override { return "classifier"; }

  void smoke_check() const override {
    auto attrs = clf_.meta.smoke_row;
    const auto d = refine(attrs, 1024.0, "smoke");
    if (!(d.final_gb > 0) || !std::isfinite(d.final_gb)) {
      throw Error(Error::Kind::ArtifactInvalid, "smoke prediction produced a non-finite value");
    }
  }

private:
  predictor::ThresholdClassifier clf_;
  feat::FeatureConfig cfg_;
};

inline std::shared_ptr<Handler> handler_from_envelope(const json& envelope,
                                                      feat::FeatureConfig cfg) {
  if (!envelope.is_object() || envelope.value("format", std::string()) != "memopt-model") {
    throw Error(Error::Kind::ArtifactInvalid, "not a model envelope");
  }
  // A feature config embedded at train time wins over the service default, so
  // offline and online feature derivation cannot drift apart.
  if (envelope.contains("feature_config")) {
    cfg = feat::FeatureConfig::from_json(envelope.at("feature_config"));
  }
  const std::string kind = envelope.value("kind", std::string());
  std::shared_ptr<Handler> h;
  try {
    if (kind == "ensemble") {
      h = std::make_shared<EnsembleHandler>(predictor::ensemble_from_json(envelope), cfg);
    } else if (kind == "classifier") {
      h = std::make_shared<ClassifierHandler>(predictor::classifier_from_json(envelope), cfg);
    } else {
      throw Error(Error::Kind::ArtifactInvalid, "unknown model kind: " + kind);
    }
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(Error::Kind::ArtifactInvalid, std::string("malformed model envelope: ") + e.what());
  }
  h->smoke_check();
  return h;
}

// ---------------------------------------------------------------------------
// Service core. Usable directly (unit tests, offline tools) or behind the
// HTTP server below.

struct ServiceConfig {
  double deadline_ms = 100.0;
  std::string decision_log_path;  // empty disables the log
  bool fsync_decision_log = false;
  feat::FeatureConfig features;
};

class RefineService {
public:
  explicit RefineService(ServiceConfig cfg = {}) : cfg_(std::move(cfg)) {
    if (!cfg_.decision_log_path.empty()) {
      const auto parent = std::filesystem::path(cfg_.decision_log_path).parent_path();
      if (!parent.empty()) std::filesystem::create_directories(parent);
      log_.open(cfg_.decision_log_path, std::ios::app | std::ios::binary);
      if (!log_) throw Error(Error::Kind::IoError, "cannot open decision log " + cfg_.decision_log_path);
    }
  }

  // Atomic swap: in-flight requests keep the handler snapshot they already
  // took; only new requests observe the replacement.
  void register_handler(const std::string& task_kind, std::shared_ptr<Handler> handler) {
    handler->smoke_check();
    std::unique_lock lock(handlers_mutex_);
    handlers_[task_kind] = {std::move(handler), now_iso()};
  }

  void register_artifact(const std::string& task_kind, const json& envelope) {
    register_handler(task_kind, handler_from_envelope(envelope, cfg_.features));
  }

  void register_artifact_file(const std::string& task_kind, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Error::Kind::ArtifactInvalid, "cannot open artifact " + path);
    json envelope;
    try {
      in >> envelope;
    } catch (const std::exception& e) {
      throw Error(Error::Kind::ArtifactInvalid, std::string("artifact is not valid JSON: ") + e.what());
    }
    register_artifact(task_kind, envelope);
  }

  RefineResponse refine(const RefineRequest& req) {
    const auto t0 = std::chrono::steady_clock::now();
    RefineResponse resp;
    resp.task_id = req.task_id;

    std::shared_ptr<Handler> handler;
    {
      std::shared_lock lock(handlers_mutex_);
      auto it = handlers_.find(req.task_kind);
      if (it != handlers_.end()) handler = it->second.handler;
    }

    bool fell_back = true;
    if (handler) {
      try {
        auto decision = handler->refine(req.attributes, req.original_memory_gb, req.task_id);
        const double elapsed_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        if (elapsed_ms <= cfg_.deadline_ms) {
          resp.decision = std::move(decision);
          resp.handler = handler->kind_label();
          resp.model_version = handler->model_version();
          fell_back = false;
        } else {
          deadline_total_.fetch_add(1, std::memory_order_relaxed);
        }
      } catch (const std::exception&) {
        // Model failure must never block scheduling.
      }
    }
    if (fell_back) {
      resp.decision = predictor::passthrough_decision(req.original_memory_gb, req.task_id);
      resp.handler = handler ? handler->kind_label() : "none";
      resp.model_version = resp.decision.model_version;
      resp.fallback = true;
      fallback_total_.fetch_add(1, std::memory_order_relaxed);
    }
    resp.refined_memory_gb = resp.decision.final_gb;
    if (resp.decision.clipped) clip_total_.fetch_add(1, std::memory_order_relaxed);

    resp.latency_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    refine_total_.fetch_add(1, std::memory_order_relaxed);
    {
      std::lock_guard lock(latency_mutex_);
      latencies_ms_.push_back(resp.latency_ms);
      if (latencies_ms_.size() > 100000) latencies_ms_.erase(latencies_ms_.begin());
    }
    append_decision_log(req, resp);
    return resp;
  }

  json health() const {
    json j;
    j["status"] = "ok";
    json handlers = json::array();
    {
      std::shared_lock lock(handlers_mutex_);
      for (const auto& [kind, entry] : handlers_) {
        handlers.push_back({{"task_kind", kind},
                            {"model_version", entry.handler->model_version()},
                            {"loaded_at", entry.loaded_at}});
      }
    }
    j["handlers"] = std::move(handlers);
    json counters;
    counters["refine_total"] = refine_total_.load();
    counters["fallback_total"] = fallback_total_.load();
    counters["clip_total"] = clip_total_.load();
    counters["deadline_total"] = deadline_total_.load();
    {
      std::lock_guard lock(latency_mutex_);
      counters["p50_latency_ms"] = latencies_ms_.empty() ? 0.0 : quantile_linear(latencies_ms_, 0.5);
      counters["p95_latency_ms"] = latencies_ms_.empty() ? 0.0 : quantile_linear(latencies_ms_, 0.95);
    }
    j["counters"] = std::move(counters);
    return j;
  }

  void flush_log() {
    std::lock_guard lock(log_mutex_);
    if (log_.is_open()) log_.flush();
  }

  std::int64_t refine_total() const { return refine_total_.load(); }

private:
  static std::string now_iso() {
    const auto t = std::chrono::system_clock::now();
    return format_iso_utc(std::chrono::duration_cast<std::chrono::seconds>(t.time_since_epoch()).count());
  }

  void append_decision_log(const RefineRequest& req, const RefineResponse& resp) {
    if (!log_.is_open()) return;
    json line;
    line["request"] = req.to_json();
    line["response"] = resp.to_json();
    std::lock_guard lock(log_mutex_);
    log_ << line.dump() << "\n";
    if (cfg_.fsync_decision_log) log_.flush();
  }

  struct HandlerEntry {
    std::shared_ptr<Handler> handler;
    std::string loaded_at;
  };

  ServiceConfig cfg_;
  mutable std::shared_mutex handlers_mutex_;
  std::map<std::string, HandlerEntry> handlers_;
  std::atomic<std::int64_t> refine_total_{0};
  std::atomic<std::int64_t> fallback_total_{0};
  std::atomic<std::int64_t> clip_total_{0};
  std::atomic<std::int64_t> deadline_total_{0};
  mutable std::mutex latency_mutex_;
  std::vector<double> latencies_ms_;
  std::mutex log_mutex_;
  std::ofstream log_;
};

// ---------------------------------------------------------------------------
// HTTP layer.

class HttpServer {
public:
  explicit HttpServer(RefineService& service) : service_(service) { install_routes(); }

  ~HttpServer() { stop(); }

  // Binds to the given port (0 picks a free one) and serves on a background
  // thread. Returns the bound port.
  int start(const std::string& host, int port) {
    if (port == 0) {
      port_ = server_.bind_to_any_port(host);
    } else {
      if (!server_.bind_to_port(host, port)) {
        throw Error(Error::Kind::IoError, "cannot bind " + host + ":" + std::to_string(port));
      }
      port_ = port;
    }
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  void stop() {
    if (thread_.joinable()) {
      server_.stop();
      thread_.join();
    }
    service_.flush_log();
  }

  int port() const { return port_; }

private:
  void install_routes() {
    server_.Post("/v1/refine", [this](const httplib::Request& req, httplib::Response& res) {
      json body;
      RefineRequest request;
      try {
        body = json::parse(req.body);
        request = RefineRequest::from_json(body);
      } catch (const std::exception& e) {
        res.status = 400;
        res.set_content(json{{"error", e.what()}}.dump(), "application/json");
        return;
      }
      const RefineResponse resp = service_.refine(request);
      res.set_content(resp.to_json().dump(), "application/json");
    });

    server_.Put(R"(/v1/handlers/([A-Za-z0-9_\-\.]+))",
                [this](const httplib::Request& req, httplib::Response& res) {
                  const std::string kind = req.matches[1];
                  try {
                    const json body = json::parse(req.body);
                    if (body.is_object() && body.contains("artifact_path")) {
                      service_.register_artifact_file(kind, body.at("artifact_path").get<std::string>());
                    } else {
                      service_.register_artifact(kind, body);
                    }
                    res.set_content(json{{"status", "registered"}, {"task_kind", kind}}.dump(),
                                    "application/json");
                  } catch (const std::exception& e) {
                    res.status = 422;
                    res.set_content(json{{"error", e.what()}}.dump(), "application/json");
                  }
                });

    server_.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(service_.health().dump(), "application/json");
    });
  }

  RefineService& service_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace memopt::serve
