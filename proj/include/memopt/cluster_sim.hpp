#pragma once

// Discrete-event replay of a build trace through an offer-matching scheduler.
// Queued tasks are matched first-fit in FIFO order on memory; a running task
// OOMs partway through its nominal duration when its assignment is below the
// true peak. OOM handling follows the two-restart fallback: the first restart
// keeps the refined requirement, the final restart falls back to the baseline
// configuration.

#include <cstdint>
#include <map>
#include <ostream>
#include <queue>
#include <string>
#include <vector>

#include <json.hpp>

#include "memopt/common.hpp"

namespace memopt::sim {

using json = nlohmann::json;

struct SimNode {
  std::string node_id;
  double memory_capacity_gb = 0;
  double cpu_capacity = 0;
};

enum class Policy { baseline, refined };

inline std::string policy_name(Policy p) { return p == Policy::baseline ? "baseline" : "refined"; }

enum class TaskState { queued, running, finished, oom_failed, exhausted, unschedulable };

inline std::string state_name(TaskState s) {
  switch (s) {
    case TaskState::queued: return "queued";
    case TaskState::running: return "running";
    case TaskState::finished: return "finished";
    case TaskState::oom_failed: return "oom_failed";
    case TaskState::exhausted: return "exhausted";
    default: return "unschedulable";
  }
}

struct TaskInput {
  std::string task_id;
  double submit_time = 0;  // seconds
  double duration = 0;     // nominal runtime, seconds
  double true_peak_gb = 0;
  double baseline_gb = 0;
  double refined_gb = 0;
};

struct TaskTrace {
  std::string task_id;
  TaskState final_state = TaskState::queued;
  int executions = 0;  // initial run + restarts, <= 3
  int oom_count = 0;
  double total_wait_s = 0;
  double total_runtime_s = 0;
  double end_time = 0;
  std::vector<double> assigned_history;
};

struct SimEvent {
  double time = 0;
  std::string type;  // submit | start | finish | oom | exhausted | unschedulable
  std::string task_id;
  std::string node_id;
  double assigned_gb = 0;
  int attempt = 0;
};

struct SimAggregates {
  std::int64_t tasks = 0;
  std::int64_t finished = 0;
  std::int64_t exhausted = 0;
  std::int64_t unschedulable = 0;
  std::int64_t oom_events = 0;
  double oom_task_rate = 0;  // tasks with >= 1 OOM / scheduled tasks
  double mean_wait_s = 0;
  double p95_wait_s = 0;
  double makespan_s = 0;
  double throughput_per_h = 0;
  double wasted_work_h = 0;
  double mem_hours_gbh = 0;  // integral of assigned memory over runtime

  json to_json() const {
    json j;
    j["tasks"] = tasks;
    j["finished"] = finished;
    j["exhausted"] = exhausted;
    j["unschedulable"] = unschedulable;
    j["oom_events"] = oom_events;
    j["oom_task_rate"] = oom_task_rate;
    j["mean_wait_s"] = mean_wait_s;
    j["p95_wait_s"] = p95_wait_s;
    j["makespan_s"] = makespan_s;
    j["throughput_per_h"] = throughput_per_h;
    j["wasted_work_h"] = wasted_work_h;
    j["mem_hours_gbh"] = mem_hours_gbh;
    return j;
  }
};

struct SimResult {
  Policy policy = Policy::baseline;
  std::vector<TaskTrace> tasks;
  SimAggregates agg;
  std::vector<SimEvent> events;

  json to_json(bool include_tasks = false) const {
    json j;
    j["policy"] = policy_name(policy);
    j["aggregates"] = agg.to_json();
    j["event_count"] = events.size();
    if (include_tasks) {
      json tasks_json = json::array();
      for (const auto& t : tasks) {
        tasks_json.push_back({{"task_id", t.task_id},
                              {"final_state", state_name(t.final_state)},
                              {"executions", t.executions},
                              {"oom_count", t.oom_count},
                              {"total_wait_s", t.total_wait_s},
                              {"total_runtime_s", t.total_runtime_s},
                              {"assigned_history", t.assigned_history}});
      }
      j["tasks"] = std::move(tasks_json);
    }
    return j;
  }
};

namespace detail {

struct PendingEntry {
  std::size_t task_idx;
  double enqueue_time;
  std::uint64_t seq;  // FIFO tie-break
};

struct RunningEntry {
  std::size_t task_idx;
  std::size_t node_idx;
  double assigned_gb;
  double start_time;
  bool will_oom;
};

struct QueuedEvent {
  double time;
  int kind;  // 0 submit, 1 finish, 2 oom
  std::uint64_t seq;
  std::size_t task_idx;

  bool operator>(const QueuedEvent& o) const {
    if (time != o.time) return time > o.time;
    if (kind != o.kind) return kind > o.kind;
    return seq > o.seq;
  }
};

}  // namespace detail

inline SimResult run(const std::vector<TaskInput>& inputs, const std::vector<SimNode>& nodes,
                     Policy policy, double oom_fraction = 0.7) {
  if (nodes.empty()) throw Error(Error::Kind::InvalidParams, "sim: node fleet is empty");
  if (!(oom_fraction > 0 && oom_fraction < 1)) {
    throw Error(Error::Kind::InvalidParams, "sim: oom_fraction must be in (0,1)");
  }

  SimResult result;
  result.policy = policy;
  result.tasks.resize(inputs.size());

  double max_node_cap = 0;
  std::vector<double> free_mem(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    free_mem[i] = nodes[i].memory_capacity_gb;
    max_node_cap = std::max(max_node_cap, nodes[i].memory_capacity_gb);
  }

  // attempt index per task (0 = initial run). The final restart always uses
  // the baseline assignment, bit-exact.
  std::vector<int> attempt(inputs.size(), 0);
  auto assigned_for = [&](std::size_t t) {
    if (policy == Policy::baseline) return inputs[t].baseline_gb;
    return attempt[t] >= 2 ? inputs[t].baseline_gb : inputs[t].refined_gb;
  };

  std::priority_queue<detail::QueuedEvent, std::vector<detail::QueuedEvent>,
                      std::greater<detail::QueuedEvent>>
      events;
  std::uint64_t seq = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    events.push({inputs[i].submit_time, 0, seq++, i});
    result.tasks[i].task_id = inputs[i].task_id;
  }

  std::vector<detail::PendingEntry> pending;
  std::map<std::size_t, detail::RunningEntry> running;  // task_idx -> entry
  std::vector<double> waits;
  double first_time = 0;
  bool any = false;
  for (const auto& in : inputs) {
    first_time = any ? std::min(first_time, in.submit_time) : in.submit_time;
    any = true;
  }
  double last_event_time = first_time;

  auto log_event = [&](double time, const std::string& type, std::size_t t, const std::string& node,
                       double assigned) {
    result.events.push_back({time, type, inputs[t].task_id, node, assigned, attempt[t]});
  };

  auto try_match = [&](double now) {
    for (auto it = pending.begin(); it != pending.end();) {
      const std::size_t t = it->task_idx;
      const double need = assigned_for(t);
      bool placed = false;
      for (std::size_t ni = 0; ni < nodes.size(); ++ni) {
        if (free_mem[ni] + 1e-12 >= need) {
          free_mem[ni] -= need;
          const double wait = now - it->enqueue_time;
          waits.push_back(wait);
          result.tasks[t].total_wait_s += wait;
          result.tasks[t].executions += 1;
          result.tasks[t].assigned_history.push_back(need);
          result.tasks[t].final_state = TaskState::running;
          const bool will_oom = need < inputs[t].true_peak_gb;
          const double run_for = will_oom ? inputs[t].duration * oom_fraction : inputs[t].duration;
          running[t] = {t, ni, need, now, will_oom};
          events.push({now + run_for, will_oom ? 2 : 1, seq++, t});
          log_event(now, "start", t, nodes[ni].node_id, need);
          placed = true;
          break;
        }
      }
      it = placed ? pending.erase(it) : std::next(it);
    }
  };

  while (!events.empty()) {
    const auto ev = events.top();
    events.pop();
    const double now = ev.time;
    last_event_time = std::max(last_event_time, now);
    const std::size_t t = ev.task_idx;

    if (ev.kind == 0) {
      log_event(now, "submit", t, "", assigned_for(t));
      if (inputs[t].baseline_gb > max_node_cap) {
        // Cannot fit anywhere even at the baseline assignment.
        result.tasks[t].final_state = TaskState::unschedulable;
        result.agg.unschedulable++;
        log_event(now, "unschedulable", t, "", inputs[t].baseline_gb);
      } else {
        pending.push_back({t, now, seq++});
      }
    } else {
      const auto entry = running.at(t);
      running.erase(t);
      free_mem[entry.node_idx] += entry.assigned_gb;
      const double ran = now - entry.start_time;
      result.tasks[t].total_runtime_s += ran;
      result.agg.mem_hours_gbh += entry.assigned_gb * ran / 3600.0;
      if (ev.kind == 1) {
        result.tasks[t].final_state = TaskState::finished;
        result.tasks[t].end_time = now;
        result.agg.finished++;
        log_event(now, "finish", t, nodes[entry.node_idx].node_id, entry.assigned_gb);
      } else {
        result.tasks[t].oom_count += 1;
        result.agg.oom_events++;
        result.agg.wasted_work_h += ran / 3600.0;
        log_event(now, "oom", t, nodes[entry.node_idx].node_id, entry.assigned_gb);
        if (attempt[t] < 2) {
          attempt[t] += 1;
          result.tasks[t].final_state = TaskState::queued;
          pending.push_back({t, now, seq++});
        } else {
          result.tasks[t].final_state = TaskState::exhausted;
          result.tasks[t].end_time = now;
          result.agg.exhausted++;
          log_event(now, "exhausted", t, "", entry.assigned_gb);
        }
      }
    }
    try_match(now);
  }

  result.agg.tasks = static_cast<std::int64_t>(inputs.size());
  std::int64_t oom_tasks = 0;
  for (const auto& tt : result.tasks) {
    if (tt.oom_count > 0) ++oom_tasks;
  }
  const std::int64_t scheduled = result.agg.tasks - result.agg.unschedulable;
  result.agg.oom_task_rate =
      scheduled > 0 ? static_cast<double>(oom_tasks) / static_cast<double>(scheduled) : 0.0;
  if (!waits.empty()) {
    result.agg.mean_wait_s = mean_of(waits);
    result.agg.p95_wait_s = quantile_linear(waits, 0.95);
  }
  result.agg.makespan_s = last_event_time - first_time;
  result.agg.throughput_per_h = result.agg.makespan_s > 0
                                    ? static_cast<double>(result.agg.finished) /
                                          (result.agg.makespan_s / 3600.0)
                                    : 0.0;
  return result;
}

struct CompareResult {
  SimResult baseline;
  SimResult refined;

  json delta() const {
    json j;
    j["mean_wait_delta_s"] = refined.agg.mean_wait_s - baseline.agg.mean_wait_s;
    j["oom_rate_delta"] = refined.agg.oom_task_rate - baseline.agg.oom_task_rate;
    j["realized_gbh_savings"] = baseline.agg.mem_hours_gbh - refined.agg.mem_hours_gbh;
    const std::int64_t n = std::max<std::int64_t>(1, refined.agg.finished);
    double mean_savings = 0;
    for (std::size_t i = 0; i < refined.tasks.size(); ++i) {
      if (refined.tasks[i].final_state == TaskState::finished &&
          !refined.tasks[i].assigned_history.empty()) {
        mean_savings +=
            (baseline.tasks[i].assigned_history.empty()
                 ? 0.0
                 : baseline.tasks[i].assigned_history.back()) -
            refined.tasks[i].assigned_history.back();
      }
    }
    j["realized_mean_savings_gb"] = mean_savings / static_cast<double>(n);
    j["throughput_delta_per_h"] = refined.agg.throughput_per_h - baseline.agg.throughput_per_h;
    return j;
  }
};

inline CompareResult compare(const std::vector<TaskInput>& inputs, const std::vector<SimNode>& nodes,
                             double oom_fraction = 0.7) {
  CompareResult out;
  out.baseline = run(inputs, nodes, Policy::baseline, oom_fraction);
  out.refined = run(inputs, nodes, Policy::refined, oom_fraction);
  return out;
}

// Per-event CSV trace for debugging; first line names the columns.
inline void write_event_csv(const SimResult& result, std::ostream& out) {
  out << "time,type,task_id,node_id,assigned_gb,attempt\n";
  for (const auto& e : result.events) {
    out << format_double(e.time) << "," << e.type << "," << e.task_id << "," << e.node_id << ","
        << format_double(e.assigned_gb) << "," << e.attempt << "\n";
  }
}

}  // namespace memopt::sim
