/* Copyright 2026 The Stratsim Authors.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "stratsim/cluster.hpp"
#include "stratsim/common.hpp"
#include "stratsim/exec_graph.hpp"

namespace stratsim {

enum class Stream { compute = 0, feature = 1, gradient = 2 };

inline std::string to_string(Stream s) {
  switch (s) {
    case Stream::compute: return "compute";
    case Stream::feature: return "feature-comm";
    case Stream::gradient: return "gradient-comm";
  }
  return "?";
}

inline Stream stream_of(TaskKind k) {
  switch (k) {
    case TaskKind::compute: return Stream::compute;
    case TaskKind::feature_comm: return Stream::feature;
    case TaskKind::gradient_comm: return Stream::gradient;
  }
  return Stream::compute;
}

struct SimOptions {
  double gamma = 0;
  bool bandwidth_sharing = true;
  bool record_links = false;
};

struct TimelineEntry {
  int task = 0;
  double start = 0;
  double end = 0;
  double max_share = 1;  // largest bandwidth-sharing factor seen
  bool overlapped = false;
};

struct DeviceReport {
  int device = 0;
  int64_t peak_bytes = 0;
  int64_t persistent_bytes = 0;
  int64_t final_bytes = 0;
  bool oom = false;
  int peak_task = -1;  // task whose allocation reached the peak
  double peak_time = 0;
  std::array<double, 3> busy{0, 0, 0};  // per stream
};

// Consumed bandwidth on one link instance over [start, end).
struct LinkSample {
  LinkInstance link;
  double start = 0;
  double end = 0;
  double used = 0;
  double capacity = 0;
};

struct SimReport {
  double iteration_time = 0;
  int64_t device_memory = 0;
  std::vector<DeviceReport> devices;
  std::vector<TimelineEntry> timeline;  // by task id
  std::vector<int> subgraph_order;      // subgraph ids by scheduling rank
  int shared_tasks = 0;
  int overlapped_tasks = 0;
  double max_share = 1;
  std::vector<LinkSample> link_usage;

  bool oom() const {
    for (const auto& d : devices)
      if (d.oom) return true;
    return false;
  }
  int64_t peak_bytes() const {
    int64_t p = 0;
    for (const auto& d : devices) p = std::max(p, d.peak_bytes);
    return p;
  }
};

inline bool backward_class(Phase p) { return p != Phase::forward; }

// For each subgraph: does finishing it feed a backward-class subgraph?
inline std::vector<bool> backward_enablers(const ExecutionGraph& eg) {
  std::vector<bool> out(eg.subgraphs.size(), false);
  for (const auto& e : eg.edges) {
    int a = eg.tasks[e.from].subgraph, b = eg.tasks[e.to].subgraph;
    if (a != b && backward_class(eg.subgraphs[b].phase)) out[a] = true;
  }
  return out;
}

struct SchedulerState {
  int last_backward_origin = -1;
};

// Picks the next subgraph to rank: backward work first, alternating between
// origins; otherwise forwards that unblock a backward; ties on (origin, mb).
inline int select_next_subgraph(const ExecutionGraph& eg, const std::vector<int>& candidates,
                                SchedulerState& st, const std::vector<bool>& enables_backward) {
  if (candidates.empty()) throw Error("scheduler", "no candidate subgraph");
  auto key = [&](int s) {
    const auto& sg = eg.subgraphs[s];
    return std::make_tuple(sg.origin, sg.micro_batch, sg.id);
  };
  std::vector<int> back;
  for (int s : candidates)
    if (backward_class(eg.subgraphs[s].phase)) back.push_back(s);
  if (!back.empty()) {
    int best = -1;
    auto rr = [&](int s) {
      int o = eg.subgraphs[s].origin;
      return std::make_tuple(o > st.last_backward_origin ? 0 : 1, o,
                             eg.subgraphs[s].micro_batch, s);
    };
    for (int s : back)
      if (best < 0 || rr(s) < rr(best)) best = s;
    st.last_backward_origin = eg.subgraphs[best].origin;
    return best;
  }
  int best = -1;
  for (int s : candidates) {
    if (best < 0) {
      best = s;
      continue;
    }
    bool es = enables_backward[s], eb = enables_backward[best];
    if (es != eb ? es : key(s) < key(best)) best = s;
  }
  return best;
}

namespace detail {

struct CommLinks {
  std::vector<LinkInstance> links;
  std::vector<LinkLevel> levels;
  double solo = 0;
};

class Simulator {
 public:
  Simulator(const ExecutionGraph& eg, const ClusterSpec& c, SimOptions o)
      : eg_(eg), c_(c), opt_(o) {}

  SimReport run() {
    const std::size_t n = eg_.tasks.size();
    rep_.device_memory = c_.device_memory;
    rep_.timeline.resize(n);
    for (std::size_t i = 0; i < n; ++i) rep_.timeline[i].task = static_cast<int>(i);
    pending_.assign(n, 0);
    for (const auto& e : eg_.edges) ++pending_[e.to];
    for (const auto& t : eg_.tasks)
      if (!(t.duration >= 0) || !std::isfinite(t.duration))
        throw Error("task '" + t.name + "'", "has no valid duration (annotate costs first)");
    links_.resize(n);
    for (const auto& t : eg_.tasks) {
      if (!t.is_comm()) continue;
      auto& l = links_[t.id];
      l.links = crossed_links(c_, t.devices());
      l.levels = crossed_levels(c_, t.devices());
      l.solo = shared_bandwidth(c_, t.devices(), {});
    }
    remaining_.assign(n, 0);
    state_.assign(n, 0);
    rank_.assign(eg_.subgraphs.size(), -1);
    enablers_ = backward_enablers(eg_);
    init_memory();

    std::vector<int> fresh;
    for (std::size_t i = 0; i < n; ++i)
      if (!pending_[i]) fresh.push_back(static_cast<int>(i));
    make_ready(fresh);
    std::size_t done = 0;
    double now = 0;
    while (done < n) {
      dispatch(now);
      if (running_.empty()) deadlock();
      update_rates(now);
      // Next completion under the current rates.
      double next = std::numeric_limits<double>::infinity();
      for (int t : running_) next = std::min(next, now + remaining_[t] * share_[t]);
      const double tol = 1e-12 * std::max(1.0, std::abs(next));
      record_links(now, next);
      std::vector<int> finished;
      for (int t : running_) {
        const double end = now + remaining_[t] * share_[t];
        if (end <= next + tol) {
          finished.push_back(t);
          remaining_[t] = 0;
        } else {
          remaining_[t] -= (next - now) / share_[t];
        }
      }
      now = next;
      std::sort(finished.begin(), finished.end());
      std::vector<int> newly;
      for (int t : finished) {
        complete(t, now);
        ++done;
        for (int s : eg_.tasks[t].succs)
          if (--pending_[s] == 0) newly.push_back(s);
      }
      std::sort(newly.begin(), newly.end());
      make_ready(newly);
    }
    rep_.iteration_time = 0;
    for (const auto& e : rep_.timeline) rep_.iteration_time = std::max(rep_.iteration_time, e.end);
    finish_memory();
    for (const auto& e : rep_.timeline) {
      if (e.max_share > 1) ++rep_.shared_tasks;
      if (e.overlapped) ++rep_.overlapped_tasks;
      rep_.max_share = std::max(rep_.max_share, e.max_share);
    }
    return std::move(rep_);
  }

 private:
  const ExecutionGraph& eg_;
  const ClusterSpec& c_;
  SimOptions opt_;
  SimReport rep_;
  std::vector<int> pending_;
  std::vector<int> state_;  // 0 waiting, 1 ready, 2 running, 3 done
  std::vector<double> remaining_;
  std::map<int, double> share_;
  std::vector<CommLinks> links_;
  std::vector<int> rank_;
  int next_rank_ = 0;
  SchedulerState sched_;
  std::vector<bool> enablers_;
  std::set<std::pair<int, int>> ready_;  // (subgraph rank, task id)
  std::set<int> running_;
  std::map<std::pair<int, int>, int> busy_;  // (device, stream) -> task

  // Memory.
  std::vector<int> refs_;
  std::vector<bool> allocated_;
  std::map<int, int64_t> current_;
  std::map<int, DeviceReport> dev_;

  void make_ready(const std::vector<int>& tasks) {
    std::vector<int> unranked;
    for (int t : tasks) {
      int s = eg_.tasks[t].subgraph;
      if (rank_[s] < 0 && std::find(unranked.begin(), unranked.end(), s) == unranked.end())
        unranked.push_back(s);
    }
    std::sort(unranked.begin(), unranked.end());
    while (!unranked.empty()) {
      int s = select_next_subgraph(eg_, unranked, sched_, enablers_);
      rank_[s] = next_rank_++;
      rep_.subgraph_order.push_back(s);
      unranked.erase(std::find(unranked.begin(), unranked.end(), s));
    }
    for (int t : tasks) {
      state_[t] = 1;
      ready_.insert({rank_[eg_.tasks[t].subgraph], t});
    }
  }

  void dispatch(double now) {
    for (auto it = ready_.begin(); it != ready_.end();) {
      const int t = it->second;
      const auto& task = eg_.tasks[t];
      const int stream = static_cast<int>(stream_of(task.kind));
      bool free = true;
      for (int d : task.devices())
        if (busy_.count({d, stream})) free = false;
      if (!free) {
        ++it;
        continue;
      }
      for (int d : task.devices()) busy_[{d, stream}] = t;
      it = ready_.erase(it);
      state_[t] = 2;
      running_.insert(t);
      remaining_[t] = task.duration;
      share_[t] = 1;
      rep_.timeline[t].start = now;
      allocate(t, now);
    }
  }

  void update_rates(double /*now*/) {
    if (opt_.bandwidth_sharing) {
      std::map<LinkInstance, int> load;
      for (int t : running_)
        for (const auto& l : links_[t].links) ++load[l];
      for (int t : running_) {
        if (!eg_.tasks[t].is_comm()) continue;
        double eff = shared_bandwidth(c_, eg_.tasks[t].devices(), load);
        share_[t] = links_[t].solo / eff;
        auto& e = rep_.timeline[t];
        e.max_share = std::max(e.max_share, share_[t]);
      }
    }
    // Compute and gradient communication on a shared device slow each other.
    std::map<int, std::vector<int>> compute_on, grad_on;
    for (int t : running_) {
      const auto& task = eg_.tasks[t];
      if (task.kind == TaskKind::compute) compute_on[task.device].push_back(t);
      if (task.kind == TaskKind::gradient_comm)
        for (int d : task.devices()) grad_on[d].push_back(t);
    }
    for (const auto& [d, comps] : compute_on) {
      auto it = grad_on.find(d);
      if (it == grad_on.end()) continue;
      for (int t : comps) mark_overlap(t);
      for (int t : it->second) mark_overlap(t);
    }
  }

  void mark_overlap(int t) {
    auto& e = rep_.timeline[t];
    if (e.overlapped) return;
    e.overlapped = true;
    remaining_[t] *= 1 + opt_.gamma;
  }

  void record_links(double from, double to) {
    if (!opt_.record_links || !(to > from)) return;
    std::map<LinkInstance, double> used;
    for (int t : running_) {
      if (!eg_.tasks[t].is_comm()) continue;
      for (const auto& l : links_[t].links) used[l] += links_[t].solo / share_[t];
    }
    for (const auto& [l, u] : used)
      rep_.link_usage.push_back({l, from, to, u, c_.level_capacity(l.level)});
  }

  void complete(int t, double now) {
    const auto& task = eg_.tasks[t];
    const int stream = static_cast<int>(stream_of(task.kind));
    for (int d : task.devices()) busy_.erase({d, stream});
    running_.erase(t);
    share_.erase(t);
    state_[t] = 3;
    rep_.timeline[t].end = now;
    for (int d : task.devices()) dev_[d].busy[stream] += now - rep_.timeline[t].start;
    release(t);
  }

  void init_memory() {
    refs_.assign(eg_.buffers.size(), 0);
    allocated_.assign(eg_.buffers.size(), false);
    for (int d : eg_.devices()) {
      dev_[d].device = d;
      current_[d] = 0;
    }
    for (const auto& b : eg_.buffers) {
      refs_[b.id] = static_cast<int>(b.readers.size() + b.writers.size());
      if (!b.persistent) continue;
      allocated_[b.id] = true;
      current_[b.device] += b.bytes;
      dev_[b.device].persistent_bytes += b.bytes;
    }
    for (auto& [d, r] : dev_) r.peak_bytes = current_[d];
  }

  // Buffers come to life at their first writer, or first reader if no task
  // writes them (graph inputs, loss seeds).
  void allocate(int t, double now) {
    const auto& task = eg_.tasks[t];
    auto touch = [&](int b) {
      if (allocated_[b]) return;
      allocated_[b] = true;
      const auto& buf = eg_.buffers[b];
      current_[buf.device] += buf.bytes;
      auto& r = dev_[buf.device];
      if (current_[buf.device] > r.peak_bytes) {
        r.peak_bytes = current_[buf.device];
        r.peak_task = t;
        r.peak_time = now;
      }
    };
    for (int b : task.writes) touch(b);
    for (int b : task.reads)
      if (eg_.buffers[b].writers.empty()) touch(b);
  }

  void release(int t) {
    const auto& task = eg_.tasks[t];
    std::vector<int> bufs = task.reads;
    bufs.insert(bufs.end(), task.writes.begin(), task.writes.end());
    sort_unique(bufs);
    for (int b : bufs) {
      const auto& buf = eg_.buffers[b];
      int uses = 0;
      for (int r : buf.readers) uses += r == t;
      for (int w : buf.writers) uses += w == t;
      refs_[b] -= uses;
      if (refs_[b] == 0 && !buf.persistent && allocated_[b]) {
        current_[buf.device] -= buf.bytes;
        allocated_[b] = false;
      }
    }
  }

  void finish_memory() {
    for (auto& [d, r] : dev_) {
      r.final_bytes = current_[d];
      r.oom = r.peak_bytes > c_.device_memory;
      rep_.devices.push_back(r);
    }
  }

  [[noreturn]] void deadlock() const {
    std::vector<std::string> frontier;
    for (std::size_t i = 0; i < eg_.tasks.size() && frontier.size() < 16; ++i) {
      if (state_[i] == 3) continue;
      bool blocked_only_by_done = true;
      for (int p : eg_.tasks[i].preds)
        if (state_[p] != 3 && state_[p] != 0) blocked_only_by_done = false;
      if (blocked_only_by_done || state_[i] == 1) frontier.push_back(eg_.tasks[i].name);
    }
    throw AggregateError("deadlock: tasks can never run; stuck frontier:", frontier);
  }
};

}  // namespace detail

// Event-driven execution of an annotated graph with three streams per
// device, fair bandwidth sharing and compute/gradient-comm overlap.
inline SimReport simulate(const ExecutionGraph& eg, const ClusterSpec& c, SimOptions o = {}) {
  if (o.gamma < 0) throw Error("gamma", "must be >= 0");
  return detail::Simulator(eg, c, o).run();
}

inline json report_to_json(const ExecutionGraph& eg, const SimReport& r, bool with_timeline = true) {
  json devices = json::array();
  for (const auto& d : r.devices)
    devices.push_back({{"device", d.device},
                       {"peak_bytes", d.peak_bytes},
                       {"persistent_bytes", d.persistent_bytes},
                       {"final_bytes", d.final_bytes},
                       {"oom", d.oom},
                       {"peak_task", d.peak_task >= 0 ? eg.tasks[d.peak_task].name : ""},
                       {"peak_time", d.peak_time},
                       {"busy", {{"compute", d.busy[0]},
                                 {"feature_comm", d.busy[1]},
                                 {"gradient_comm", d.busy[2]}}}});
  json out = {{"iteration_time", r.iteration_time},
              {"throughput", r.iteration_time > 0 ? eg.batch_size / r.iteration_time : 0.0},
              {"device_memory", r.device_memory},
              {"oom", r.oom()},
              {"devices", devices},
              {"behaviors", {{"shared_tasks", r.shared_tasks},
                             {"overlapped_tasks", r.overlapped_tasks},
                             {"max_share", r.max_share}}}};
  if (with_timeline) {
    json tl = json::array();
    for (const auto& e : r.timeline)
      tl.push_back({{"task", eg.tasks[e.task].name},
                    {"start", e.start},
                    {"end", e.end},
                    {"share", e.max_share},
                    {"overlapped", e.overlapped}});
    out["timeline"] = tl;
  }
  return out;
}

inline std::string report_to_text(const ExecutionGraph& eg, const SimReport& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(6);
  os << "iteration time: " << r.iteration_time << " s\n";
  os << "device  peak_MB      persistent_MB  compute_s   feature_s   gradient_s  oom\n";
  for (const auto& d : r.devices) {
    os.precision(3);
    os << std::setw(6) << d.device << "  " << std::setw(11) << d.peak_bytes / 1e6 << "  "
       << std::setw(13) << d.persistent_bytes / 1e6 << "  ";
    os.precision(6);
    os << std::setw(10) << d.busy[0] << "  " << std::setw(10) << d.busy[1] << "  "
       << std::setw(10) << d.busy[2] << "  " << (d.oom ? "OOM" : "ok") << "\n";
  }
  os << "behaviors: " << r.shared_tasks << " shared, " << r.overlapped_tasks
     << " overlapped, max share " << r.max_share << "\n";
  os.precision(3);
  os << "throughput: " << (r.iteration_time > 0 ? eg.batch_size / r.iteration_time : 0.0)
     << " samples/s" << (r.oom() ? " (OOM predicted)" : "") << "\n";
  return os.str();
}

// Chrome trace format: one process per device, one thread per stream.
inline json chrome_trace(const ExecutionGraph& eg, const SimReport& r) {
  json events = json::array();
  for (const auto& e : r.timeline) {
    const auto& t = eg.tasks[e.task];
    for (int d : t.devices()) {
      json ev = {{"name", t.name},
                 {"ph", "X"},
                 {"pid", d},
                 {"tid", to_string(stream_of(t.kind))},
                 {"ts", e.start * 1e6},
                 {"dur", (e.end - e.start) * 1e6},
                 {"args", {{"share", e.max_share}, {"overlapped", e.overlapped}}}};
      events.push_back(ev);
    }
  }
  return {{"traceEvents", events}, {"displayTimeUnit", "ms"}};
}

}  // namespace stratsim
