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

// Acceptance checks: one PASS/FAIL line per criterion. Expected values come
// from oracles written here, independent of the library's scheduler,
// collective inference and memory accounting.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "layout_oracle.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using namespace stratsim;
using stratsim::testing::fixture;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
};

// ---------------------------------------------------------------------------
// 1. Pipeline closed form vs. brute-force enumeration of stage orders.

// Minimum makespan over every ballot order of F/B slots (the same order on
// all stages). Stage s runs its slots in order; F_j waits for F_j upstream,
// B_j for B_j downstream (or its own F_j on the last stage).
double pipeline_oracle(int p, int m, double tf, double tb) {
  double best = std::numeric_limits<double>::infinity();
  std::vector<char> seq;
  std::function<void(int, int)> rec = [&](int f, int b) {
    if (f == m && b == m) {
      std::vector<std::vector<double>> fe(p, std::vector<double>(m)), be = fe;
      // Forward slots are fixed by the order; evaluate stage by stage in
      // dependency order: forwards top-down, backwards bottom-up, iterating
      // to a fixed point since one stage interleaves both.
      for (int round = 0; round < 2 * (m + p); ++round) {
        bool changed = false;
        for (int s = 0; s < p; ++s) {
          double t = 0;
          int fi = 0, bi = 0;
          for (char c : seq) {
            double ready, end;
            if (c == 'F') {
              ready = s ? fe[s - 1][fi] : 0;
              end = std::max(t, ready) + tf;
              if (end != fe[s][fi]) changed = true;
              fe[s][fi++] = end;
            } else {
              ready = s + 1 < p ? be[s + 1][bi] : fe[s][bi];
              end = std::max(t, ready) + tb;
              if (end != be[s][bi]) changed = true;
              be[s][bi++] = end;
            }
            t = end;
          }
        }
        if (!changed) break;
      }
      best = std::min(best, be[0][m - 1]);
      return;
    }
    if (f < m) {
      seq.push_back('F');
      rec(f + 1, b);
      seq.pop_back();
    }
    if (b < f) {
      seq.push_back('B');
      rec(f, b + 1);
      seq.pop_back();
    }
  };
  rec(0, 0);
  return best;
}

json chain_model(int p, int64_t batch) {
  using stratsim::testing::dims;
  using stratsim::testing::op_json;
  using stratsim::testing::tensor_json;
  json layers = json::array();
  for (int i = 0; i < p; ++i) {
    const std::string n = std::to_string(i);
    json ts = json::array(), ops = json::array();
    const std::string in = i == 0 ? "x" : "y" + std::to_string(i - 1);
    if (i == 0) ts.push_back(tensor_json("x", dims({{"b", batch}, {"h", 64}}), "activation", false));
    ts.push_back(tensor_json("W" + n, dims({{"h", 64}}), "parameter"));
    ts.push_back(tensor_json("y" + n, dims({{"b", batch}, {"h", 64}})));
    ops.push_back(op_json("elementwise", "L" + n + ".op", {in, "W" + n}, {"y" + n}));
    if (i == p - 1) {
      ts.push_back(tensor_json("loss", dims({{"b", batch}})));
      ops.push_back(op_json("loss", "L" + n + ".loss", {"y" + n}, {"loss"}));
    }
    layers.push_back({{"name", "L" + n}, {"tensors", ts}, {"ops", ops}});
  }
  return {{"batch_size", batch}, {"layers", layers}};
}

json chain_strategy(int p, int m) {
  auto one = [](int d) { return json{{"partition", json::object()}, {"map", {{d}}}}; };
  json nodes = json::array();
  nodes.push_back({{"path", "root"},
                   {"schedule",
                    {{"n_micro_batch", m}, {"max_ongoing_micro_batch", m}, {"recomputation", false}}}});
  for (int i = 0; i < p; ++i) {
    const std::string n = std::to_string(i);
    json node = {{"path", "L" + n}, {"ops", {{"L" + n + ".op", one(i)}}}};
    json tensors = json::object();
    if (i == 0) tensors["x"] = one(0);
    if (i + 1 < p) tensors["y" + n] = one(i + 1);  // boundary lives downstream
    node["tensors"] = tensors;
    nodes.push_back(node);
  }
  return {{"nodes", nodes}};
}

// Durations: t_f split over a stage's forward tasks; t_b split over the
// backward tasks producing activation gradients (the chain upstream
// stages wait on), or over all backward tasks on the first stage.
void set_chain_durations(ExecutionGraph& eg, const ModelGraph& g, double tf, double tb) {
  auto act_grad = [&](const Task& t) {
    for (const auto& out : g.op(t.op).outputs) {
      const auto& spec = g.tensor(out);
      if (!spec.grad_of.empty() && g.tensor(spec.grad_of).kind == TensorKind::activation)
        return true;
    }
    return false;
  };
  std::map<int, std::vector<int>> fwd, chain, all_bwd;
  for (const auto& t : eg.tasks) {
    if (t.kind != TaskKind::compute) continue;
    const auto ph = eg.subgraphs[t.subgraph].phase;
    if (ph == Phase::forward) fwd[t.subgraph].push_back(t.id);
    if (ph == Phase::backward) {
      all_bwd[t.subgraph].push_back(t.id);
      if (act_grad(t)) chain[t.subgraph].push_back(t.id);
    }
  }
  for (auto& t : eg.tasks) t.duration = 0;
  for (const auto& [sg, ts] : fwd)
    for (int t : ts) eg.tasks[t].duration = tf / ts.size();
  for (const auto& [sg, ts] : all_bwd) {
    const auto& use = chain.count(sg) ? chain[sg] : ts;
    for (int t : use) eg.tasks[t].duration = tb / use.size();
  }
}

Verdict criterion1() {
  Verdict v;
  const double tf = 1, tb = 2;
  int checked = 0;
  auto cluster = stratsim::testing::nvlink_node(4);
  for (int p = 1; p <= 4; ++p)
    for (int m = 1; m <= 8; ++m) {
      auto w = make_workload(parse_model(chain_model(p, 840)), chain_strategy(p, m), cluster);
      auto eg = compile(w.model, w.tree, w.cluster);
      if (static_cast<int>(eg.units.size()) != p) {
        v.pass = false;
        v.detail = "p=" + std::to_string(p) + " compiled to " + std::to_string(eg.units.size()) + " stages";
        return v;
      }
      set_chain_durations(eg, w.model, tf, tb);
      const double sim = simulate(eg, w.cluster).iteration_time;
      const double oracle = pipeline_oracle(p, m, tf, tb);
      const double closed = (m + p - 1) * (tf + tb);
      if (sim != closed || oracle != closed) {
        v.pass = false;
        std::ostringstream os;
        os << "p=" << p << " m=" << m << ": simulated " << sim << ", oracle " << oracle
           << ", closed form " << closed;
        v.detail = os.str();
        return v;
      }
      ++checked;
    }
  v.detail = std::to_string(checked) + " (p,m) pairs exact";
  return v;
}

// ---------------------------------------------------------------------------
// 2. Random graphs vs. a rescanning list scheduler.

ExecutionGraph random_graph(std::mt19937& rng) {
  ExecutionGraph eg;
  Subgraph sg;
  sg.name = "all";
  const int n = 5 + static_cast<int>(rng() % 46);
  for (int i = 0; i < n; ++i) {
    Task t;
    t.id = i;
    t.name = "t" + std::to_string(i);
    t.subgraph = 0;
    t.duration = 1 + static_cast<int>(rng() % 5);
    const int kind = static_cast<int>(rng() % 3);
    if (kind == 0) {
      t.kind = TaskKind::compute;
      t.device = static_cast<int>(rng() % 8);
    } else {
      // feature comms on 0-3, gradient comms on 4-7: no link is shared
      const int base = kind == 1 ? 0 : 4;
      std::vector<int> pool{base, base + 1, base + 2, base + 3};
      std::shuffle(pool.begin(), pool.end(), rng);
      t.kind = kind == 1 ? TaskKind::feature_comm : TaskKind::gradient_comm;
      t.group.assign(pool.begin(), pool.begin() + 2 + (rng() % 2));
      t.primitive = Primitive::all_reduce;
    }
    sg.tasks.push_back(i);
    eg.tasks.push_back(t);
    for (int j = 0; j < i; ++j)
      if (rng() % 100 < 12) eg.edges.push_back({j, i, false});
  }
  eg.subgraphs.push_back(sg);
  link_edges(eg);
  return eg;
}

// Integer-time list scheduler: at every event, start waiting tasks in id
// order when their predecessors are done and their (device, stream) slots
// are free.
double list_schedule(const ExecutionGraph& eg) {
  const int n = static_cast<int>(eg.tasks.size());
  std::vector<double> end(n, -1);
  std::vector<bool> started(n, false);
  std::map<std::pair<int, int>, double> free_at;
  auto stream = [](TaskKind k) { return static_cast<int>(k); };
  auto members = [](const Task& t) {
    std::vector<int> d = t.kind == TaskKind::compute ? std::vector<int>{t.device} : t.group;
    return d;
  };
  double now = 0;
  int done = 0;
  while (done < n) {
    for (int i = 0; i < n; ++i) {
      if (started[i]) continue;
      bool ok = true;
      for (int p : eg.tasks[i].preds) ok = ok && end[p] >= 0 && end[p] <= now;
      for (int d : members(eg.tasks[i])) {
        auto it = free_at.find({d, stream(eg.tasks[i].kind)});
        if (it != free_at.end() && it->second > now) ok = false;
      }
      if (!ok) continue;
      started[i] = true;
      end[i] = now + eg.tasks[i].duration;
      for (int d : members(eg.tasks[i])) free_at[{d, stream(eg.tasks[i].kind)}] = end[i];
    }
    double next = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i)
      if (started[i] && end[i] > now) next = std::min(next, end[i]);
    now = next;
    done = 0;
    for (int i = 0; i < n; ++i) done += started[i] && end[i] <= now;
  }
  return *std::max_element(end.begin(), end.end());
}

Verdict criterion2() {
  Verdict v;
  std::mt19937 rng(2024);
  auto cluster = stratsim::testing::nvlink_node(8);
  for (int g = 0; g < 200; ++g) {
    auto eg = random_graph(rng);
    const double sim = simulate(eg, cluster).iteration_time;
    const double oracle = list_schedule(eg);
    if (sim != oracle) {
      v.pass = false;
      std::ostringstream os;
      os << "graph " << g << " (" << eg.tasks.size() << " tasks): simulated " << sim
         << ", oracle " << oracle;
      v.detail = os.str();
      return v;
    }
  }
  v.detail = "200 graphs equal";
  return v;
}

// ---------------------------------------------------------------------------
// 3. Collective inference vs. element-level replay.

Verdict criterion3() {
  Verdict v;
  std::mt19937 rng(99);
  int identity = 0;
  for (int i = 0; i < 500; ++i) {
    auto ext = stratsim::testing::random_extents(rng);
    auto pool_a = stratsim::testing::random_pool(rng);
    auto pool_b = rng() % 2 ? pool_a : stratsim::testing::random_pool(rng);
    const int nc = rng() % 3 == 0 ? 2 : 1;
    auto src = stratsim::testing::random_layout(rng, ext, nc, pool_a);
    PlacementLayout dst;
    if (rng() % 10 == 0) {
      dst = src;
      ++identity;
    } else {
      dst = stratsim::testing::random_layout(rng, ext, nc > 1 && rng() % 5 == 0 ? nc : 1, pool_b);
    }
    CommPlan plan;
    try {
      plan = infer_transform(src, dst);
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = "pair " + std::to_string(i) + ": " + e.what();
      return v;
    }
    std::string why;
    if (src == dst && !plan.empty()) {
      v.pass = false;
      v.detail = "pair " + std::to_string(i) + ": identity gave a non-empty plan";
      return v;
    }
    if (!stratsim::testing::element_oracle(src, dst, plan, &why)) {
      v.pass = false;
      v.detail = "pair " + std::to_string(i) + ": " + why;
      return v;
    }
  }
  v.detail = "500 pairs sound, " + std::to_string(identity) + " identity pairs empty";
  return v;
}

// ---------------------------------------------------------------------------
// 4. Fluid bandwidth sharing.

ExecutionGraph flows(const std::vector<std::pair<double, double>>& start_and_work) {
  // Each flow i is a comm {i, 8+i} across the NIC, delayed by a compute task
  // on device 16+i when its start is positive.
  ExecutionGraph eg;
  eg.subgraphs.push_back({});
  auto add = [&](Task t) {
    t.id = static_cast<int>(eg.tasks.size());
    t.name = "t" + std::to_string(t.id);
    t.subgraph = 0;
    eg.subgraphs[0].tasks.push_back(t.id);
    eg.tasks.push_back(t);
    return t.id;
  };
  for (std::size_t i = 0; i < start_and_work.size(); ++i) {
    const int d = static_cast<int>(i);
    Task c;
    c.kind = TaskKind::feature_comm;
    c.primitive = Primitive::send_recv;
    c.group = {d, 8 + d};
    c.duration = start_and_work[i].second;
    int comm = add(c);
    if (start_and_work[i].first > 0) {
      Task delay;
      delay.kind = TaskKind::compute;
      delay.device = d;
      delay.duration = start_and_work[i].first;
      int pre = add(delay);
      eg.edges.push_back({pre, comm, false});
    }
  }
  link_edges(eg);
  return eg;
}

bool rel_close(double a, double b, double tol) {
  return std::abs(a - b) <= tol * std::max(1.0, std::abs(b));
}

Verdict criterion4() {
  Verdict v;
  auto cluster = stratsim::testing::two_nodes(8, 12.5e9, 150e9);
  std::ostringstream os;
  for (int k = 1; k <= 8; ++k) {
    const double w = 0.003;
    auto eg = flows(std::vector<std::pair<double, double>>(k, {0.0, w}));
    auto r = simulate(eg, cluster);
    for (const auto& e : r.timeline)
      if (eg.tasks[e.task].is_comm() && !rel_close(e.end - e.start, k * w, 1e-9)) {
        v.pass = false;
        os << "k=" << k << " took " << e.end - e.start << " not " << k * w;
        v.detail = os.str();
        return v;
      }
  }
  // Mixed start: A alone until t0, then both at half rate. A ends at
  // t0 + 2 (w - t0) = 2w - t0; B then finishes its last t0 alone at 2w.
  for (auto [w, t0] : std::vector<std::pair<double, double>>{{1.0, 0.25}, {0.7, 0.1}, {3.0, 2.5}}) {
    auto eg = flows({{0.0, w}, {t0, w}});
    auto r = simulate(eg, cluster);
    double a = -1, b = -1;
    for (const auto& e : r.timeline) {
      const auto& t = eg.tasks[e.task];
      if (!t.is_comm()) continue;
      (t.group[0] == 0 ? a : b) = e.end;
    }
    if (!rel_close(a, 2 * w - t0, 1e-9) || !rel_close(b, 2 * w, 1e-9)) {
      v.pass = false;
      os << "w=" << w << " t0=" << t0 << ": ends " << a << ", " << b;
      v.detail = os.str();
      return v;
    }
  }
  v.detail = "k = 1..8 concurrent flows take k x solo; 3 mixed-start cases match";
  return v;
}

// ---------------------------------------------------------------------------
// 5. Alpha-beta identities.

Verdict criterion5() {
  Verdict v;
  int checked = 0;
  for (double S : {1.0, 4096.0, 1e6, 3.3e8})
    for (double B : {1e9, 12.5e9, 150e9})
      for (double a : {0.0, 1e-6, 2.5e-5}) {
        const double ar = collective_cost(Primitive::all_reduce, S, 2, a, B);
        const double rs = collective_cost(Primitive::reduce_scatter, S, 2, a, B);
        const double ag = collective_cost(Primitive::all_gather, S, 2, a, B);
        if (!rel_close(ar, rs + ag, 1e-12)) {
          v.pass = false;
          v.detail = "n=2 all-reduce != reduce-scatter + all-gather";
          return v;
        }
        ++checked;
        if (a != 0) continue;
        for (int n : {2, 3, 4, 8, 16}) {
          const double base = S / B, k = n - 1.0;
          const std::vector<std::pair<Primitive, double>> coeff{
              {Primitive::all_reduce, 2 * k / n}, {Primitive::reduce_scatter, k / n},
              {Primitive::all_gather, k / n},     {Primitive::all_to_all, k / n},
              {Primitive::broadcast, 1.0}};
          for (auto [p, c] : coeff)
            if (!rel_close(collective_cost(p, S, n, 0, B), c * base, 1e-12)) {
              v.pass = false;
              v.detail = to_string(p) + " not proportional to S/B at n=" + std::to_string(n);
              return v;
            }
          if (!rel_close(collective_cost(Primitive::send_recv, S, 2, 0, B), base, 1e-12)) {
            v.pass = false;
            v.detail = "send-recv not S/B";
            return v;
          }
          ++checked;
        }
      }
  // Through the cluster with no corrections: same as the bare formula.
  auto c = stratsim::testing::nvlink_node(8, 100e9);
  for (int n : {2, 4, 8}) {
    std::vector<int> g;
    for (int i = 0; i < n; ++i) g.push_back(i);
    if (!rel_close(collective_cost(Primitive::all_reduce, 1e8, g, c, {}),
                   2.0 * (n - 1) / n * 1e8 / 100e9, 1e-12)) {
      v.pass = false;
      v.detail = "cluster path differs from the formula";
      return v;
    }
  }
  v.detail = std::to_string(checked) + " grid points";
  return v;
}

// ---------------------------------------------------------------------------
// Shared fixture runs for 6, 7 and 10.

Workload fixture_workload(const std::string& model, const std::string& strategy,
                          const std::string& cluster) {
  return load_workload(fixture(model), fixture(strategy), fixture(cluster));
}

const ComputeCostTable& costs() {
  static const ComputeCostTable t = load_cost_table(fixture("costs.json"));
  return t;
}

const std::vector<std::string> kGpt = {
    "gpt_dp8_mp1_pp1.json", "gpt_dp1_mp8_pp1.json", "gpt_dp4_mp2_pp1.json", "gpt_dp2_mp4_pp1.json",
    "gpt_dp4_mp1_pp2.json", "gpt_dp2_mp1_pp4.json", "gpt_dp1_mp4_pp2.json", "gpt_dp2_mp2_pp2.json"};

struct Case {
  std::string model, strategy, cluster;
};

// Every fixture combination the suite ships.
std::vector<Case> all_cases() {
  std::vector<Case> cases = {{"fig3_model.json", "fig3_dp4.json", "hc1.json"},
                             {"fig3_model.json", "fig3_pipeline.json", "hc1.json"},
                             {"fig3_model.json", "fig3_hybrid.json", "hc1.json"},
                             {"two_layer_model.json", "two_layer_plain.json", "hc1.json"},
                             {"two_layer_model.json", "two_layer_recompute.json", "hc1.json"},
                             {"gpt_large_model.json", "gpt_large_dp8.json", "single_node_16g.json"},
                             {"gpt_large_model.json", "gpt_large_zero_recompute.json",
                              "single_node_16g.json"},
                             {"vgg19_model.json", "vgg19_dp32.json", "hc2.json"}};
  for (const auto& s : kGpt) cases.push_back({"gpt_model.json", s, "hc2.json"});
  return cases;
}

std::vector<std::string> leak_report;

Evaluation run_and_check_leaks(const Workload& w, const std::string& tag) {
  auto ev = evaluate(w, costs(), {});
  for (const auto& d : ev.report.devices)
    if (d.final_bytes != d.persistent_bytes)
      leak_report.push_back(tag + " device " + std::to_string(d.device) + ": final " +
                            std::to_string(d.final_bytes) + " vs persistent " +
                            std::to_string(d.persistent_bytes));
  return ev;
}

int64_t activation_peak(const SimReport& r, int device) {
  for (const auto& d : r.devices)
    if (d.device == device) return d.peak_bytes - d.persistent_bytes;
  return -1;
}

double compute_busy(const SimReport& r) {
  double s = 0;
  for (const auto& d : r.devices) s += d.busy[0];
  return s;
}

Verdict criterion6() {
  Verdict v;
  std::ostringstream os;
  // ZeRO: persistent state sharded over 8 devices.
  auto z = fixture_workload("gpt_large_model.json", "gpt_large_zero_recompute.json",
                            "single_node_16g.json");
  int64_t total = 0;
  for (const auto& t : z.model.tensors)
    if (t.kind == TensorKind::parameter || t.kind == TensorKind::optimizer_state)
      total += t.elements() * t.element_bytes;
  auto zev = run_and_check_leaks(z, "zero");
  for (const auto& d : zev.report.devices)
    if (d.persistent_bytes * 8 != total) {
      v.pass = false;
      os << "device " << d.device << " persistent " << d.persistent_bytes << " vs total/8 "
         << total / 8 << "; ";
    }
  // Recomputation on the two-layer fixture.
  auto plain = fixture_workload("two_layer_model.json", "two_layer_plain.json", "hc1.json");
  auto rc = fixture_workload("two_layer_model.json", "two_layer_recompute.json", "hc1.json");
  auto pe = run_and_check_leaks(plain, "plain");
  auto re = run_and_check_leaks(rc, "recompute");
  double forward = 0;
  for (const auto& t : pe.graph.tasks)
    if (t.kind == TaskKind::compute && pe.graph.subgraphs[t.subgraph].phase == Phase::forward)
      forward += t.duration;
  const double extra = compute_busy(re.report) - compute_busy(pe.report);
  const int64_t pa = activation_peak(pe.report, 0), ra = activation_peak(re.report, 0);
  if (!(ra < pa)) {
    v.pass = false;
    os << "recompute activation peak " << ra << " not below " << pa << "; ";
  }
  if (!rel_close(extra, forward, 1e-12)) {
    v.pass = false;
    os << "extra compute " << extra << " vs forward cost " << forward << "; ";
  }
  // No leak anywhere: final resident bytes equal persistent bytes.
  for (const auto& c : all_cases())
    run_and_check_leaks(fixture_workload(c.model, c.strategy, c.cluster), c.strategy);
  if (!leak_report.empty()) {
    v.pass = false;
    os << leak_report.size() << " leaking device reports, first: " << leak_report.front() << "; ";
  }
  if (v.pass) {
    os << "no leak over " << all_cases().size() << " fixtures; "
       << "persistent = total/8 = " << total / 8 << " B; activation peak " << pa << " -> " << ra
       << " B; extra compute " << extra << " s = forward cost";
  }
  v.detail = os.str();
  return v;
}

Verdict criterion7() {
  Verdict v;
  auto dp = run_and_check_leaks(
      fixture_workload("gpt_large_model.json", "gpt_large_dp8.json", "single_node_16g.json"), "dp8");
  auto zr = run_and_check_leaks(fixture_workload("gpt_large_model.json",
                                                 "gpt_large_zero_recompute.json",
                                                 "single_node_16g.json"),
                                "zero");
  // Arithmetic behind the fixture: replicated weights, gradients and
  // optimizer state alone already take this much per device.
  auto w = fixture_workload("gpt_large_model.json", "gpt_large_dp8.json", "single_node_16g.json");
  int64_t replicated = 0;
  for (const auto& t : w.model.tensors) {
    bool param_grad = t.kind == TensorKind::gradient && !t.grad_of.empty() &&
                      w.model.tensor(t.grad_of).kind == TensorKind::parameter;
    if (t.kind == TensorKind::parameter || t.kind == TensorKind::optimizer_state || param_grad)
      replicated += t.elements() * t.element_bytes;
  }
  std::ostringstream os;
  os << "DP8 peak " << dp.report.peak_bytes() / 1e9 << " GB (weights+grads+opt "
     << replicated / 1e9 << " GB) oom=" << dp.report.oom() << "; ZeRO+recompute peak "
     << zr.report.peak_bytes() / 1e9 << " GB oom=" << zr.report.oom() << " on "
     << w.cluster.device_memory / 1e9 << " GB";
  v.pass = dp.report.oom() && !zr.report.oom() && dp.report.peak_bytes() > w.cluster.device_memory &&
           zr.report.peak_bytes() <= w.cluster.device_memory;
  v.detail = os.str();
  return v;
}

// ---------------------------------------------------------------------------
// 8. Strategy ranking vs. an independent fluid scheduler.

// Simplified scheduler: priority is (backward-class first, micro-batch,
// task id); compute at rate 1; comm at the fair-share rate of the links it
// crosses; no compute/communication interference (gamma = 0).
double fluid_oracle(const ExecutionGraph& eg, const ClusterSpec& c) {
  const int n = static_cast<int>(eg.tasks.size());
  std::vector<int> waiting(n);
  for (const auto& t : eg.tasks) waiting[t.id] = static_cast<int>(t.preds.size());
  auto prio = [&](int i) {
    const auto& t = eg.tasks[i];
    const bool fwd = eg.subgraphs[t.subgraph].phase == Phase::forward;
    return std::make_tuple(fwd ? 1 : 0, t.micro_batch < 0 ? 1 << 30 : t.micro_batch, i);
  };
  std::set<std::tuple<int, int, int>> ready;
  for (int i = 0; i < n; ++i)
    if (!waiting[i]) ready.insert(prio(i));
  std::map<int, double> left;  // running task -> solo seconds left
  std::set<std::pair<int, int>> busy;
  auto slots = [&](int i) {
    std::vector<std::pair<int, int>> s;
    for (int d : eg.tasks[i].devices()) s.push_back({d, static_cast<int>(eg.tasks[i].kind)});
    return s;
  };
  std::vector<double> solo(n, 0);
  for (const auto& t : eg.tasks)
    if (t.is_comm()) solo[t.id] = shared_bandwidth(c, t.devices(), {});
  double now = 0;
  int done = 0;
  while (done < n) {
    for (auto it = ready.begin(); it != ready.end();) {
      const int i = std::get<2>(*it);
      bool ok = true;
      for (const auto& s : slots(i)) ok = ok && !busy.count(s);
      if (!ok) {
        ++it;
        continue;
      }
      for (const auto& s : slots(i)) busy.insert(s);
      left[i] = eg.tasks[i].duration;
      it = ready.erase(it);
    }
    std::map<LinkInstance, int> load;
    for (const auto& [i, l] : left)
      if (eg.tasks[i].is_comm())
        for (const auto& li : crossed_links(c, eg.tasks[i].devices())) ++load[li];
    std::map<int, double> rate;
    double dt = std::numeric_limits<double>::infinity();
    for (const auto& [i, l] : left) {
      rate[i] = eg.tasks[i].is_comm() ? shared_bandwidth(c, eg.tasks[i].devices(), load) / solo[i]
                                      : 1.0;
      dt = std::min(dt, l / rate[i]);
    }
    now += dt;
    std::vector<int> fin;
    for (auto& [i, l] : left) {
      l -= dt * rate[i];
      if (l <= 1e-12 * std::max(1.0, eg.tasks[i].duration)) fin.push_back(i);
    }
    for (int i : fin) {
      left.erase(i);
      for (const auto& s : slots(i)) busy.erase(s);
      ++done;
      for (int s : eg.tasks[i].succs)
        if (--waiting[s] == 0) ready.insert(prio(s));
    }
  }
  return now;
}

Verdict criterion8() {
  Verdict v;
  struct Row {
    std::string file, label;
    double sim = 0, oracle = 0;
  };
  std::vector<Row> rows;
  for (const auto& f : kGpt) {
    auto w = fixture_workload("gpt_model.json", f, "hc2.json");
    auto ev = run_and_check_leaks(w, f);
    rows.push_back({f, strategy_label(w, ev.graph), ev.report.iteration_time,
                    fluid_oracle(ev.graph, w.cluster)});
  }
  int compared = 0;
  std::ostringstream os;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      const double a = rows[i].oracle, b = rows[j].oracle;
      if (std::abs(a - b) <= 0.05 * std::min(a, b)) continue;
      ++compared;
      if ((a < b) != (rows[i].sim < rows[j].sim)) {
        v.pass = false;
        os << rows[i].label << " vs " << rows[j].label << " flipped (oracle " << a << "/" << b
           << ", simulated " << rows[i].sim << "/" << rows[j].sim << "); ";
      }
    }
  std::sort(rows.begin(), rows.end(), [](const Row& x, const Row& y) { return x.sim < y.sim; });
  os << compared << " pairs separated by >5% agree; simulated order:";
  for (const auto& r : rows) os << " " << r.label;
  v.detail = os.str();
  return v;
}

// ---------------------------------------------------------------------------
// 9. Simulation cost.

Verdict criterion9() {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  auto w = fixture_workload("vgg19_model.json", "vgg19_dp32.json", "hc2.json");
  auto ev = evaluate(w, costs(), {});
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ostringstream os;
  os << ev.graph.tasks.size() << " tasks on " << ev.graph.devices().size() << " devices in "
     << secs << " s";
  v.pass = secs < 10.0 && ev.graph.devices().size() == 32;
  v.detail = os.str();
  return v;
}

// ---------------------------------------------------------------------------
// 10. Determinism, in-process and through the command line.

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string cli_capture(const std::string& args, const fs::path& dir, int run) {
  const auto out = dir / ("out" + std::to_string(run));
  const std::string cmd = std::string(STRATSIM_CLI) + " " + args + " > " + out.string() + " 2>&1";
  int status = std::system(cmd.c_str());
  return "exit " + std::to_string(WIFEXITED(status) ? WEXITSTATUS(status) : -1) + "\n" +
         slurp(out);
}

Verdict criterion10() {
  Verdict v;
  const auto cases = all_cases();
  int in_process = 0;
  for (const auto& c : cases) {
    std::string first;
    for (int r = 0; r < 3; ++r) {
      auto ev = evaluate(fixture_workload(c.model, c.strategy, c.cluster), costs(), {});
      std::string s = graph_to_json(ev.graph).dump() + report_to_json(ev.graph, ev.report).dump() +
                      chrome_trace(ev.graph, ev.report).dump();
      if (r == 0) first = std::move(s);
      else if (s != first) {
        v.pass = false;
        v.detail = c.strategy + " differs between runs";
        return v;
      }
    }
    ++in_process;
  }

  const auto dir = fs::temp_directory_path() / ("stratsim_accept_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  auto f = [](const std::string& n) { return fixture(n); };
  std::vector<std::string> commands;
  for (const auto& c : cases) {
    const std::string base = " --model " + f(c.model) + " --strategy " + f(c.strategy) +
                             " --cluster " + f(c.cluster);
    commands.push_back("validate" + base);
    commands.push_back("compile" + base + " --format json");
    commands.push_back("simulate" + base + " --costs " + f("costs.json") + " --format json");
    commands.push_back("simulate" + base + " --costs " + f("costs.json") + " --corrections " +
                       f("corrections.json") + " --gamma 0.1");
    commands.push_back("dump-strategy" + base);
  }
  std::string cmp = "compare --model " + f("gpt_model.json") + " --cluster " + f("hc2.json") +
                    " --costs " + f("costs.json");
  for (const auto& s : kGpt) cmp += " --strategy " + f(s);
  commands.push_back(cmp);
  commands.push_back(cmp + " --format json");
  commands.push_back("explain-transform --model " + f("fig3_model.json") + " --strategy " +
                     f("fig3_pipeline.json") + " --cluster " + f("hc1.json") + " --tensor yc");
  // File outputs too: graph dump and trace.
  for (int r = 0; r < 3; ++r) {
    const auto g = dir / ("graph" + std::to_string(r) + ".json");
    const auto t = dir / ("trace" + std::to_string(r) + ".json");
    cli_capture("simulate --model " + f("fig3_model.json") + " --strategy " +
                    f("fig3_pipeline.json") + " --cluster " + f("hc1.json") + " --costs " +
                    f("costs.json") + " --dump-graph " + g.string() + " --trace " + t.string(),
                dir, r);
  }
  for (int r = 1; r < 3; ++r)
    if (slurp(dir / ("graph" + std::to_string(r) + ".json")) != slurp(dir / "graph0.json") ||
        slurp(dir / ("trace" + std::to_string(r) + ".json")) != slurp(dir / "trace0.json")) {
      v.pass = false;
      v.detail = "graph dump or trace file differs between runs";
      return v;
    }
  for (const auto& cmd : commands) {
    const std::string a = cli_capture(cmd, dir, 0);
    for (int r = 1; r < 3; ++r)
      if (cli_capture(cmd, dir, r) != a) {
        v.pass = false;
        v.detail = "command output differs: " + cmd;
        return v;
      }
  }
  fs::remove_all(dir);
  v.detail = std::to_string(in_process) + " fixtures x3 in process, " +
             std::to_string(commands.size() + 1) + " commands x3 via the CLI, bit-identical";
  return v;
}

}  // namespace

int main() {
  std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"pipeline closed form", criterion1},   {"scheduler vs list oracle", criterion2},
      {"collective inference soundness", criterion3}, {"fair-share exactness", criterion4},
      {"alpha-beta identities", criterion5},  {"memory properties", criterion6},
      {"OOM verdict flip", criterion7},        {"strategy order preservation", criterion8},
      {"simulation cost", criterion9},         {"determinism", criterion10}};
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("exception: ") + e.what();
    }
    std::printf("CRITERION %zu %s: %s - %s\n", i + 1, criteria[i].first.c_str(),
                v.pass ? "PASS" : "FAIL", v.detail.c_str());
    std::fflush(stdout);
    failed += !v.pass;
  }
  return failed ? 1 : 0;
}
