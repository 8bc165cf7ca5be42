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

// Command-line front end: validate, compile, simulate, compare, inspect.

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <sstream>

#include "stratsim.hpp"

namespace {

using namespace stratsim;

constexpr int kExitOk = 0;
constexpr int kExitInput = 1;
constexpr int kExitOom = 2;

struct Args {
  std::string model, cluster, costs, corrections, output, trace, dump_graph;
  std::vector<std::string> strategies;
  std::string format = "text";
  double gamma = 0;
  std::string tensor, from = "producer", to = "memory";
};

void emit(const Args& a, const std::string& text) {
  if (a.output.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(a.output);
  if (!f) throw Error(a.output, "cannot write output file");
  f << text;
}

void write_json(const std::string& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw Error(path, "cannot write file");
  f << j.dump(1) << "\n";
}

const std::string& one_strategy(const Args& a) {
  if (a.strategies.size() != 1) throw Error("--strategy", "exactly one strategy file expected");
  return a.strategies.front();
}

ComputeCostTable costs_of(const Args& a) {
  if (a.costs.empty()) throw Error("--costs", "a cost table is required");
  return load_cost_table(a.costs);
}

CorrectionFactors corrections_of(const Args& a) {
  return a.corrections.empty() ? CorrectionFactors{} : load_corrections(a.corrections);
}

int cmd_validate(const Args& a) {
  auto model = load_model(a.model);
  std::vector<std::string> diags;
  if (!a.cluster.empty()) {
    auto cluster = load_cluster(a.cluster);
    for (const auto& s : a.strategies) {
      try {
        load_workload(a.model, s, a.cluster);
      } catch (const AggregateError& e) {
        for (const auto& item : e.items()) diags.push_back(s + ": " + item);
      } catch (const Error& e) {
        diags.push_back(std::string(e.what()));
      }
    }
  }
  if (a.format == "json") {
    emit(a, json{{"valid", diags.empty()}, {"diagnostics", diags}}.dump(1) + "\n");
  } else {
    std::ostringstream os;
    if (diags.empty()) {
      os << "ok: " << model.layers.size() << " layers, " << model.ops.size()
         << " forward operators, " << model.tensors.size() << " tensors\n";
    }
    for (const auto& d : diags) os << "error: " << d << "\n";
    emit(a, os.str());
  }
  return diags.empty() ? kExitOk : kExitInput;
}

int cmd_compile(const Args& a) {
  auto w = load_workload(a.model, one_strategy(a), a.cluster);
  auto eg = compile(w.model, w.tree, w.cluster);
  if (!a.dump_graph.empty()) write_json(a.dump_graph, graph_to_json(eg));
  std::map<std::string, int> kinds;
  for (const auto& t : eg.tasks) ++kinds[to_string(t.kind)];
  if (a.format == "json") {
    json units = json::array();
    for (const auto& u : eg.units)
      units.push_back({{"name", u.name}, {"devices", u.devices}, {"layers", u.layers.size()}});
    emit(a, json{{"tasks", eg.tasks.size()},
                 {"by_kind", kinds},
                 {"subgraphs", eg.subgraphs.size()},
                 {"buffers", eg.buffers.size()},
                 {"units", units},
                 {"label", strategy_label(w, eg)}}
                    .dump(1) +
                "\n");
    return kExitOk;
  }
  std::ostringstream os;
  os << "strategy " << strategy_label(w, eg) << ": " << eg.tasks.size() << " tasks";
  for (const auto& [k, n] : kinds) os << ", " << n << " " << k;
  os << "\n" << eg.subgraphs.size() << " subgraphs, " << eg.buffers.size() << " buffers\n";
  for (const auto& u : eg.units)
    os << "unit " << u.name << " on devices [" << join_ints(u.devices) << "]\n";
  emit(a, os.str());
  return kExitOk;
}

int cmd_simulate(const Args& a) {
  auto w = load_workload(a.model, one_strategy(a), a.cluster);
  SimOptions opts;
  opts.gamma = a.gamma;
  auto ev = evaluate(w, costs_of(a), corrections_of(a), opts);
  if (!a.trace.empty()) write_json(a.trace, chrome_trace(ev.graph, ev.report));
  if (!a.dump_graph.empty()) write_json(a.dump_graph, graph_to_json(ev.graph));
  if (a.format == "json") {
    auto j = report_to_json(ev.graph, ev.report, false);
    j["strategy"] = strategy_label(w, ev.graph);
    emit(a, j.dump(1) + "\n");
  } else {
    emit(a, "strategy " + strategy_label(w, ev.graph) + "\n" +
                report_to_text(ev.graph, ev.report));
  }
  return ev.report.oom() ? kExitOom : kExitOk;
}

int cmd_compare(const Args& a) {
  if (a.strategies.empty()) throw Error("--strategy", "at least one strategy file expected");
  auto costs = costs_of(a);
  auto corr = corrections_of(a);
  struct Row {
    std::string file, label;
    double time = 0, throughput = 0;
    int64_t peak = 0;
    bool oom = false;
  };
  std::vector<Row> rows;
  for (const auto& s : a.strategies) {
    auto w = load_workload(a.model, s, a.cluster);
    SimOptions opts;
    opts.gamma = a.gamma;
    auto ev = evaluate(w, costs, corr, opts);
    Row r;
    r.file = s;
    r.label = strategy_label(w, ev.graph);
    r.time = ev.report.iteration_time;
    r.throughput = r.time > 0 ? ev.graph.batch_size / r.time : 0;
    r.peak = ev.report.peak_bytes();
    r.oom = ev.report.oom();
    rows.push_back(r);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const Row& x, const Row& y) {
    if (x.oom != y.oom) return !x.oom;
    return x.throughput > y.throughput;
  });
  // OOM rows stay in the table but are not ranked.
  if (std::all_of(rows.begin(), rows.end(), [](const Row& r) { return r.oom; }))
    std::cerr << "warning: every strategy is predicted to run out of memory; nothing ranked\n";
  if (a.format == "json") {
    json out = json::array();
    for (std::size_t i = 0; i < rows.size(); ++i)
      out.push_back({{"rank", rows[i].oom ? json(nullptr) : json(i + 1)},
                     {"strategy", rows[i].label},
                     {"file", rows[i].file},
                     {"iteration_time", rows[i].time},
                     {"throughput", rows[i].throughput},
                     {"peak_bytes", rows[i].peak},
                     {"oom", rows[i].oom}});
    emit(a, out.dump(1) + "\n");
    return kExitOk;
  }
  std::ostringstream os;
  os << "rank  strategy          iter_s      samples/s   peak_GB  oom  file\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    char line[512];
    const std::string rank = rows[i].oom ? "-" : std::to_string(i + 1);
    std::snprintf(line, sizeof line, "%4s  %-16s  %10.6f  %10.2f  %7.3f  %-3s  %s\n",
                  rank.c_str(), rows[i].label.c_str(), rows[i].time, rows[i].throughput, rows[i].peak / 1e9,
                  rows[i].oom ? "yes" : "no", rows[i].file.c_str());
    os << line;
  }
  emit(a, os.str());
  return kExitOk;
}

PlacementLayout endpoint(const Workload& w, const std::string& tensor, const std::string& spec) {
  const auto& t = w.model.tensor(tensor);
  if (spec == "memory") return layout_of(t, w.tree.tensor_configs.at(tensor));
  if (spec == "producer") {
    const std::string& op = !t.producer.empty() ? t.producer : t.updated_by;
    if (op.empty()) throw Error("--from/--to", "tensor '" + tensor + "' has no producer");
    return implied_output_layout(t, w.model.op(op), w.tree.op_configs.at(op));
  }
  const std::string prefix = "consumer:";
  if (spec.rfind(prefix, 0) == 0) {
    const auto op = spec.substr(prefix.size());
    if (!w.model.has_op(op)) throw Error("--from/--to", "unknown operator '" + op + "'");
    const auto& c = t.consumers;
    if (std::find(c.begin(), c.end(), op) == c.end())
      throw Error("--from/--to", "operator '" + op + "' does not read '" + tensor + "'");
    return implied_input_layout(t, w.model.op(op), w.tree.op_configs.at(op));
  }
  throw Error("--from/--to", "expected producer, memory or consumer:<op>, got '" + spec + "'");
}

int cmd_explain(const Args& a) {
  auto w = load_workload(a.model, one_strategy(a), a.cluster);
  if (!w.model.has_tensor(a.tensor)) throw Error("--tensor", "unknown tensor '" + a.tensor + "'");
  auto src = endpoint(w, a.tensor, a.from);
  auto dst = endpoint(w, a.tensor, a.to);
  auto plan = infer_transform(src, dst);
  if (a.format == "json") {
    emit(a, json{{"from", layout_to_json(src)},
                 {"to", layout_to_json(dst)},
                 {"plan", plan_to_json(plan)},
                 {"verified", verify_plan(src, dst, plan)}}
                    .dump(1) +
                "\n");
  } else {
    emit(a, a.tensor + ": " + a.from + " -> " + a.to + "\n" + describe(plan));
  }
  return kExitOk;
}

int cmd_dump(const Args& a) {
  auto w = load_workload(a.model, one_strategy(a), a.cluster);
  emit(a, dump_strategy(w.tree, w.model).dump(1) + "\n");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stratsim: simulate distributed training strategies"};
  app.require_subcommand(1);
  Args a;

  auto common = [&](CLI::App* sub, bool needs_strategy, bool needs_cluster) {
    sub->add_option("--model", a.model, "model description (JSON)")->required();
    auto* s = sub->add_option("--strategy", a.strategies, "strategy file (repeatable)");
    if (needs_strategy) s->required();
    auto* c = sub->add_option("--cluster", a.cluster, "cluster description (JSON)");
    if (needs_cluster) c->required();
    sub->add_option("--format", a.format, "text or json")
        ->check(CLI::IsMember({"text", "json"}));
    sub->add_option("--output", a.output, "write the report here instead of stdout");
  };
  auto sim_opts = [&](CLI::App* sub) {
    sub->add_option("--costs", a.costs, "compute cost table (JSON)")->required();
    sub->add_option("--corrections", a.corrections, "bandwidth correction factors (JSON)");
    sub->add_option("--gamma", a.gamma, "compute/gradient-comm overlap slowdown")
        ->check(CLI::NonNegativeNumber);
  };

  auto* validate = app.add_subcommand("validate", "check model, cluster and strategies");
  common(validate, false, false);
  auto* comp = app.add_subcommand("compile", "build the execution graph");
  common(comp, true, true);
  comp->add_option("--dump-graph", a.dump_graph, "write the execution graph (JSON)");
  auto* sim = app.add_subcommand("simulate", "simulate one training iteration");
  common(sim, true, true);
  sim_opts(sim);
  sim->add_option("--trace", a.trace, "write a Chrome trace (JSON)");
  sim->add_option("--dump-graph", a.dump_graph, "write the execution graph (JSON)");
  auto* cmp = app.add_subcommand("compare", "rank several strategies by throughput");
  common(cmp, true, true);
  sim_opts(cmp);
  auto* explain = app.add_subcommand("explain-transform",
                                     "show the collectives between two layouts of a tensor");
  common(explain, true, true);
  explain->add_option("--tensor", a.tensor, "tensor name")->required();
  explain->add_option("--from", a.from, "producer | memory | consumer:<op>");
  explain->add_option("--to", a.to, "producer | memory | consumer:<op>");
  auto* dump = app.add_subcommand("dump-strategy", "print the propagated strategy");
  common(dump, true, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitInput;
  }

  try {
    if (*validate) return cmd_validate(a);
    if (*comp) return cmd_compile(a);
    if (*sim) return cmd_simulate(a);
    if (*cmp) return cmd_compare(a);
    if (*explain) return cmd_explain(a);
    if (*dump) return cmd_dump(a);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  }
  return kExitInput;
}
