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

#include <optional>
#include <string>

#include "stratsim/cluster.hpp"
#include "stratsim/common.hpp"
#include "stratsim/cost.hpp"
#include "stratsim/exec_graph.hpp"
#include "stratsim/model.hpp"
#include "stratsim/simulator.hpp"
#include "stratsim/strategy.hpp"

namespace stratsim {

// Everything needed to simulate one (model, strategy, cluster) triple.
struct Workload {
  ModelGraph model;  // with backward and optimizer operators
  StrategyTree tree;  // propagated
  ClusterSpec cluster;
};

inline Workload make_workload(const ModelGraph& forward_model, const json& strategy,
                              const ClusterSpec& cluster) {
  Workload w;
  w.model = derive_backward(forward_model);
  w.cluster = cluster;
  w.tree = propagate(apply_strategy(construct_tree(w.model), w.model, strategy), w.model);
  auto diags = validate_strategy(w.tree, w.model, cluster);
  if (!diags.empty()) throw AggregateError("invalid strategy:", diags);
  return w;
}

inline Workload load_workload(const std::string& model_path, const std::string& strategy_path,
                              const std::string& cluster_path) {
  auto model = load_model(model_path);
  auto cluster = load_cluster(cluster_path);
  json doc = read_json_file(strategy_path);
  try {
    return make_workload(model, doc, cluster);
  } catch (const AggregateError&) {
    throw;
  } catch (const Error& e) {
    throw Error(strategy_path + ":" + e.where(), e.message());
  }
}

struct Evaluation {
  ExecutionGraph graph;
  SimReport report;
};

inline Evaluation evaluate(const Workload& w, const ComputeCostTable& costs,
                           const CorrectionFactors& corr, SimOptions opts = {}) {
  Evaluation ev;
  ev.graph = compile(w.model, w.tree, w.cluster);
  annotate_costs(ev.graph, costs, w.cluster, corr);
  ev.report = simulate(ev.graph, w.cluster, opts);
  return ev;
}

// "DPxMPxPP(n)" label for a propagated strategy: PP counts execution units,
// MP the largest non-batch degree of any forward operator, DP the batch degree.
inline std::string strategy_label(const Workload& w, const ExecutionGraph& eg) {
  int dp = 1, mp = 1;
  for (const auto& op : w.model.ops) {
    if (op.phase != OpPhase::forward) continue;
    const auto& cfg = w.tree.op_configs.at(op.name);
    int other = 1;
    for (const auto& [label, degree] : cfg.partition) {
      if (label == w.model.batch_dim) dp = std::max(dp, degree);
      else other *= degree;
    }
    mp = std::max(mp, other);
  }
  return std::to_string(dp) + "x" + std::to_string(mp) + "x" +
         std::to_string(eg.units.size()) + "(" + std::to_string(eg.n_micro_batch) + ")";
}

}  // namespace stratsim
