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

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "stratsim/cluster.hpp"
#include "stratsim/common.hpp"
#include "stratsim/model.hpp"

namespace stratsim {

// label -> parallel degree; labels absent from the map have degree 1.
using PartitionSpec = std::map<std::string, int>;
// One device set per part: a singleton shards, a larger set replicates.
using MapSpec = std::vector<std::vector<int>>;
using DeviceGroup = std::vector<int>;

inline int num_parts(const PartitionSpec& p) {
  int n = 1;
  for (const auto& [label, degree] : p) n *= degree;
  return n;
}

// Partition and map for either an operator (computation config) or a tensor
// (memory config). Parts are numbered row-major over the object's own dim
// order, restricted to the partitioned labels.
struct ParallelConfig {
  PartitionSpec partition;
  MapSpec map;
  bool user_defined = false;

  int parts() const { return num_parts(partition); }
  bool operator==(const ParallelConfig& o) const {
    return partition == o.partition && map == o.map;
  }
  std::vector<int> devices() const {
    std::vector<int> out;
    for (const auto& set : map) out.insert(out.end(), set.begin(), set.end());
    sort_unique(out);
    return out;
  }
};

using ComputationConfig = ParallelConfig;
using MemoryConfig = ParallelConfig;

struct ScheduleConfig {
  int n_micro_batch = 1;
  int max_ongoing_micro_batch = 1;
  bool recomputation = false;

  bool operator==(const ScheduleConfig&) const = default;
};

struct TreeNode {
  std::string name;
  std::string path;
  int parent = -1;
  std::vector<int> children;
  int layer = -1;  // index into ModelGraph::layers for leaves
  std::optional<ScheduleConfig> schedule;
  bool schedule_user_defined = false;

  bool leaf() const { return layer >= 0; }
};

struct StrategyTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root
  std::map<std::string, ComputationConfig> op_configs;
  std::map<std::string, MemoryConfig> tensor_configs;

  const TreeNode& root() const { return nodes.front(); }
  int find(const std::string& path) const {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i].path == path) return static_cast<int>(i);
    return -1;
  }
  int leaf_of_layer(int layer) const {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i].layer == layer) return static_cast<int>(i);
    return -1;
  }
  std::vector<int> leaves_under(int node) const {
    std::vector<int> out;
    std::vector<int> stack{node};
    while (!stack.empty()) {
      int n = stack.back();
      stack.pop_back();
      if (nodes[n].leaf()) out.push_back(n);
      for (auto it = nodes[n].children.rbegin(); it != nodes[n].children.rend(); ++it)
        stack.push_back(*it);
    }
    return out;
  }
  int depth() const {
    int best = 0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      int d = 0;
      for (int p = nodes[i].parent; p >= 0; p = nodes[p].parent) ++d;
      best = std::max(best, d);
    }
    return best;
  }
  bool operator==(const StrategyTree& o) const {
    if (nodes.size() != o.nodes.size()) return false;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const auto& a = nodes[i];
      const auto& b = o.nodes[i];
      if (a.path != b.path || a.children != b.children || a.layer != b.layer ||
          a.schedule != b.schedule)
        return false;
    }
    return op_configs == o.op_configs && tensor_configs == o.tensor_configs;
  }
};

inline constexpr const char* kRootPath = "root";

namespace detail {

// Indices (label -> index) of every part, row-major over `order`.
inline std::vector<std::map<std::string, int>> part_indices(
    const PartitionSpec& p, const std::vector<std::string>& order) {
  std::vector<std::string> labels;
  std::vector<int> radix;
  for (const auto& l : order) {
    auto it = p.find(l);
    if (it == p.end()) continue;
    labels.push_back(l);
    radix.push_back(it->second);
  }
  std::vector<std::map<std::string, int>> out;
  for (const auto& idx : enumerate_grid(radix)) {
    std::map<std::string, int> m;
    for (std::size_t i = 0; i < labels.size(); ++i) m[labels[i]] = idx[i];
    out.push_back(std::move(m));
  }
  return out;
}

// Re-expresses a config over another dim set: labels outside `dst_order` are
// dropped and the devices of every merged source part are unioned.
inline ParallelConfig project(const ParallelConfig& src,
                              const std::vector<std::string>& src_order,
                              const std::vector<std::string>& dst_order) {
  ParallelConfig dst;
  for (const auto& [label, degree] : src.partition)
    if (std::find(dst_order.begin(), dst_order.end(), label) != dst_order.end() &&
        degree > 1)
      dst.partition[label] = degree;
  const auto src_parts = part_indices(src.partition, src_order);
  const auto dst_parts = part_indices(dst.partition, dst_order);
  dst.map.assign(dst_parts.size(), {});
  for (std::size_t j = 0; j < dst_parts.size(); ++j) {
    for (std::size_t i = 0; i < src_parts.size() && i < src.map.size(); ++i) {
      bool match = true;
      for (const auto& [label, index] : dst_parts[j]) {
        auto it = src_parts[i].find(label);
        if (it == src_parts[i].end() || it->second != index) match = false;
      }
      if (match)
        dst.map[j].insert(dst.map[j].end(), src.map[i].begin(), src.map[i].end());
    }
    sort_unique(dst.map[j]);
  }
  return dst;
}

inline std::string child_path(const std::string& parent, const std::string& name) {
  return parent == kRootPath ? name : parent + "/" + name;
}

inline ParallelConfig parse_config(const json& j, const std::string& where) {
  ParallelConfig c;
  c.user_defined = true;
  if (!j.is_object()) throw Error(where, "expected {partition, map}");
  if (j.contains("partition")) {
    if (!j.at("partition").is_object())
      throw Error(where + "/partition", "expected an object of degrees");
    for (auto it = j.at("partition").begin(); it != j.at("partition").end(); ++it) {
      if (!it.value().is_number_integer())
        throw Error(where + "/partition/" + it.key(), "degree must be an integer");
      int d = it.value().get<int>();
      if (d < 1) throw Error(where + "/partition/" + it.key(), "degree must be >= 1");
      if (d > 1) c.partition[it.key()] = d;
    }
  }
  if (!j.contains("map") || !j.at("map").is_array())
    throw Error(where + "/map", "missing or not a list of device lists");
  for (std::size_t i = 0; i < j.at("map").size(); ++i) {
    const auto& e = j.at("map")[i];
    std::vector<int> devs;
    if (e.is_number_integer()) devs.push_back(e.get<int>());
    else if (e.is_array())
      for (const auto& d : e) {
        if (!d.is_number_integer())
          throw Error(where + "/map/" + std::to_string(i), "device ids must be integers");
        devs.push_back(d.get<int>());
      }
    else throw Error(where + "/map/" + std::to_string(i), "expected a device list");
    sort_unique(devs);
    c.map.push_back(devs);
  }
  if (static_cast<int>(c.map.size()) != c.parts())
    throw Error(where, "map has " + std::to_string(c.map.size()) +
                           " entries but partition has " + std::to_string(c.parts()) +
                           " parts");
  return c;
}

inline json config_to_json(const ParallelConfig& c) {
  json j;
  j["partition"] = json::object();
  for (const auto& [l, d] : c.partition) j["partition"][l] = d;
  j["map"] = c.map;
  return j;
}

inline ScheduleConfig parse_schedule(const json& j, const std::string& where) {
  ScheduleConfig s;
  s.n_micro_batch = optional_field<int>(j, "n_micro_batch", 1, where);
  s.max_ongoing_micro_batch = optional_field<int>(
      j, "max_ongoing_micro_batch",
      optional_field<int>(j, "max_ongoing", s.n_micro_batch, where), where);
  s.recomputation = optional_field<bool>(
      j, "recomputation", optional_field<bool>(j, "recompute", false, where), where);
  if (s.n_micro_batch < 1) throw Error(where + "/n_micro_batch", "must be >= 1");
  if (s.max_ongoing_micro_batch < 1 || s.max_ongoing_micro_batch > s.n_micro_batch)
    throw Error(where + "/max_ongoing_micro_batch", "must be in [1, n_micro_batch]");
  return s;
}

}  // namespace detail

// One non-leaf per distinct module-path prefix, one leaf per layer, children in
// declaration order.
inline StrategyTree construct_tree(const ModelGraph& g) {
  StrategyTree t;
  TreeNode root;
  root.name = kRootPath;
  root.path = kRootPath;
  t.nodes.push_back(root);
  for (std::size_t li = 0; li < g.layers.size(); ++li) {
    const auto& layer = g.layers[li];
    int cur = 0;
    for (const auto& m : layer.module_path) {
      const auto path = detail::child_path(t.nodes[cur].path, m);
      int found = -1;
      for (int c : t.nodes[cur].children)
        if (t.nodes[c].path == path) found = c;
      if (found >= 0 && t.nodes[found].leaf())
        throw Error(path, "module path is both a layer and a module");
      if (found < 0) {
        TreeNode n;
        n.name = m;
        n.path = path;
        n.parent = cur;
        t.nodes.push_back(n);
        found = static_cast<int>(t.nodes.size()) - 1;
        t.nodes[cur].children.push_back(found);
      }
      cur = found;
    }
    const auto path = detail::child_path(t.nodes[cur].path, layer.name);
    if (t.find(path) >= 0)
      throw Error(path, "module path is both a layer and a module");
    TreeNode leaf;
    leaf.name = layer.name;
    leaf.path = path;
    leaf.parent = cur;
    leaf.layer = static_cast<int>(li);
    t.nodes.push_back(leaf);
    t.nodes[cur].children.push_back(static_cast<int>(t.nodes.size()) - 1);
  }
  return t;
}

namespace detail {

inline std::set<std::string> ops_under(const StrategyTree& t, const ModelGraph& g,
                                       int node) {
  std::set<std::string> out;
  for (int leaf : t.leaves_under(node)) {
    const auto& layer = g.layers[t.nodes[leaf].layer];
    out.insert(layer.forward_ops.begin(), layer.forward_ops.end());
    out.insert(layer.backward_ops.begin(), layer.backward_ops.end());
    out.insert(layer.optimizer_ops.begin(), layer.optimizer_ops.end());
  }
  return out;
}

inline std::set<std::string> tensors_under(const StrategyTree& t,
                                           const ModelGraph& g, int node) {
  std::set<std::string> out;
  for (int leaf : t.leaves_under(node)) {
    const auto& layer = g.layers[t.nodes[leaf].layer];
    out.insert(layer.tensors.begin(), layer.tensors.end());
  }
  return out;
}

}  // namespace detail

inline StrategyTree apply_strategy(const StrategyTree& tree, const ModelGraph& g,
                                   const json& doc) {
  StrategyTree t = tree;
  if (!doc.is_object() || !doc.contains("nodes") || !doc.at("nodes").is_array())
    throw Error("nodes", "strategy needs a 'nodes' list");
  const auto& nodes = doc.at("nodes");
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const std::string w = "nodes/" + std::to_string(i);
    const auto path = require_field<std::string>(nodes[i], "path", w);
    int n = t.find(path);
    if (n < 0) throw Error(w + "/path", "unknown node '" + path + "'");
    if (nodes[i].contains("schedule") && !nodes[i].at("schedule").is_null()) {
      if (t.nodes[n].leaf())
        throw Error(w + "/schedule", "schedule configs belong to non-leaf nodes");
      t.nodes[n].schedule = detail::parse_schedule(nodes[i].at("schedule"), w + "/schedule");
      t.nodes[n].schedule_user_defined = true;
    }
    if (nodes[i].contains("ops")) {
      const auto owned = detail::ops_under(t, g, n);
      const auto& oj = nodes[i].at("ops");
      if (!oj.is_object()) throw Error(w + "/ops", "expected an object keyed by op name");
      for (auto it = oj.begin(); it != oj.end(); ++it) {
        const std::string ow = w + "/ops/" + it.key();
        if (!owned.count(it.key()))
          throw Error(ow, "operator '" + it.key() + "' is not in node '" + path + "'");
        const auto& op = g.op(it.key());
        auto cfg = detail::parse_config(it.value(), ow);
        for (const auto& [label, degree] : cfg.partition)
          if (!op.is_parallelizable(label))
            throw Error(ow + "/partition",
                        "dim '" + label + "' is not a parallelizable dim of operator '" +
                            op.name + "'");
        t.op_configs[op.name] = cfg;
      }
    }
    if (nodes[i].contains("tensors")) {
      const auto owned = detail::tensors_under(t, g, n);
      const auto& tj = nodes[i].at("tensors");
      if (!tj.is_object())
        throw Error(w + "/tensors", "expected an object keyed by tensor name");
      for (auto it = tj.begin(); it != tj.end(); ++it) {
        const std::string tw = w + "/tensors/" + it.key();
        if (!owned.count(it.key()))
          throw Error(tw, "tensor '" + it.key() + "' is not in node '" + path + "'");
        const auto& tensor = g.tensor(it.key());
        auto cfg = detail::parse_config(it.value(), tw);
        for (const auto& [label, degree] : cfg.partition)
          if (!tensor.has_dim(label))
            throw Error(tw + "/partition",
                        "dim '" + label + "' is not a dim of tensor '" + tensor.name + "'");
        t.tensor_configs[tensor.name] = cfg;
      }
    }
  }
  return t;
}

inline StrategyTree load_strategy(const StrategyTree& tree, const ModelGraph& g,
                                  const std::string& path) {
  try {
    return apply_strategy(tree, g, read_json_file(path));
  } catch (const Error& e) {
    if (e.where().rfind(path, 0) == 0) throw;
    throw Error(path + ":" + e.where(), e.message());
  }
}

inline json dump_strategy(const StrategyTree& t, const ModelGraph& g) {
  json out;
  out["nodes"] = json::array();
  for (const auto& n : t.nodes) {
    json e;
    e["path"] = n.path;
    if (!n.leaf() && n.schedule) {
      e["schedule"] = {{"n_micro_batch", n.schedule->n_micro_batch},
                       {"max_ongoing_micro_batch", n.schedule->max_ongoing_micro_batch},
                       {"recomputation", n.schedule->recomputation}};
    }
    if (n.leaf()) {
      const auto& layer = g.layers[n.layer];
      json ops = json::object();
      auto add_op = [&](const std::string& name) {
        auto it = t.op_configs.find(name);
        if (it != t.op_configs.end()) ops[name] = detail::config_to_json(it->second);
      };
      for (const auto& o : layer.forward_ops) add_op(o);
      for (const auto& o : layer.backward_ops) add_op(o);
      for (const auto& o : layer.optimizer_ops) add_op(o);
      json tensors = json::object();
      for (const auto& name : layer.tensors) {
        auto it = t.tensor_configs.find(name);
        if (it != t.tensor_configs.end())
          tensors[name] = detail::config_to_json(it->second);
      }
      if (!ops.empty()) e["ops"] = ops;
      if (!tensors.empty()) e["tensors"] = tensors;
    }
    out["nodes"].push_back(e);
  }
  return out;
}

namespace detail {

inline MemoryConfig tensor_config_from_op(const ModelGraph& g, const OperatorSpec& op,
                                          const ComputationConfig& oc,
                                          const std::string& tensor) {
  return project(oc, op.parallel_dims, g.tensor(tensor).labels());
}

inline ComputationConfig op_config_from_tensor(const ModelGraph& g,
                                               const OperatorSpec& op,
                                               const MemoryConfig& tc,
                                               const std::string& tensor) {
  return project(tc, g.tensor(tensor).labels(), op.parallel_dims);
}

}  // namespace detail

// Fills every config the user left unset. Schedules flow top-down; then, in
// topological order over forward, backward and optimizer operators, an unset
// backward operator copies its forward operator, any other unset operator
// copies its first configured input's layout and unset tensors take
// the layout implied by their producer (outputs) or first consumer (inputs).
inline StrategyTree propagate(const StrategyTree& tree, const ModelGraph& g) {
  StrategyTree t = tree;
  if (!t.nodes.front().schedule)
    throw Error(kRootPath, "root node needs a schedule config before propagation");
  for (std::size_t i = 1; i < t.nodes.size(); ++i) {
    auto& n = t.nodes[i];
    if (n.leaf() || n.schedule) continue;
    n.schedule = t.nodes[n.parent].schedule;
  }

  std::vector<std::string> underdetermined;

  // Seeds of the backward pass mirror their activation's layout.
  auto seed_gradients = [&]() {
    for (const auto& tensor : g.tensors) {
      if (tensor.kind != TensorKind::gradient || !tensor.producer.empty()) continue;
      if (t.tensor_configs.count(tensor.name)) continue;
      auto it = t.tensor_configs.find(tensor.grad_of);
      if (it == t.tensor_configs.end()) continue;
      auto cfg = it->second;
      cfg.user_defined = false;
      t.tensor_configs[tensor.name] = cfg;
    }
  };

  auto visit = [&](const std::string& name) {
    const auto& op = g.op(name);
    if (!t.op_configs.count(name) && !op.forward_op.empty()) {
      // Backward operators mirror their forward operator.
      auto it = t.op_configs.find(op.forward_op);
      if (it != t.op_configs.end()) {
        auto cfg = it->second;
        cfg.user_defined = false;
        t.op_configs[name] = cfg;
      }
    }
    if (!t.op_configs.count(name)) {
      bool found = false;
      for (const auto& in : op.inputs) {
        auto it = t.tensor_configs.find(in);
        if (it == t.tensor_configs.end()) continue;
        auto cfg = detail::op_config_from_tensor(g, op, it->second, in);
        cfg.user_defined = false;
        t.op_configs[name] = cfg;
        found = true;
        break;
      }
      if (!found) {
        underdetermined.push_back("operator '" + name + "'");
        return;
      }
    }
    const auto& oc = t.op_configs.at(name);
    for (const auto& out : op.outputs) {
      if (t.tensor_configs.count(out)) continue;
      auto cfg = detail::tensor_config_from_op(g, op, oc, out);
      t.tensor_configs[out] = cfg;
    }
    for (const auto& in : op.inputs) {
      if (t.tensor_configs.count(in)) continue;
      auto cfg = detail::tensor_config_from_op(g, op, oc, in);
      t.tensor_configs[in] = cfg;
    }
  };

  const auto fwd = g.forward_order();
  for (const auto& name : fwd) visit(name);
  seed_gradients();
  for (auto it = fwd.rbegin(); it != fwd.rend(); ++it) {
    const auto& layer = g.layer(g.op(*it).layer);
    for (const auto& b : layer.backward_ops)
      if (g.op(b).forward_op == *it) visit(b);
  }
  for (const auto& layer : g.layers)
    for (const auto& o : layer.optimizer_ops) visit(o);

  for (const auto& tensor : g.tensors)
    if (!t.tensor_configs.count(tensor.name))
      underdetermined.push_back("tensor '" + tensor.name + "'");
  if (!underdetermined.empty())
    throw AggregateError("underdetermined strategy (no config reachable):",
                         underdetermined);
  return t;
}

// Devices that run any operator under `node`. Tensor placements are left out:
// a boundary activation (or its gradient) may live with the neighbouring
// stage, and counting it would glue the stages together.
inline DeviceGroup dev_group(const StrategyTree& t, const ModelGraph& g, int node) {
  DeviceGroup out;
  std::vector<std::string> missing;
  for (const auto& name : detail::ops_under(t, g, node)) {
    auto it = t.op_configs.find(name);
    if (it == t.op_configs.end()) {
      missing.push_back(name);
      continue;
    }
    auto d = it->second.devices();
    out.insert(out.end(), d.begin(), d.end());
  }
  if (!missing.empty())
    throw Error(t.nodes[node].path, "unconfigured descendants: " + join(missing, ", "));
  sort_unique(out);
  return out;
}

namespace detail {

inline void check_config(const ParallelConfig& c, const std::string& what,
                         const std::map<std::string, int64_t>& extents,
                         const ClusterSpec* cluster,
                         std::vector<std::string>& diags) {
  if (static_cast<int>(c.map.size()) != c.parts())
    diags.push_back(what + ": map has " + std::to_string(c.map.size()) +
                    " entries but partition has " + std::to_string(c.parts()) + " parts");
  for (const auto& [label, degree] : c.partition) {
    auto it = extents.find(label);
    if (it == extents.end()) {
      diags.push_back(what + ": partitions unknown dim '" + label + "'");
      continue;
    }
    if (degree < 1 || it->second % degree != 0)
      diags.push_back(what + ": degree " + std::to_string(degree) +
                      " does not divide extent " + std::to_string(it->second) +
                      " of dim '" + label + "'");
  }
  std::size_t replicas = 0;
  for (std::size_t i = 0; i < c.map.size(); ++i) {
    if (c.map[i].empty()) diags.push_back(what + ": map entry " + std::to_string(i) + " is empty");
    if (i == 0) replicas = c.map[i].size();
    else if (c.map[i].size() != replicas)
      diags.push_back(what + ": replica groups have unequal sizes");
    if (cluster)
      for (int d : c.map[i])
        if (!cluster->has_device(d))
          diags.push_back(what + ": device " + std::to_string(d) + " not in cluster");
  }
}

}  // namespace detail

inline std::vector<std::string> validate_strategy(const StrategyTree& t,
                                                  const ModelGraph& g,
                                                  const ClusterSpec& cluster) {
  std::vector<std::string> diags;
  for (const auto& [name, cfg] : t.op_configs) {
    if (!g.has_op(name)) {
      diags.push_back("config for unknown operator '" + name + "'");
      continue;
    }
    const auto& op = g.op(name);
    std::map<std::string, int64_t> extents;
    for (const auto& in : op.inputs)
      for (const auto& d : g.tensor(in).shape) extents[d.label] = d.extent;
    for (const auto& out : op.outputs)
      for (const auto& d : g.tensor(out).shape) extents[d.label] = d.extent;
    for (const auto& [label, degree] : cfg.partition)
      if (!op.is_parallelizable(label))
        diags.push_back("operator '" + name + "': dim '" + label + "' is not parallelizable");
    detail::check_config(cfg, "operator '" + name + "'", extents, &cluster, diags);
  }
  for (const auto& [name, cfg] : t.tensor_configs) {
    if (!g.has_tensor(name)) {
      diags.push_back("config for unknown tensor '" + name + "'");
      continue;
    }
    std::map<std::string, int64_t> extents;
    for (const auto& d : g.tensor(name).shape) extents[d.label] = d.extent;
    detail::check_config(cfg, "tensor '" + name + "'", extents, &cluster, diags);
  }
  for (const auto& n : t.nodes) {
    if (!n.schedule) continue;
    const auto& s = *n.schedule;
    if (s.n_micro_batch < 1)
      diags.push_back("node '" + n.path + "': n_micro_batch must be >= 1");
    if (s.max_ongoing_micro_batch < 1 || s.max_ongoing_micro_batch > s.n_micro_batch)
      diags.push_back("node '" + n.path + "': max_ongoing_micro_batch out of range");
    if (s.n_micro_batch >= 1 && g.batch_size % s.n_micro_batch != 0)
      diags.push_back("node '" + n.path + "': n_micro_batch " +
                      std::to_string(s.n_micro_batch) + " does not divide batch size " +
                      std::to_string(g.batch_size));
  }
  return diags;
}

}  // namespace stratsim
