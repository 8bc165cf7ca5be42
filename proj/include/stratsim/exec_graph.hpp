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
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "stratsim/cluster.hpp"
#include "stratsim/common.hpp"
#include "stratsim/layout.hpp"
#include "stratsim/model.hpp"
#include "stratsim/strategy.hpp"

namespace stratsim {

enum class TaskKind { compute, feature_comm, gradient_comm };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::compute: return "compute";
    case TaskKind::feature_comm: return "feature-comm";
    case TaskKind::gradient_comm: return "gradient-comm";
  }
  return "?";
}

// `update` holds gradient synchronization and the optimizer, once per
// iteration and unit.
enum class Phase { forward, backward, recompute, update };

inline std::string to_string(Phase p) {
  switch (p) {
    case Phase::forward: return "forward";
    case Phase::backward: return "backward";
    case Phase::recompute: return "recompute";
    case Phase::update: return "update";
  }
  return "?";
}

inline const char* phase_letter(Phase p) {
  switch (p) {
    case Phase::forward: return "F";
    case Phase::backward: return "B";
    case Phase::recompute: return "R";
    case Phase::update: return "U";
  }
  return "?";
}

struct Task {
  int id = 0;
  std::string name;
  TaskKind kind = TaskKind::compute;
  int device = -1;         // compute tasks
  std::vector<int> group;  // comm tasks, in step order
  Primitive primitive = Primitive::send_recv;
  int64_t bytes = 0;
  std::string op;
  std::string op_type;
  std::string cost_key;
  std::string tensor;
  std::map<std::string, int64_t> extents;  // shard extents of a compute task
  int micro_batch = -1;
  int subgraph = -1;
  std::vector<int> reads;   // buffer ids
  std::vector<int> writes;  // buffer ids
  std::vector<int> preds;
  std::vector<int> succs;

  // Set by annotate_costs.
  double duration = 0;  // seconds, before runtime behaviors
  double alpha = 0;
  double bandwidth = 0;
  LinkLevel level = LinkLevel::device_port;

  bool is_comm() const { return kind != TaskKind::compute; }
  std::vector<int> devices() const {
    if (!is_comm()) return {device};
    auto g = group;
    sort_unique(g);
    return g;
  }
};

struct Buffer {
  int id = 0;
  std::string name;
  std::string tensor;
  int device = 0;
  int64_t bytes = 0;
  bool persistent = false;
  std::vector<int> writers;
  std::vector<int> readers;
};

struct Subgraph {
  int id = 0;
  std::string name;
  Phase phase = Phase::forward;
  int origin = 0;  // unit index
  int micro_batch = -1;
  std::vector<int> devices;
  std::vector<int> tasks;
};

// A piece of the strategy tree scheduled as one pipeline stage.
struct Unit {
  std::string name;
  int node = 0;
  std::vector<int> layers;
  DeviceGroup devices;
  ScheduleConfig schedule;
};

struct Edge {
  int from = 0;
  int to = 0;
  bool control = false;
  auto operator<=>(const Edge&) const = default;
};

struct ExecutionGraph {
  std::vector<Task> tasks;
  std::vector<Buffer> buffers;
  std::vector<Subgraph> subgraphs;
  std::vector<Edge> edges;
  std::vector<std::pair<int, int>> subgraph_edges;  // control, by subgraph id
  std::vector<Unit> units;
  int n_micro_batch = 1;
  int64_t batch_size = 0;

  int64_t persistent_bytes(int device) const {
    int64_t v = 0;
    for (const auto& b : buffers)
      if (b.persistent && b.device == device) v += b.bytes;
    return v;
  }
  std::vector<int> devices() const {
    std::vector<int> out;
    for (const auto& t : tasks) {
      auto d = t.devices();
      out.insert(out.end(), d.begin(), d.end());
    }
    for (const auto& b : buffers) out.push_back(b.device);
    sort_unique(out);
    return out;
  }
};

namespace detail {

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) { return parent[x] == x ? x : parent[x] = find(parent[x]); }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

inline bool overlaps(const DeviceGroup& a, const DeviceGroup& b) {
  for (int x : a)
    if (std::binary_search(b.begin(), b.end(), x)) return true;
  return false;
}

}  // namespace detail

// Breadth-first from the root: a node whose children fall into two or more
// device-disjoint clusters is divided; each cluster of one child is explored
// further, a cluster of several children stays together.
inline std::vector<Unit> divide_subgraphs(const StrategyTree& t, const ModelGraph& g) {
  std::vector<Unit> units;
  auto schedule_for = [&](int node) {
    int n = t.nodes[node].leaf() ? t.nodes[node].parent : node;
    if (n < 0 || !t.nodes[n].schedule)
      throw Error(t.nodes[node].path, "no schedule config (run propagation first)");
    return *t.nodes[n].schedule;
  };
  auto make_unit = [&](int node, const std::vector<int>& children, const std::string& name) {
    Unit u;
    u.name = name;
    u.node = node;
    for (int c : children) {
      for (int leaf : t.leaves_under(c)) u.layers.push_back(t.nodes[leaf].layer);
      auto d = dev_group(t, g, c);
      u.devices.insert(u.devices.end(), d.begin(), d.end());
    }
    sort_unique(u.layers);
    sort_unique(u.devices);
    u.schedule = schedule_for(node);
    units.push_back(u);
  };
  std::vector<int> queue{0};
  for (std::size_t qi = 0; qi < queue.size(); ++qi) {
    const int n = queue[qi];
    const auto& node = t.nodes[n];
    if (node.leaf()) {
      make_unit(n, {n}, node.path);
      continue;
    }
    const auto& kids = node.children;
    std::vector<DeviceGroup> groups;
    for (int c : kids) groups.push_back(dev_group(t, g, c));
    detail::UnionFind uf(static_cast<int>(kids.size()));
    for (std::size_t i = 0; i < kids.size(); ++i)
      for (std::size_t j = i + 1; j < kids.size(); ++j)
        if (detail::overlaps(groups[i], groups[j]))
          uf.unite(static_cast<int>(i), static_cast<int>(j));
    std::map<int, std::vector<int>> clusters;
    for (std::size_t i = 0; i < kids.size(); ++i)
      clusters[uf.find(static_cast<int>(i))].push_back(kids[i]);
    if (clusters.size() < 2) {
      make_unit(n, kids, node.path);
      continue;
    }
    for (const auto& [root, members] : clusters) {
      if (members.size() == 1) {
        if (t.nodes[members[0]].leaf()) {
          // A lone leaf runs under its parent's schedule.
          make_unit(members[0], {members[0]}, t.nodes[members[0]].path);
        } else {
          queue.push_back(members[0]);
        }
      } else {
        std::vector<std::string> names;
        for (int m : members) names.push_back(t.nodes[m].name);
        make_unit(n, members, node.path + "{" + join(names, ",") + "}");
      }
    }
  }
  std::stable_sort(units.begin(), units.end(), [](const Unit& a, const Unit& b) {
    return a.layers.front() < b.layers.front();
  });
  return units;
}

// One compute shard of an operator on one device.
struct OpShard {
  int part = 0;
  int device = 0;
  std::map<std::string, int64_t> extents;
};

// Splits an operator into |P| parts, duplicated over each part's devices.
// `extents` holds the full extent of every label the operator touches.
inline std::vector<OpShard> split_operator(const OperatorSpec& op, const ComputationConfig& cfg,
                                           const std::map<std::string, int64_t>& extents) {
  const auto parts = detail::part_indices(cfg.partition, op.parallel_dims);
  if (parts.size() != cfg.map.size())
    throw Error("operator '" + op.name + "'", "map size does not match partition");
  std::map<std::string, int64_t> shard = extents;
  for (const auto& [label, degree] : cfg.partition) {
    auto it = shard.find(label);
    if (it == shard.end())
      throw Error("operator '" + op.name + "'", "partitions unknown dim '" + label + "'");
    if (it->second % degree != 0)
      throw Error("operator '" + op.name + "'",
                  "degree " + std::to_string(degree) + " does not divide extent " +
                      std::to_string(it->second) + " of dim '" + label + "'");
    it->second /= degree;
  }
  std::vector<OpShard> out;
  for (std::size_t p = 0; p < parts.size(); ++p)
    for (int d : cfg.map[p]) out.push_back({static_cast<int>(p), d, shard});
  return out;
}

namespace detail {

using Bufs = std::map<int, std::vector<int>>;  // device -> buffer ids

class Compiler {
 public:
  Compiler(const ModelGraph& g, const StrategyTree& t, const ClusterSpec& c)
      : g_(g), t_(t), c_(c) {}

  ExecutionGraph run() {
    if (!g_.has_backward)
      throw Error("model", "backward operators missing (derive_backward first)");
    eg_.units = divide_subgraphs(t_, g_);
    eg_.batch_size = g_.batch_size;
    m_ = eg_.units.front().schedule.n_micro_batch;
    for (const auto& u : eg_.units)
      if (u.schedule.n_micro_batch != m_)
        throw Error(u.name, "all pipeline stages must use the same n_micro_batch (" +
                                std::to_string(m_) + " vs " +
                                std::to_string(u.schedule.n_micro_batch) + ")");
    if (m_ < 1 || g_.batch_size % m_ != 0)
      throw Error("schedule", "n_micro_batch " + std::to_string(m_) +
                                  " does not divide batch size " +
                                  std::to_string(g_.batch_size));
    eg_.n_micro_batch = m_;
    layer_unit_.assign(g_.layers.size(), -1);
    for (std::size_t u = 0; u < eg_.units.size(); ++u)
      for (int l : eg_.units[u].layers) layer_unit_[l] = static_cast<int>(u);
    for (const auto& op : g_.ops)
      if (!t_.op_configs.count(op.name))
        throw Error("operator '" + op.name + "'", "no computation config");
    scale_tensors();
    create_subgraphs();

    const auto fwd = g_.forward_order();
    for (int i = 0; i < m_; ++i)
      for (const auto& o : fwd) emit_op(o, Phase::forward, i);
    for (int i = 0; i < m_; ++i)
      for (const auto& o : fwd)
        if (recomputes(unit_of(o))) emit_op(o, Phase::recompute, i);
    std::vector<std::string> bwd;
    for (auto it = fwd.rbegin(); it != fwd.rend(); ++it)
      for (const auto& b : g_.layer(g_.op(*it).layer).backward_ops)
        if (g_.op(b).forward_op == *it) bwd.push_back(b);
    for (int i = 0; i < m_; ++i)
      for (const auto& o : bwd) emit_op(o, Phase::backward, i);
    sync_gradients();
    for (const auto& layer : g_.layers)
      for (const auto& o : layer.optimizer_ops) emit_op(o, Phase::update, -1);

    wire_data_edges();
    wire_control_edges();
    finalize();
    return std::move(eg_);
  }

 private:
  const ModelGraph& g_;
  const StrategyTree& t_;
  const ClusterSpec& c_;
  ExecutionGraph eg_;
  int m_ = 1;
  std::vector<int> layer_unit_;
  std::map<std::string, TensorSpec> scaled_;
  std::map<std::tuple<int, Phase, int>, int> sg_;
  std::map<std::string, int> buffer_ids_;
  std::map<std::string, Bufs> mem_bufs_;
  std::map<std::string, Bufs> consumer_bufs_;
  std::map<std::string, PlacementLayout> mem_layouts_;
  std::set<Edge> edge_set_;

  bool param_grad(const TensorSpec& t) const {
    return t.kind == TensorKind::gradient && !t.grad_of.empty() && g_.has_tensor(t.grad_of) &&
           g_.tensor(t.grad_of).kind == TensorKind::parameter;
  }
  bool per_iteration(const TensorSpec& t) const { return t.persistent() || param_grad(t); }

  void scale_tensors() {
    for (const auto& t : g_.tensors) {
      TensorSpec s = t;
      if (!per_iteration(t))
        for (auto& d : s.shape)
          if (d.label == g_.batch_dim) {
            if (d.extent % m_ != 0)
              throw Error("tensor '" + t.name + "'",
                          "batch extent " + std::to_string(d.extent) +
                              " not divisible by n_micro_batch " + std::to_string(m_));
            d.extent /= m_;
          }
      scaled_[t.name] = s;
    }
  }

  int unit_of(const std::string& op) const {
    return layer_unit_[g_.layer_position(g_.op(op).layer)];
  }
  bool recomputes(int u) const { return eg_.units[u].schedule.recomputation; }

  void create_subgraphs() {
    const int nu = static_cast<int>(eg_.units.size());
    auto add = [&](int u, Phase p, int mb) {
      Subgraph s;
      s.id = static_cast<int>(eg_.subgraphs.size());
      s.phase = p;
      s.origin = u;
      s.micro_batch = mb;
      s.name = std::string(phase_letter(p)) + (mb >= 0 ? std::to_string(mb) : "") + "@" +
               eg_.units[u].name;
      sg_[{u, p, mb}] = s.id;
      eg_.subgraphs.push_back(s);
    };
    for (int i = 0; i < m_; ++i)
      for (int u = 0; u < nu; ++u) add(u, Phase::forward, i);
    for (int i = 0; i < m_; ++i)
      for (int u = 0; u < nu; ++u)
        if (recomputes(u)) add(u, Phase::recompute, i);
    for (int i = 0; i < m_; ++i)
      for (int u = nu - 1; u >= 0; --u) add(u, Phase::backward, i);
    for (int u = 0; u < nu; ++u) add(u, Phase::update, -1);
  }

  std::string instance(const std::string& tensor, int mb, bool recomputed) const {
    if (per_iteration(g_.tensor(tensor))) return "iter";
    return "mb" + std::to_string(mb) + (recomputed ? ".r" : "");
  }

  // Does a consumer in unit `u` during `p` read the recomputed copy?
  bool reads_recomputed(const std::string& tensor, int u, Phase p) const {
    if (p != Phase::recompute && p != Phase::backward) return false;
    const auto& t = g_.tensor(tensor);
    if (t.producer.empty() || per_iteration(t)) return false;
    const auto& prod = g_.op(t.producer);
    return prod.phase == OpPhase::forward && unit_of(prod.name) == u && recomputes(u);
  }

  int buffer(const std::string& tensor, const std::string& tag, int device,
             const std::string& inst, int64_t bytes, bool persistent) {
    const std::string key = tensor + "|" + tag + "|" + std::to_string(device) + "|" + inst;
    auto it = buffer_ids_.find(key);
    if (it != buffer_ids_.end()) return it->second;
    Buffer b;
    b.id = static_cast<int>(eg_.buffers.size());
    b.name = tensor + ":" + tag + "@" + std::to_string(device) + ":" + inst;
    b.tensor = tensor;
    b.device = device;
    b.bytes = bytes;
    b.persistent = persistent;
    eg_.buffers.push_back(b);
    buffer_ids_[key] = b.id;
    return b.id;
  }

  const PlacementLayout& memory_layout(const std::string& tensor) {
    auto it = mem_layouts_.find(tensor);
    if (it != mem_layouts_.end()) return it->second;
    auto cit = t_.tensor_configs.find(tensor);
    if (cit == t_.tensor_configs.end())
      throw Error("tensor '" + tensor + "'", "no memory config");
    return mem_layouts_[tensor] = layout_of(scaled_.at(tensor), cit->second);
  }

  Bufs layout_buffers(const std::string& tensor, const PlacementLayout& l,
                      const std::string& tag, const std::string& inst, bool persistent) {
    Bufs out;
    for (int d : l.devices())
      out[d].push_back(buffer(tensor, tag, d, inst, l.bytes_on(d), persistent));
    return out;
  }

  Bufs persistent_buffers(const std::string& tensor) {
    return layout_buffers(tensor, memory_layout(tensor), "M", "iter", true);
  }

  // Buffers holding `tensor` in its memory layout for one instance.
  Bufs memory_buffers(const std::string& tensor, const std::string& inst) {
    const auto& t = g_.tensor(tensor);
    if (t.persistent()) return persistent_buffers(tensor);
    const std::string key = tensor + "|" + inst;
    auto it = mem_bufs_.find(key);
    if (it != mem_bufs_.end()) return it->second;
    if (!t.producer.empty())
      throw Error("tensor '" + tensor + "'", "consumed before it is produced (" + inst + ")");
    return mem_bufs_[key] = layout_buffers(tensor, memory_layout(tensor), "M", inst, false);
  }

  int new_task(Task t, int sg) {
    t.id = static_cast<int>(eg_.tasks.size());
    t.subgraph = sg;
    t.micro_batch = eg_.subgraphs[sg].micro_batch;
    eg_.subgraphs[sg].tasks.push_back(t.id);
    for (int b : t.reads) eg_.buffers[b].readers.push_back(t.id);
    for (int b : t.writes) eg_.buffers[b].writers.push_back(t.id);
    eg_.tasks.push_back(std::move(t));
    return eg_.tasks.back().id;
  }

  // Emits the comm tasks of one inferred plan. Collectives and broadcast
  // leave one fresh buffer per receiver; point-to-point pieces accumulate.
  Bufs emit_transform(const std::string& tensor, const PlacementLayout& from, const Bufs& from_bufs,
                      const PlacementLayout& to, int sg, TaskKind kind, const std::string& tag,
                      const std::string& inst, const Bufs* persistent_dst) {
    const CommPlan plan = infer_transform(from, to);
    Bufs current = from_bufs;
    const auto& spec = scaled_.at(tensor);
    for (std::size_t k = 0; k < plan.steps.size(); ++k) {
      const auto& s = plan.steps[k];
      Task task;
      task.kind = kind;
      task.primitive = s.primitive;
      task.group = s.group;
      task.bytes = s.bytes;
      task.tensor = tensor;
      const std::string sub = eg_.subgraphs[sg].name;
      task.name = tensor + ":" + tag + ":" + std::to_string(k) + ":" + to_string(s.primitive) +
                  "{" + join_ints(s.group) + "}@" + sub;
      std::vector<int> senders, receivers;
      switch (s.primitive) {
        case Primitive::broadcast:
          senders = {s.group[0]};
          receivers.assign(s.group.begin() + 1, s.group.end());
          break;
        case Primitive::send_recv:
          senders = {s.group[0]};
          receivers = {s.group[1]};
          break;
        default:
          senders = s.group;
          receivers = s.group;
      }
      for (int d : senders)
        for (int b : current[d]) task.reads.push_back(b);
      sort_unique(task.reads);
      std::map<int, int> written;
      for (int d : receivers) {
        int b;
        if (persistent_dst && persistent_dst->count(d))
          b = persistent_dst->at(d).front();
        else
          b = buffer(tensor, tag + "#" + std::to_string(k), d, inst,
                     s.output_elements(d) * spec.element_bytes, false);
        task.writes.push_back(b);
        written[d] = b;
      }
      sort_unique(task.writes);
      new_task(std::move(task), sg);
      for (const auto& [d, b] : written) {
        if (s.primitive == Primitive::send_recv) {
          current[d].push_back(b);
          sort_unique(current[d]);
        } else {
          current[d] = {b};
        }
      }
    }
    Bufs out;
    for (int d : to.devices()) {
      if (persistent_dst && persistent_dst->count(d)) {
        out[d] = persistent_dst->at(d);
        continue;
      }
      auto it = current.find(d);
      if (it == current.end() || it->second.empty())
        throw Error("tensor '" + tensor + "'",
                    "transformation leaves device " + std::to_string(d) + " without data");
      out[d] = it->second;
    }
    return out;
  }

  TaskKind comm_kind(const std::string& tensor, int sg) const {
    if (eg_.subgraphs[sg].phase == Phase::update || param_grad(g_.tensor(tensor)))
      return TaskKind::gradient_comm;
    return TaskKind::feature_comm;
  }

  static std::string layout_key(const PlacementLayout& l) {
    std::string k;
    for (const auto& h : l.holdings)
      k += std::to_string(h.device) + to_string(h.box) + std::to_string(h.contrib) + ";";
    return k;
  }

  Bufs input_buffers(const std::string& tensor, const std::string& inst,
                     const PlacementLayout& need, int sg) {
    const auto& mem = memory_layout(tensor);
    Bufs m = memory_buffers(tensor, inst);
    if (need == mem) return m;
    const std::string key = tensor + "|" + inst + "|" + std::to_string(sg) + "|" + layout_key(need);
    auto it = consumer_bufs_.find(key);
    if (it != consumer_bufs_.end()) return it->second;
    const std::string tag = "C" + std::to_string(consumer_bufs_.size());
    return consumer_bufs_[key] =
               emit_transform(tensor, mem, m, need, sg, comm_kind(tensor, sg), tag, inst, nullptr);
  }

  std::map<std::string, int64_t> op_extents(const OperatorSpec& op) const {
    std::map<std::string, int64_t> ext;
    for (const auto& n : op.inputs)
      for (const auto& d : scaled_.at(n).shape) ext[d.label] = d.extent;
    for (const auto& n : op.outputs)
      for (const auto& d : scaled_.at(n).shape) ext[d.label] = d.extent;
    return ext;
  }

  void emit_op(const std::string& name, Phase phase, int mb) {
    const auto& op = g_.op(name);
    const int u = unit_of(name);
    const int sg = sg_.at({u, phase, mb});
    const auto& cfg = t_.op_configs.at(name);
    const std::string where = "operator '" + name + "'";

    std::vector<Bufs> in_bufs;
    for (const auto& in : op.inputs) {
      const std::string inst = instance(in, mb, reads_recomputed(in, u, phase));
      in_bufs.push_back(
          input_buffers(in, inst, implied_input_layout(scaled_.at(in), op, cfg), sg));
    }

    struct Out {
      std::string tensor, inst;
      PlacementLayout produced;
      Bufs bufs;
      bool in_place = false;
    };
    std::vector<Out> outs;
    for (const auto& out : op.outputs) {
      Out o;
      o.tensor = out;
      o.inst = instance(out, mb, phase == Phase::recompute);
      o.produced = implied_output_layout(scaled_.at(out), op, cfg);
      const auto& spec = g_.tensor(out);
      if (spec.persistent() && o.produced == memory_layout(out)) {
        o.bufs = persistent_buffers(out);
        o.in_place = true;
      } else {
        o.bufs = layout_buffers(out, o.produced, "P", o.inst, false);
      }
      outs.push_back(std::move(o));
    }

    for (const auto& shard : split_operator(op, cfg, op_extents(op))) {
      Task task;
      task.kind = TaskKind::compute;
      task.device = shard.device;
      task.op = name;
      task.op_type = op.type;
      task.cost_key = op.cost_key;
      task.extents = shard.extents;
      task.name = name + "[" + std::to_string(shard.part) + "]@" + std::to_string(shard.device) +
                  ":" + eg_.subgraphs[sg].name;
      for (std::size_t k = 0; k < in_bufs.size(); ++k) {
        auto it = in_bufs[k].find(shard.device);
        if (it == in_bufs[k].end())
          throw Error(where, "input '" + op.inputs[k] + "' has no data on device " +
                                 std::to_string(shard.device));
        task.reads.insert(task.reads.end(), it->second.begin(), it->second.end());
      }
      for (const auto& o : outs) task.writes.push_back(o.bufs.at(shard.device).front());
      sort_unique(task.reads);
      sort_unique(task.writes);
      new_task(std::move(task), sg);
    }

    for (auto& o : outs) {
      const auto& spec = g_.tensor(o.tensor);
      if (param_grad(spec)) {
        grad_accum_[o.tensor] = {o.produced, o.bufs};
        continue;
      }
      if (o.in_place) continue;
      const auto& mem = memory_layout(o.tensor);
      if (spec.persistent()) {
        auto dst = persistent_buffers(o.tensor);
        emit_transform(o.tensor, o.produced, o.bufs, mem, sg, comm_kind(o.tensor, sg), "W",
                       "iter", &dst);
        continue;
      }
      const std::string key = o.tensor + "|" + o.inst;
      if (o.produced == mem)
        mem_bufs_[key] = o.bufs;
      else
        mem_bufs_[key] = emit_transform(o.tensor, o.produced, o.bufs, mem, sg,
                                        comm_kind(o.tensor, sg), "M", o.inst, nullptr);
    }
  }

  std::map<std::string, std::pair<PlacementLayout, Bufs>> grad_accum_;

  // Gradients accumulate over micro-batches; one synchronization per
  // parameter gradient in the update phase.
  void sync_gradients() {
    for (const auto& t : g_.tensors) {
      auto it = grad_accum_.find(t.name);
      if (it == grad_accum_.end()) continue;
      const int sg = sg_.at({unit_of(t.producer), Phase::update, -1});
      const auto& [produced, bufs] = it->second;
      const auto& mem = memory_layout(t.name);
      const std::string key = t.name + "|iter";
      if (produced == mem)
        mem_bufs_[key] = bufs;
      else
        mem_bufs_[key] = emit_transform(t.name, produced, bufs, mem, sg, TaskKind::gradient_comm,
                                        "M", "iter", nullptr);
    }
  }

  void add_edge(int from, int to, bool control) {
    if (from == to) return;
    edge_set_.insert({from, to, control});
  }

  void wire_data_edges() {
    for (const auto& b : eg_.buffers) {
      if (!b.persistent) {
        for (int w : b.writers)
          for (int r : b.readers) add_edge(w, r, false);
        continue;
      }
      // Persistent state: conflicting accesses keep program order.
      std::vector<int> writers = b.writers;
      sort_unique(writers);
      std::vector<int> all = b.readers;
      all.insert(all.end(), writers.begin(), writers.end());
      sort_unique(all);
      for (int w : writers)
        for (int a : all) {
          if (a < w) add_edge(a, w, false);
          if (a > w) add_edge(w, a, false);
        }
    }
  }

  std::vector<int> internal_ends(int sg, bool sinks) const {
    std::set<int> members(eg_.subgraphs[sg].tasks.begin(), eg_.subgraphs[sg].tasks.end());
    std::set<int> linked;
    for (const auto& e : edge_set_) {
      if (!members.count(e.from) || !members.count(e.to)) continue;
      linked.insert(sinks ? e.from : e.to);
    }
    std::vector<int> out;
    for (int t : members)
      if (!linked.count(t)) out.push_back(t);
    return out;
  }

  void control(int from_sg, int to_sg) {
    if (eg_.subgraphs[from_sg].tasks.empty() || eg_.subgraphs[to_sg].tasks.empty()) return;
    control_pairs_.emplace_back(from_sg, to_sg);
  }
  std::vector<std::pair<int, int>> control_pairs_;

  void wire_control_edges() {
    const int nu = static_cast<int>(eg_.units.size());
    // Units whose forward reads an activation another unit produces.
    std::vector<std::set<int>> downstream(nu);
    for (const auto& op : g_.ops) {
      if (op.phase != OpPhase::forward) continue;
      for (const auto& in : op.inputs) {
        const auto& t = g_.tensor(in);
        if (t.producer.empty()) continue;
        int from = unit_of(t.producer), to = unit_of(op.name);
        if (from != to) downstream[from].insert(to);
      }
    }
    for (int u = 0; u < nu; ++u) {
      const int k = eg_.units[u].schedule.max_ongoing_micro_batch;
      for (int i = 0; i + k < m_; ++i)
        control(sg_.at({u, Phase::backward, i}), sg_.at({u, Phase::forward, i + k}));
      if (!recomputes(u)) continue;
      for (int i = 0; i < m_; ++i) {
        const int r = sg_.at({u, Phase::recompute, i});
        if (!downstream[u].empty()) {
          for (int v : downstream[u]) control(sg_.at({v, Phase::backward, i}), r);
        } else {
          control(sg_.at({u, Phase::forward, std::min(i + k - 1, m_ - 1)}), r);
          if (i > 0) control(sg_.at({u, Phase::backward, i - 1}), r);
        }
        control(r, sg_.at({u, Phase::backward, i}));
      }
    }
    std::map<int, std::vector<int>> sinks, sources;
    for (const auto& [a, b] : control_pairs_) {
      if (!sinks.count(a)) sinks[a] = internal_ends(a, true);
      if (!sources.count(b)) sources[b] = internal_ends(b, false);
    }
    for (const auto& [a, b] : control_pairs_)
      for (int s : sinks[a])
        for (int d : sources[b]) add_edge(s, d, true);
  }

  void finalize() {
    // Drop empty subgraphs and renumber.
    std::vector<int> remap(eg_.subgraphs.size(), -1);
    std::vector<Subgraph> kept;
    for (auto& s : eg_.subgraphs) {
      if (s.tasks.empty()) continue;
      remap[s.id] = static_cast<int>(kept.size());
      s.id = remap[s.id];
      std::vector<int> devs;
      for (int t : s.tasks) {
        auto d = eg_.tasks[t].devices();
        devs.insert(devs.end(), d.begin(), d.end());
      }
      sort_unique(devs);
      s.devices = devs;
      kept.push_back(std::move(s));
    }
    eg_.subgraphs = std::move(kept);
    for (auto& t : eg_.tasks) t.subgraph = remap[t.subgraph];
    std::set<std::pair<int, int>> sge;
    for (const auto& [a, b] : control_pairs_) sge.insert({remap[a], remap[b]});
    eg_.subgraph_edges.assign(sge.begin(), sge.end());

    // A data edge wins over a control edge on the same pair.
    std::map<std::pair<int, int>, bool> merged;
    for (const auto& e : edge_set_) {
      auto key = std::make_pair(e.from, e.to);
      auto it = merged.find(key);
      if (it == merged.end()) merged[key] = e.control;
      else it->second = it->second && e.control;
    }
    eg_.edges.clear();
    for (const auto& [key, ctl] : merged) {
      eg_.edges.push_back({key.first, key.second, ctl});
      eg_.tasks[key.first].succs.push_back(key.second);
      eg_.tasks[key.second].preds.push_back(key.first);
    }
    for (auto& b : eg_.buffers) {
      sort_unique(b.readers);
      sort_unique(b.writers);
    }
    check_acyclic();
  }

  void check_acyclic() const {
    const std::size_t n = eg_.tasks.size();
    std::vector<int> indeg(n, 0);
    for (const auto& e : eg_.edges) ++indeg[e.to];
    std::vector<int> stack;
    for (std::size_t i = 0; i < n; ++i)
      if (!indeg[i]) stack.push_back(static_cast<int>(i));
    std::size_t seen = 0;
    while (!stack.empty()) {
      int x = stack.back();
      stack.pop_back();
      ++seen;
      for (int s : eg_.tasks[x].succs)
        if (--indeg[s] == 0) stack.push_back(s);
    }
    if (seen == n) return;
    for (const auto& e : eg_.edges)
      if (e.control && indeg[e.from] > 0 && indeg[e.to] > 0)
        throw Error("execution graph", "cycle through control edge '" +
                                           eg_.tasks[e.from].name + "' -> '" +
                                           eg_.tasks[e.to].name + "'");
    throw Error("execution graph", "cycle in data dependencies");
  }
};

}  // namespace detail

// Model, propagated strategy and cluster to a device-level task graph.
inline ExecutionGraph compile(const ModelGraph& g, const StrategyTree& t, const ClusterSpec& c) {
  auto diags = validate_strategy(t, g, c);
  if (!diags.empty()) throw AggregateError("invalid strategy:", diags);
  return detail::Compiler(g, t, c).run();
}

// Rebuilds preds/succs from `edges`; for hand-built graphs.
inline void link_edges(ExecutionGraph& eg) {
  for (auto& t : eg.tasks) {
    t.preds.clear();
    t.succs.clear();
  }
  for (const auto& e : eg.edges) {
    eg.tasks[e.from].succs.push_back(e.to);
    eg.tasks[e.to].preds.push_back(e.from);
  }
  for (auto& t : eg.tasks) {
    sort_unique(t.preds);
    sort_unique(t.succs);
  }
}

inline std::vector<int> topological_order(const ExecutionGraph& eg, bool with_control = true) {
  const std::size_t n = eg.tasks.size();
  std::vector<int> indeg(n, 0);
  std::vector<std::vector<int>> succ(n);
  for (const auto& e : eg.edges) {
    if (e.control && !with_control) continue;
    ++indeg[e.to];
    succ[e.from].push_back(e.to);
  }
  std::vector<int> order;
  std::set<int> ready;
  for (std::size_t i = 0; i < n; ++i)
    if (!indeg[i]) ready.insert(static_cast<int>(i));
  while (!ready.empty()) {
    int x = *ready.begin();
    ready.erase(ready.begin());
    order.push_back(x);
    for (int s : succ[x])
      if (--indeg[s] == 0) ready.insert(s);
  }
  if (order.size() != n) throw Error("execution graph", "cycle");
  return order;
}

// Longest duration-weighted path, ignoring resource limits.
inline double critical_path(const ExecutionGraph& eg, bool with_control = true) {
  std::vector<double> finish(eg.tasks.size(), 0.0);
  std::vector<std::vector<int>> pred(eg.tasks.size());
  for (const auto& e : eg.edges)
    if (with_control || !e.control) pred[e.to].push_back(e.from);
  double best = 0;
  for (int t : topological_order(eg, with_control)) {
    double start = 0;
    for (int p : pred[t]) start = std::max(start, finish[p]);
    finish[t] = start + eg.tasks[t].duration;
    best = std::max(best, finish[t]);
  }
  return best;
}

inline json graph_to_json(const ExecutionGraph& eg) {
  json tasks = json::array();
  for (const auto& t : eg.tasks) {
    json j = {{"id", t.id},
              {"name", t.name},
              {"kind", to_string(t.kind)},
              {"subgraph", t.subgraph},
              {"micro_batch", t.micro_batch},
              {"reads", t.reads},
              {"writes", t.writes},
              {"duration", t.duration}};
    if (t.is_comm()) {
      j["group"] = t.group;
      j["primitive"] = to_string(t.primitive);
      j["bytes"] = t.bytes;
      j["tensor"] = t.tensor;
      j["level"] = to_string(t.level);
    } else {
      j["device"] = t.device;
      j["op"] = t.op;
      j["cost_key"] = t.cost_key;
      j["extents"] = t.extents;
    }
    tasks.push_back(j);
  }
  json buffers = json::array();
  for (const auto& b : eg.buffers)
    buffers.push_back({{"id", b.id},
                       {"name", b.name},
                       {"device", b.device},
                       {"bytes", b.bytes},
                       {"persistent", b.persistent},
                       {"writers", b.writers},
                       {"readers", b.readers}});
  json edges = json::array();
  for (const auto& e : eg.edges)
    edges.push_back({{"from", e.from}, {"to", e.to}, {"type", e.control ? "control" : "data"}});
  json subgraphs = json::array();
  for (const auto& s : eg.subgraphs)
    subgraphs.push_back({{"id", s.id},
                         {"name", s.name},
                         {"phase", to_string(s.phase)},
                         {"origin", eg.units[s.origin].name},
                         {"micro_batch", s.micro_batch},
                         {"devices", s.devices},
                         {"tasks", s.tasks}});
  json sge = json::array();
  for (const auto& [a, b] : eg.subgraph_edges) sge.push_back({a, b});
  json units = json::array();
  for (const auto& u : eg.units)
    units.push_back({{"name", u.name},
                     {"devices", u.devices},
                     {"n_micro_batch", u.schedule.n_micro_batch},
                     {"max_ongoing_micro_batch", u.schedule.max_ongoing_micro_batch},
                     {"recomputation", u.schedule.recomputation}});
  return {{"units", units},       {"subgraphs", subgraphs}, {"subgraph_edges", sge},
          {"tasks", tasks},       {"buffers", buffers},     {"edges", edges}};
}

}  // namespace stratsim
