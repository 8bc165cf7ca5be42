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

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "stratsim/common.hpp"

namespace stratsim {

struct Dim {
  std::string label;
  int64_t extent = 1;

  bool operator==(const Dim&) const = default;
};

enum class TensorKind { activation, parameter, gradient, optimizer_state };

inline std::string to_string(TensorKind k) {
  switch (k) {
    case TensorKind::activation: return "activation";
    case TensorKind::parameter: return "parameter";
    case TensorKind::gradient: return "gradient";
    case TensorKind::optimizer_state: return "optimizer-state";
  }
  return "?";
}

inline std::optional<TensorKind> tensor_kind_from_string(const std::string& s) {
  if (s == "activation") return TensorKind::activation;
  if (s == "parameter") return TensorKind::parameter;
  if (s == "gradient") return TensorKind::gradient;
  if (s == "optimizer-state" || s == "optimizer_state")
    return TensorKind::optimizer_state;
  return std::nullopt;
}

struct TensorSpec {
  std::string name;
  std::vector<Dim> shape;
  int64_t element_bytes = 4;
  TensorKind kind = TensorKind::activation;
  bool requires_grad = true;
  std::string layer;
  std::string producer;                // empty: graph input or parameter
  std::vector<std::string> consumers;  // operator names
  std::string grad_of;                 // gradients and optimizer states
  std::string updated_by;              // optimizer step of a parameter

  int64_t elements() const {
    int64_t n = 1;
    for (const auto& d : shape) n *= d.extent;
    return n;
  }
  int64_t bytes() const { return elements() * element_bytes; }
  bool persistent() const {
    return kind == TensorKind::parameter ||
           kind == TensorKind::optimizer_state;
  }
  bool has_dim(const std::string& label) const {
    for (const auto& d : shape)
      if (d.label == label) return true;
    return false;
  }
  int64_t extent(const std::string& label) const {
    for (const auto& d : shape)
      if (d.label == label) return d.extent;
    return 1;
  }
  std::vector<std::string> labels() const {
    std::vector<std::string> out;
    for (const auto& d : shape) out.push_back(d.label);
    return out;
  }
};

enum class OpPhase { forward, backward, optimizer };

inline std::string to_string(OpPhase p) {
  switch (p) {
    case OpPhase::forward: return "forward";
    case OpPhase::backward: return "backward";
    case OpPhase::optimizer: return "optimizer";
  }
  return "?";
}

// How the backward rule table treats an operator type.
enum class OpClass { contraction, pointwise, optimizer };

inline std::optional<OpClass> op_class(const std::string& type) {
  static const std::map<std::string, OpClass> table = {
      {"matmul", OpClass::contraction},   {"linear", OpClass::contraction},
      {"conv", OpClass::contraction},     {"batch-matmul", OpClass::contraction},
      {"elementwise", OpClass::pointwise}, {"embedding", OpClass::pointwise},
      {"softmax", OpClass::pointwise},    {"layernorm", OpClass::pointwise},
      {"norm", OpClass::pointwise},       {"pool", OpClass::pointwise},
      {"reduce", OpClass::pointwise},     {"loss", OpClass::pointwise},
      {"optimizer-step", OpClass::optimizer},
  };
  auto it = table.find(type);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

struct OperatorSpec {
  std::string name;
  std::string type;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::vector<std::string> parallel_dims;
  std::vector<std::string> reduction_dims;
  std::vector<std::string> excluded_dims;
  std::vector<std::string> new_dims;
  std::string cost_key;
  OpPhase phase = OpPhase::forward;
  std::string forward_op;  // backward ops only
  std::string layer;

  bool is_parallelizable(const std::string& label) const {
    return std::find(parallel_dims.begin(), parallel_dims.end(), label) !=
           parallel_dims.end();
  }
  bool is_reduction(const std::string& label) const {
    return std::find(reduction_dims.begin(), reduction_dims.end(), label) !=
           reduction_dims.end();
  }
};

struct LayerNode {
  std::string name;
  std::vector<std::string> module_path;
  std::vector<std::string> forward_ops;
  std::vector<std::string> backward_ops;
  std::vector<std::string> optimizer_ops;
  std::vector<std::string> tensors;
};

struct LayerEdge {
  std::string tensor;
  std::string from_layer;
  std::string to_layer;

  bool operator==(const LayerEdge&) const = default;
  auto operator<=>(const LayerEdge&) const = default;
};

class ModelGraph {
 public:
  int64_t batch_size = 1;
  std::string batch_dim = "b";
  double optimizer_state_multiplier = 2.0;
  bool has_backward = false;

  std::vector<LayerNode> layers;
  std::vector<OperatorSpec> ops;
  std::vector<TensorSpec> tensors;

  void reindex() {
    op_index_.clear();
    tensor_index_.clear();
    layer_index_.clear();
    for (std::size_t i = 0; i < ops.size(); ++i) op_index_[ops[i].name] = i;
    for (std::size_t i = 0; i < tensors.size(); ++i)
      tensor_index_[tensors[i].name] = i;
    for (std::size_t i = 0; i < layers.size(); ++i)
      layer_index_[layers[i].name] = i;
  }

  bool has_op(const std::string& n) const { return op_index_.count(n) > 0; }
  bool has_tensor(const std::string& n) const {
    return tensor_index_.count(n) > 0;
  }
  bool has_layer(const std::string& n) const {
    return layer_index_.count(n) > 0;
  }
  const OperatorSpec& op(const std::string& n) const {
    auto it = op_index_.find(n);
    if (it == op_index_.end()) throw Error(n, "unknown operator");
    return ops[it->second];
  }
  OperatorSpec& op(const std::string& n) {
    return const_cast<OperatorSpec&>(std::as_const(*this).op(n));
  }
  const TensorSpec& tensor(const std::string& n) const {
    auto it = tensor_index_.find(n);
    if (it == tensor_index_.end()) throw Error(n, "unknown tensor");
    return tensors[it->second];
  }
  TensorSpec& tensor(const std::string& n) {
    return const_cast<TensorSpec&>(std::as_const(*this).tensor(n));
  }
  const LayerNode& layer(const std::string& n) const {
    auto it = layer_index_.find(n);
    if (it == layer_index_.end()) throw Error(n, "unknown layer");
    return layers[it->second];
  }
  std::size_t layer_position(const std::string& n) const {
    auto it = layer_index_.find(n);
    if (it == layer_index_.end()) throw Error(n, "unknown layer");
    return it->second;
  }
  std::size_t op_position(const std::string& n) const {
    auto it = op_index_.find(n);
    if (it == op_index_.end()) throw Error(n, "unknown operator");
    return it->second;
  }

  // Forward operators in a topological order that keeps declaration order
  // among independent operators. Throws on a forward cycle.
  std::vector<std::string> forward_order() const {
    std::vector<std::string> fwd;
    for (const auto& o : ops)
      if (o.phase == OpPhase::forward) fwd.push_back(o.name);
    std::map<std::string, int> indeg;
    std::map<std::string, std::vector<std::string>> succ;
    for (const auto& name : fwd) indeg[name] = 0;
    for (const auto& name : fwd) {
      for (const auto& in : op(name).inputs) {
        if (!has_tensor(in)) continue;
        const auto& p = tensor(in).producer;
        if (p.empty() || !indeg.count(p)) continue;
        succ[p].push_back(name);
        ++indeg[name];
      }
    }
    std::vector<std::string> order;
    std::vector<bool> done(fwd.size(), false);
    while (order.size() < fwd.size()) {
      bool progressed = false;
      for (std::size_t i = 0; i < fwd.size(); ++i) {
        if (done[i] || indeg[fwd[i]] != 0) continue;
        done[i] = true;
        order.push_back(fwd[i]);
        for (const auto& s : succ[fwd[i]]) --indeg[s];
        progressed = true;
        break;
      }
      if (!progressed) throw Error("model", "forward graph has a cycle");
    }
    return order;
  }

  std::vector<LayerEdge> forward_edges() const {
    return edges_for(OpPhase::forward);
  }
  std::vector<LayerEdge> backward_edges() const {
    return edges_for(OpPhase::backward);
  }

  int64_t total_bytes() const {
    int64_t total = 0;
    for (const auto& t : tensors) total += t.bytes();
    return total;
  }

  // Tensors with no consumer among forward operators (loss-like outputs).
  std::vector<std::string> graph_outputs() const {
    std::vector<std::string> out;
    for (const auto& t : tensors) {
      if (t.kind != TensorKind::activation || t.producer.empty()) continue;
      bool consumed = false;
      for (const auto& c : t.consumers)
        if (has_op(c) && op(c).phase == OpPhase::forward) consumed = true;
      if (!consumed) out.push_back(t.name);
    }
    return out;
  }

 private:
  std::vector<LayerEdge> edges_for(OpPhase phase) const {
    std::vector<LayerEdge> out;
    for (const auto& o : ops) {
      if (o.phase != phase) continue;
      for (const auto& in : o.inputs) {
        if (!has_tensor(in)) continue;
        const auto& t = tensor(in);
        if (t.producer.empty() || !has_op(t.producer)) continue;
        if (op(t.producer).phase != phase) continue;  // e.g. saved activations
        const auto& from = op(t.producer).layer;
        if (from != o.layer) out.push_back({in, from, o.layer});
      }
    }
    sort_unique(out);
    return out;
  }

  std::map<std::string, std::size_t> op_index_;
  std::map<std::string, std::size_t> tensor_index_;
  std::map<std::string, std::size_t> layer_index_;
};

namespace detail {

inline void push_unique(std::vector<std::string>& v, const std::string& s) {
  if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
}

// Unique labels over inputs then outputs; reduction dims appear in inputs
// but in no output.
inline void infer_op_dims(const ModelGraph& g, OperatorSpec& o) {
  std::vector<std::string> in_labels, out_labels;
  for (const auto& in : o.inputs)
    if (g.has_tensor(in))
      for (const auto& d : g.tensor(in).shape) push_unique(in_labels, d.label);
  for (const auto& out : o.outputs)
    if (g.has_tensor(out))
      for (const auto& d : g.tensor(out).shape) push_unique(out_labels, d.label);
  o.parallel_dims.clear();
  o.reduction_dims.clear();
  auto excluded = [&](const std::string& l) {
    return std::find(o.excluded_dims.begin(), o.excluded_dims.end(), l) !=
           o.excluded_dims.end();
  };
  for (const auto& l : in_labels)
    if (!excluded(l)) push_unique(o.parallel_dims, l);
  for (const auto& l : out_labels)
    if (!excluded(l)) push_unique(o.parallel_dims, l);
  if (o.phase == OpPhase::optimizer) return;
  for (const auto& l : in_labels)
    if (!excluded(l) &&
        std::find(out_labels.begin(), out_labels.end(), l) == out_labels.end())
      o.reduction_dims.push_back(l);
}

inline void link_tensors(ModelGraph& g) {
  for (auto& t : g.tensors) {
    t.producer.clear();
    t.consumers.clear();
    t.updated_by.clear();
  }
  for (const auto& o : g.ops) {
    for (const auto& in : o.inputs)
      if (g.has_tensor(in)) push_unique(g.tensor(in).consumers, o.name);
    for (const auto& out : o.outputs) {
      if (!g.has_tensor(out)) continue;
      auto& t = g.tensor(out);
      if (o.phase == OpPhase::optimizer && t.persistent())
        t.updated_by = o.name;
      else if (t.producer.empty())
        t.producer = o.name;
    }
  }
}

}  // namespace detail

// Returns one message per violated invariant; empty means the graph is valid.
inline std::vector<std::string> validate_graph(const ModelGraph& g) {
  std::vector<std::string> diags;
  if (g.layers.empty()) diags.push_back("empty model");
  if (g.batch_size < 1) diags.push_back("batch_size must be >= 1");

  std::set<std::string> seen_tensors, seen_ops;
  for (const auto& t : g.tensors) {
    if (!seen_tensors.insert(t.name).second)
      diags.push_back("duplicate tensor '" + t.name + "'");
    std::set<std::string> labels;
    for (const auto& d : t.shape) {
      if (d.extent < 1)
        diags.push_back("tensor '" + t.name + "' dim '" + d.label +
                        "' has extent < 1");
      if (!labels.insert(d.label).second)
        diags.push_back("tensor '" + t.name + "' repeats dim label '" +
                        d.label + "'");
    }
    if (t.element_bytes < 1)
      diags.push_back("tensor '" + t.name + "' has element size < 1");
    for (const auto& c : t.consumers) {
      if (!g.has_op(c) || !g.has_layer(g.op(c).layer))
        diags.push_back("dangling consumer '" + c + "' of tensor '" + t.name +
                        "'");
    }
    if (!t.producer.empty() &&
        (!g.has_op(t.producer) || !g.has_layer(g.op(t.producer).layer)))
      diags.push_back("dangling producer '" + t.producer + "' of tensor '" +
                      t.name + "'");
  }

  std::map<std::string, std::string> producer_of;
  for (const auto& o : g.ops) {
    if (!seen_ops.insert(o.name).second)
      diags.push_back("duplicate operator '" + o.name + "'");
    if (!op_class(o.type))
      diags.push_back("operator '" + o.name + "' has unknown type '" + o.type +
                      "'");
    if (!g.has_layer(o.layer))
      diags.push_back("operator '" + o.name + "' belongs to unknown layer '" +
                      o.layer + "'");
    std::map<std::string, int64_t> extents;
    std::set<std::string> in_labels;
    bool refs_ok = true;
    for (const auto& in : o.inputs) {
      if (!g.has_tensor(in)) {
        diags.push_back("operator '" + o.name +
                        "' references unknown tensor '" + in + "'");
        refs_ok = false;
        continue;
      }
      for (const auto& d : g.tensor(in).shape) in_labels.insert(d.label);
    }
    for (const auto& out : o.outputs) {
      if (!g.has_tensor(out)) {
        diags.push_back("operator '" + o.name +
                        "' references unknown tensor '" + out + "'");
        refs_ok = false;
        continue;
      }
      const auto& t = g.tensor(out);
      bool inplace = o.phase == OpPhase::optimizer && t.persistent();
      if (!inplace) {
        auto [it, fresh] = producer_of.emplace(out, o.name);
        if (!fresh)
          diags.push_back("tensor '" + out + "' produced by both '" +
                          it->second + "' and '" + o.name + "'");
      }
      for (const auto& d : t.shape) {
        if (in_labels.count(d.label) || o.inputs.empty()) continue;
        if (std::find(o.new_dims.begin(), o.new_dims.end(), d.label) ==
            o.new_dims.end())
          diags.push_back("operator '" + o.name + "' output dim '" + d.label +
                          "' appears in no input and is not declared");
      }
    }
    if (!refs_ok) continue;
    auto check_extent = [&](const TensorSpec& t) {
      for (const auto& d : t.shape) {
        auto [it, fresh] = extents.emplace(d.label, d.extent);
        if (!fresh && it->second != d.extent)
          diags.push_back("operator '" + o.name + "' sees dim '" + d.label +
                          "' with extents " + std::to_string(it->second) +
                          " and " + std::to_string(d.extent));
      }
    };
    for (const auto& in : o.inputs) check_extent(g.tensor(in));
    for (const auto& out : o.outputs) check_extent(g.tensor(out));

    OperatorSpec expected = o;
    detail::infer_op_dims(g, expected);
    std::set<std::string> a(o.parallel_dims.begin(), o.parallel_dims.end());
    std::set<std::string> b(expected.parallel_dims.begin(),
                            expected.parallel_dims.end());
    if (a != b)
      diags.push_back("operator '" + o.name +
                      "' parallelizable dims differ from its tensors' labels");
  }
  try {
    (void)g.forward_order();
  } catch (const Error&) {
    diags.push_back("forward graph has a cycle");
  }
  return diags;
}

namespace detail {

inline std::vector<std::string> string_list(const json& j,
                                            const std::string& key,
                                            const std::string& where) {
  if (!j.contains(key)) return {};
  if (!j.at(key).is_array())
    throw Error(where + "/" + key, "expected a list of strings");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < j.at(key).size(); ++i) {
    const auto& e = j.at(key)[i];
    if (!e.is_string())
      throw Error(where + "/" + key + "/" + std::to_string(i),
                  "expected a string");
    out.push_back(e.get<std::string>());
  }
  return out;
}

}  // namespace detail

inline ModelGraph parse_model(const json& doc) {
  ModelGraph g;
  if (!doc.is_object()) throw Error("", "model document must be an object");
  g.batch_size = require_field<int64_t>(doc, "batch_size", "");
  if (g.batch_size < 1) throw Error("batch_size", "must be >= 1");
  g.batch_dim = optional_field<std::string>(doc, "batch_dim", "b", "");
  g.optimizer_state_multiplier =
      optional_field<double>(doc, "optimizer_state_multiplier", 2.0, "");
  if (g.optimizer_state_multiplier < 0)
    throw Error("optimizer_state_multiplier", "must be >= 0");
  if (!doc.contains("layers") || !doc.at("layers").is_array())
    throw Error("layers", "missing or not a list");
  const auto& layers = doc.at("layers");
  if (layers.empty()) throw Error("layers", "empty model");

  std::set<std::string> layer_names;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const std::string lw = "layers/" + std::to_string(li);
    const auto& lj = layers[li];
    LayerNode layer;
    layer.name = require_field<std::string>(lj, "name", lw);
    if (!layer_names.insert(layer.name).second)
      throw Error(lw + "/name", "duplicate layer '" + layer.name + "'");
    layer.module_path = detail::string_list(lj, "module_path", lw);

    if (lj.contains("tensors")) {
      const auto& tj = lj.at("tensors");
      if (!tj.is_array()) throw Error(lw + "/tensors", "expected a list");
      for (std::size_t ti = 0; ti < tj.size(); ++ti) {
        const std::string tw = lw + "/tensors/" + std::to_string(ti);
        TensorSpec t;
        t.name = require_field<std::string>(tj[ti], "name", tw);
        t.layer = layer.name;
        t.element_bytes = optional_field<int64_t>(tj[ti], "dtype_bytes", 4, tw);
        if (t.element_bytes < 1) throw Error(tw + "/dtype_bytes", "must be >= 1");
        auto kind_str = optional_field<std::string>(tj[ti], "kind",
                                                    "activation", tw);
        auto kind = tensor_kind_from_string(kind_str);
        if (!kind) throw Error(tw + "/kind", "unknown tensor kind '" + kind_str + "'");
        t.kind = *kind;
        t.requires_grad = optional_field<bool>(tj[ti], "requires_grad", true, tw);
        if (!tj[ti].contains("dims") || !tj[ti].at("dims").is_array())
          throw Error(tw + "/dims", "missing or not a list");
        const auto& dj = tj[ti].at("dims");
        std::set<std::string> labels;
        for (std::size_t di = 0; di < dj.size(); ++di) {
          const std::string dw = tw + "/dims/" + std::to_string(di);
          Dim d;
          d.label = require_field<std::string>(dj[di], "label", dw);
          d.extent = require_field<int64_t>(dj[di], "extent", dw);
          if (d.extent < 1) throw Error(dw + "/extent", "must be >= 1");
          if (!labels.insert(d.label).second)
            throw Error(dw + "/label", "repeated label '" + d.label + "'");
          t.shape.push_back(d);
        }
        if (g.has_tensor(t.name))
          throw Error(tw + "/name", "duplicate tensor '" + t.name + "'");
        layer.tensors.push_back(t.name);
        g.tensors.push_back(t);
        g.reindex();
      }
    }

    if (!lj.contains("ops") || !lj.at("ops").is_array())
      throw Error(lw + "/ops", "missing or not a list");
    const auto& oj = lj.at("ops");
    for (std::size_t oi = 0; oi < oj.size(); ++oi) {
      const std::string ow = lw + "/ops/" + std::to_string(oi);
      OperatorSpec o;
      o.type = require_field<std::string>(oj[oi], "type", ow);
      if (!op_class(o.type) || *op_class(o.type) == OpClass::optimizer)
        throw Error(ow + "/type", "unknown operator type '" + o.type + "'");
      o.name = optional_field<std::string>(
          oj[oi], "name", layer.name + "." + o.type + std::to_string(oi), ow);
      o.layer = layer.name;
      o.inputs = detail::string_list(oj[oi], "inputs", ow);
      o.outputs = detail::string_list(oj[oi], "outputs", ow);
      o.excluded_dims = detail::string_list(oj[oi], "exclude_dims", ow);
      o.new_dims = detail::string_list(oj[oi], "new_dims", ow);
      o.cost_key = optional_field<std::string>(oj[oi], "cost_key", o.type, ow);
      if (o.outputs.empty()) throw Error(ow + "/outputs", "operator has no outputs");
      if (g.has_op(o.name))
        throw Error(ow + "/name", "duplicate operator '" + o.name + "'");
      layer.forward_ops.push_back(o.name);
      g.ops.push_back(o);
      g.reindex();
    }
    g.layers.push_back(layer);
    g.reindex();
  }

  // Dangling references are reported with the element path of the use.
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const auto& oj = layers[li].at("ops");
    for (std::size_t oi = 0; oi < oj.size(); ++oi) {
      const std::string ow =
          "layers/" + std::to_string(li) + "/ops/" + std::to_string(oi);
      const auto& o = g.op(g.layers[li].forward_ops[oi]);
      for (std::size_t k = 0; k < o.inputs.size(); ++k)
        if (!g.has_tensor(o.inputs[k]))
          throw Error(ow + "/inputs/" + std::to_string(k),
                      "dangling tensor reference '" + o.inputs[k] + "'");
      for (std::size_t k = 0; k < o.outputs.size(); ++k)
        if (!g.has_tensor(o.outputs[k]))
          throw Error(ow + "/outputs/" + std::to_string(k),
                      "dangling tensor reference '" + o.outputs[k] + "'");
    }
  }

  for (auto& o : g.ops) detail::infer_op_dims(g, o);
  detail::link_tensors(g);
  auto diags = validate_graph(g);
  if (!diags.empty()) throw AggregateError("invalid model:", diags);
  return g;
}

inline ModelGraph load_model(const std::string& path) {
  try {
    return parse_model(read_json_file(path));
  } catch (const AggregateError&) {
    throw;
  } catch (const Error& e) {
    if (e.where().rfind(path, 0) == 0) throw;
    throw Error(path + ":" + e.where(), e.message());
  }
}

inline std::string grad_name(const ModelGraph& g, const std::string& tensor,
                             const std::string& consumer) {
  const auto& t = g.tensor(tensor);
  int fwd_consumers = 0;
  for (const auto& c : t.consumers)
    if (g.op(c).phase == OpPhase::forward) ++fwd_consumers;
  if (fwd_consumers <= 1) return tensor + ".grad";
  return tensor + ".grad." + consumer;
}

// Adds backward operators from a fixed per-type rule table, gradient tensors
// for every parameter and every differentiable consumed activation, and one
// optimizer step (plus state tensor) per parameter. Already-derived graphs are
// returned unchanged.
inline ModelGraph derive_backward(const ModelGraph& input) {
  if (input.has_backward) return input;
  ModelGraph g = input;
  const auto order = g.forward_order();

  auto add_tensor = [&](TensorSpec t) {
    if (g.has_tensor(t.name)) return;
    auto& layer = g.layers[g.layer_position(t.layer)];
    layer.tensors.push_back(t.name);
    g.tensors.push_back(std::move(t));
    g.reindex();
  };
  auto gradient_tensor = [&](const std::string& of, const std::string& name) {
    const auto& src = g.tensor(of);
    TensorSpec t;
    t.name = name;
    t.shape = src.shape;
    t.element_bytes = src.element_bytes;
    t.kind = TensorKind::gradient;
    t.layer = src.layer;
    t.grad_of = of;
    return t;
  };

  // Seeds for tensors nobody consumes (loss-like outputs).
  for (const auto& out : g.graph_outputs())
    add_tensor(gradient_tensor(out, out + ".grad"));

  auto output_grads = [&](const OperatorSpec& o) {
    std::vector<std::string> grads;
    for (const auto& out : o.outputs) {
      const auto& t = g.tensor(out);
      bool consumed = false;
      for (const auto& c : t.consumers) {
        if (g.op(c).phase != OpPhase::forward) continue;
        consumed = true;
        const auto piece = grad_name(g, out, c);
        if (g.has_tensor(piece)) detail::push_unique(grads, piece);
      }
      if (!consumed && g.has_tensor(out + ".grad")) grads.push_back(out + ".grad");
    }
    return grads;
  };

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const OperatorSpec fwd = g.op(*it);
    const auto cls = *op_class(fwd.type);
    const auto dys = output_grads(fwd);
    if (dys.empty()) continue;
    for (std::size_t k = 0; k < fwd.inputs.size(); ++k) {
      const auto& in = fwd.inputs[k];
      const auto& t = g.tensor(in);
      bool wants_grad = t.kind == TensorKind::parameter ||
                        (t.kind == TensorKind::activation && t.requires_grad);
      if (!wants_grad) continue;
      const auto dx = grad_name(g, in, fwd.name);
      add_tensor(gradient_tensor(in, dx));

      OperatorSpec b;
      b.name = fwd.name + ".grad." + in;
      b.type = fwd.type;
      b.phase = OpPhase::backward;
      b.forward_op = fwd.name;
      b.layer = fwd.layer;
      b.cost_key = fwd.cost_key + ".bwd" + std::to_string(k);
      b.excluded_dims = fwd.excluded_dims;
      b.inputs = dys;
      for (std::size_t j = 0; j < fwd.inputs.size(); ++j) {
        if (cls == OpClass::contraction && j == k) continue;
        detail::push_unique(b.inputs, fwd.inputs[j]);
      }
      b.outputs = {dx};
      g.ops.push_back(b);
      g.layers[g.layer_position(fwd.layer)].backward_ops.push_back(b.name);
      g.reindex();
    }
  }

  // Link now so parameter gradient pieces are discoverable.
  for (auto& o : g.ops) detail::infer_op_dims(g, o);
  detail::link_tensors(g);

  for (const auto& layer_copy : std::vector<LayerNode>(g.layers)) {
    for (const auto& tname : layer_copy.tensors) {
      const TensorSpec w = g.tensor(tname);
      if (w.kind != TensorKind::parameter) continue;
      std::vector<std::string> grads;
      for (const auto& t : g.tensors)
        if (t.kind == TensorKind::gradient && t.grad_of == w.name &&
            !t.producer.empty())
          grads.push_back(t.name);
      if (grads.empty()) continue;
      OperatorSpec step;
      step.name = w.name + ".step";
      step.type = "optimizer-step";
      step.phase = OpPhase::optimizer;
      step.layer = w.layer;
      step.cost_key = "optimizer-step";
      step.inputs = {w.name};
      for (const auto& gr : grads) step.inputs.push_back(gr);
      if (g.optimizer_state_multiplier > 0) {
        TensorSpec state;
        state.name = w.name + ".opt";
        state.shape = w.shape;
        state.element_bytes = static_cast<int64_t>(std::llround(
            static_cast<double>(w.element_bytes) *
            g.optimizer_state_multiplier));
        state.kind = TensorKind::optimizer_state;
        state.layer = w.layer;
        state.grad_of = w.name;
        add_tensor(state);
        step.inputs.push_back(state.name);
      }
      step.outputs = {w.name};
      g.ops.push_back(step);
      g.layers[g.layer_position(w.layer)].optimizer_ops.push_back(step.name);
      g.reindex();
    }
  }

  for (auto& o : g.ops) detail::infer_op_dims(g, o);
  detail::link_tensors(g);
  g.has_backward = true;
  return g;
}

}  // namespace stratsim
