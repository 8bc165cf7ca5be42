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
#include <string>
#include <tuple>
#include <vector>

#include "stratsim/cluster.hpp"
#include "stratsim/common.hpp"
#include "stratsim/exec_graph.hpp"
#include "stratsim/layout.hpp"

namespace stratsim {

struct CostEntry {
  std::string cost_key;
  std::map<std::string, int64_t> extents;
  std::string device_type;
  double micros = 0;
};

// Profiled shard durations, keyed exactly, plus an optional peak throughput
// per device type for the flop estimate.
class ComputeCostTable {
 public:
  void add(const CostEntry& e) {
    if (!(e.micros > 0))
      throw Error("cost '" + e.cost_key + "'", "duration must be > 0");
    entries_[{e.cost_key, e.extents, e.device_type}] = e.micros;
  }
  void set_peak(const std::string& device_type, double tflops) {
    if (!(tflops > 0)) throw Error("peak '" + device_type + "'", "peak_tflops must be > 0");
    peaks_[device_type] = tflops;
  }
  std::optional<double> micros(const std::string& key, const std::map<std::string, int64_t>& ext,
                               const std::string& device_type) const {
    auto it = entries_.find({key, ext, device_type});
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }
  std::optional<double> peak_flops(const std::string& device_type) const {
    auto it = peaks_.find(device_type);
    if (it == peaks_.end()) return std::nullopt;
    return it->second * 1e12;
  }
  std::size_t size() const { return entries_.size(); }

 private:
  std::map<std::tuple<std::string, std::map<std::string, int64_t>, std::string>, double> entries_;
  std::map<std::string, double> peaks_;
};

inline ComputeCostTable parse_cost_table(const json& doc) {
  ComputeCostTable table;
  const json* list = &doc;
  if (doc.is_object() && doc.contains("entries")) list = &doc.at("entries");
  if (!list->is_array()) throw Error("", "cost table must be a list of entries");
  for (std::size_t i = 0; i < list->size(); ++i) {
    const auto& e = (*list)[i];
    const std::string w = std::to_string(i);
    if (e.contains("peak_tflops")) {
      table.set_peak(require_field<std::string>(e, "device_type", w),
                     require_field<double>(e, "peak_tflops", w));
      continue;
    }
    CostEntry c;
    c.cost_key = require_field<std::string>(e, "cost_key", w);
    c.extents = optional_field<std::map<std::string, int64_t>>(e, "extents", {}, w);
    c.device_type = require_field<std::string>(e, "device_type", w);
    c.micros = require_field<double>(e, "micros", w);
    if (!(c.micros > 0)) throw Error(w + "/micros", "must be > 0");
    table.add(c);
  }
  return table;
}

inline ComputeCostTable load_cost_table(const std::string& path) {
  try {
    return parse_cost_table(read_json_file(path));
  } catch (const Error& e) {
    if (e.where().rfind(path, 0) == 0) throw;
    throw Error(path + ":" + e.where(), e.message());
  }
}

// Bandwidth multiplier per primitive; missing entries mean 1.
using CorrectionFactors = std::map<Primitive, double>;

inline CorrectionFactors parse_corrections(const json& doc) {
  if (!doc.is_object()) throw Error("", "corrections must map primitive names to factors");
  CorrectionFactors out;
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    auto p = primitive_from_string(it.key());
    if (!p) throw Error(it.key(), "unknown primitive");
    if (!it.value().is_number()) throw Error(it.key(), "factor must be a number");
    double f = it.value().get<double>();
    if (!(f > 0) || f > 1) throw Error(it.key(), "factor must be in (0, 1]");
    out[*p] = f;
  }
  return out;
}

inline CorrectionFactors load_corrections(const std::string& path) {
  try {
    return parse_corrections(read_json_file(path));
  } catch (const Error& e) {
    if (e.where().rfind(path, 0) == 0) throw;
    throw Error(path + ":" + e.where(), e.message());
  }
}

inline double correction(const CorrectionFactors& c, Primitive p) {
  auto it = c.find(p);
  return it == c.end() ? 1.0 : it->second;
}

// Flop estimate, only for types with a standard formula.
inline std::optional<double> estimate_flops(const std::string& type,
                                            const std::map<std::string, int64_t>& extents) {
  double prod = 1;
  for (const auto& [label, e] : extents) prod *= static_cast<double>(e);
  auto cls = op_class(type);
  if (cls == OpClass::contraction) return 2.0 * prod;
  if (type == "elementwise" || type == "optimizer-step") return prod;
  return std::nullopt;
}

inline std::string describe_key(const std::string& key, const std::map<std::string, int64_t>& ext,
                                const std::string& device_type) {
  std::string s = key + " {";
  bool first = true;
  for (const auto& [l, e] : ext) {
    if (!first) s += ",";
    first = false;
    s += l + "=" + std::to_string(e);
  }
  return s + "} on " + device_type;
}

// Seconds for one compute shard.
inline double compute_cost(const std::string& cost_key, const std::string& type,
                           const std::map<std::string, int64_t>& extents,
                           const std::string& device_type, const ComputeCostTable& table) {
  if (auto us = table.micros(cost_key, extents, device_type)) return *us * 1e-6;
  auto peak = table.peak_flops(device_type);
  auto flops = estimate_flops(type, extents);
  if (peak && flops) return *flops / *peak;
  throw Error("missing cost", describe_key(cost_key, extents, device_type));
}

inline double compute_cost(const Task& t, const ComputeCostTable& table,
                           const std::string& device_type) {
  return compute_cost(t.cost_key, t.op_type, t.extents, device_type, table);
}

// Ring-algorithm alpha-beta time; B already includes the correction factor.
inline double collective_cost(Primitive p, double S, int n, double alpha, double B) {
  if (n < 2) throw Error(to_string(p), "communication group needs at least two devices");
  const double k = n - 1;
  switch (p) {
    case Primitive::all_reduce: return 2 * k * alpha + 2 * S * k / (n * B);
    case Primitive::all_gather:
    case Primitive::reduce_scatter:
    case Primitive::all_to_all: return k * alpha + S * k / (n * B);
    case Primitive::broadcast: return k * alpha + S / B;
    case Primitive::send_recv: return alpha + S / B;
  }
  return 0;
}

inline double collective_cost(Primitive p, double S, const std::vector<int>& group,
                              const ClusterSpec& c, const CorrectionFactors& corr) {
  const auto cs = channels(c, group);
  std::vector<int> g = group;
  sort_unique(g);
  return collective_cost(p, S, static_cast<int>(g.size()), cs.alpha,
                         cs.aggregate * correction(corr, p));
}

// Attaches base durations to every task; every missing compute key is
// collected into one error.
inline void annotate_costs(ExecutionGraph& eg, const ComputeCostTable& table,
                           const ClusterSpec& c, const CorrectionFactors& corr) {
  std::set<std::string> missing;
  for (auto& t : eg.tasks) {
    if (!t.is_comm()) {
      try {
        t.duration = compute_cost(t, table, c.device_type);
      } catch (const Error&) {
        missing.insert(describe_key(t.cost_key, t.extents, c.device_type));
      }
      continue;
    }
    const auto cs = channels(c, t.group);
    t.alpha = cs.alpha;
    t.bandwidth = cs.aggregate * correction(corr, t.primitive);
    t.level = cs.bottleneck;
    t.duration = collective_cost(t.primitive, static_cast<double>(t.bytes),
                                 static_cast<int>(t.devices().size()), t.alpha, t.bandwidth);
  }
  if (!missing.empty())
    throw AggregateError("missing cost entries:",
                         std::vector<std::string>(missing.begin(), missing.end()));
}

}  // namespace stratsim
