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
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "stratsim/cluster.hpp"
#include "stratsim/common.hpp"
#include "stratsim/model.hpp"
#include "stratsim/strategy.hpp"

namespace stratsim {

enum class Primitive { all_reduce, reduce_scatter, all_gather, all_to_all, broadcast, send_recv };

inline std::string to_string(Primitive p) {
  switch (p) {
    case Primitive::all_reduce: return "all-reduce";
    case Primitive::reduce_scatter: return "reduce-scatter";
    case Primitive::all_gather: return "all-gather";
    case Primitive::all_to_all: return "all-to-all";
    case Primitive::broadcast: return "broadcast";
    case Primitive::send_recv: return "send-recv";
  }
  return "?";
}

inline std::optional<Primitive> primitive_from_string(const std::string& s) {
  for (auto p : {Primitive::all_reduce, Primitive::reduce_scatter, Primitive::all_gather,
                 Primitive::all_to_all, Primitive::broadcast, Primitive::send_recv})
    if (to_string(p) == s) return p;
  if (s == "allreduce") return Primitive::all_reduce;
  if (s == "allgather") return Primitive::all_gather;
  if (s == "reducescatter") return Primitive::reduce_scatter;
  if (s == "alltoall") return Primitive::all_to_all;
  if (s == "sendrecv" || s == "p2p") return Primitive::send_recv;
  return std::nullopt;
}

// Half-open element range [lo, hi) along one dim.
struct Interval {
  int64_t lo = 0;
  int64_t hi = 0;
  auto operator<=>(const Interval&) const = default;
};

// Hyper-rectangle, one interval per tensor dim in shape order.
using Box = std::vector<Interval>;

inline int64_t volume(const Box& b) {
  int64_t v = 1;
  for (const auto& i : b) v *= std::max<int64_t>(0, i.hi - i.lo);
  return v;
}

inline bool empty(const Box& b) { return volume(b) == 0; }

inline std::optional<Box> intersect(const Box& a, const Box& b) {
  Box out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out[i] = {std::max(a[i].lo, b[i].lo), std::min(a[i].hi, b[i].hi)};
    if (out[i].lo >= out[i].hi) return std::nullopt;
  }
  return out;
}

inline bool contains(const Box& outer, const Box& inner) {
  for (std::size_t i = 0; i < outer.size(); ++i)
    if (inner[i].lo < outer[i].lo || inner[i].hi > outer[i].hi) return false;
  return true;
}

// a \ b as disjoint boxes.
inline std::vector<Box> subtract(const Box& a, const Box& b) {
  auto cut = intersect(a, b);
  if (!cut) return {a};
  std::vector<Box> out;
  Box rest = a;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (rest[i].lo < (*cut)[i].lo) {
      Box lower = rest;
      lower[i] = {rest[i].lo, (*cut)[i].lo};
      out.push_back(lower);
    }
    if ((*cut)[i].hi < rest[i].hi) {
      Box upper = rest;
      upper[i] = {(*cut)[i].hi, rest[i].hi};
      out.push_back(upper);
    }
    rest[i] = (*cut)[i];
  }
  return out;
}

inline std::vector<Box> subtract(const std::vector<Box>& from, const std::vector<Box>& remove) {
  std::vector<Box> cur = from;
  for (const auto& r : remove) {
    std::vector<Box> next;
    for (const auto& c : cur) {
      auto pieces = subtract(c, r);
      next.insert(next.end(), pieces.begin(), pieces.end());
    }
    cur = std::move(next);
  }
  return cur;
}

inline int64_t total_volume(const std::vector<Box>& boxes) {
  int64_t v = 0;
  for (const auto& b : boxes) v += volume(b);
  return v;
}

inline std::string to_string(const Box& b) {
  std::string s = "[";
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(b[i].lo) + ":" + std::to_string(b[i].hi);
  }
  return s + "]";
}

// One device's piece of a tensor. `contrib` >= 0 marks an unreduced partial
// sum (index of the contribution); -1 is the final value.
struct Holding {
  int device = 0;
  Box box;
  int contrib = -1;
  auto operator<=>(const Holding&) const = default;
};

struct PlacementLayout {
  std::string tensor;
  std::vector<std::string> labels;
  std::vector<int64_t> extents;
  int64_t element_bytes = 4;
  int ncontrib = 1;  // > 1 when holdings are partial sums
  std::vector<Holding> holdings;

  bool partial() const { return ncontrib > 1; }
  Box full() const {
    Box b;
    for (auto e : extents) b.push_back({0, e});
    return b;
  }
  void normalize() {
    std::sort(holdings.begin(), holdings.end());
    holdings.erase(std::unique(holdings.begin(), holdings.end()), holdings.end());
  }
  std::vector<int> devices() const {
    std::vector<int> out;
    for (const auto& h : holdings) out.push_back(h.device);
    sort_unique(out);
    return out;
  }
  std::vector<Box> boxes_on(int device, int contrib = -1) const {
    std::vector<Box> out;
    for (const auto& h : holdings)
      if (h.device == device && h.contrib == contrib) out.push_back(h.box);
    return out;
  }
  int64_t bytes_on(int device) const {
    int64_t v = 0;
    for (const auto& h : holdings)
      if (h.device == device) v += volume(h.box);
    return v * element_bytes;
  }
  // Groups of devices holding identical non-partial pieces.
  std::vector<std::vector<int>> replica_groups() const {
    std::map<Box, std::vector<int>> by_box;
    for (const auto& h : holdings)
      if (h.contrib < 0) by_box[h.box].push_back(h.device);
    std::vector<std::vector<int>> out;
    for (auto& [box, devs] : by_box) {
      sort_unique(devs);
      out.push_back(devs);
    }
    return out;
  }
  bool operator==(const PlacementLayout& o) const {
    return extents == o.extents && ncontrib == o.ncontrib && holdings == o.holdings;
  }
};

namespace detail {

inline Interval part_interval(int64_t extent, int degree, int index,
                              const std::string& label, const std::string& what) {
  if (degree < 1 || extent % degree != 0)
    throw Error(what, "degree " + std::to_string(degree) + " does not divide extent " +
                          std::to_string(extent) + " of dim '" + label + "'");
  int64_t step = extent / degree;
  return {step * index, step * (index + 1)};
}

inline PlacementLayout empty_layout(const TensorSpec& t) {
  PlacementLayout l;
  l.tensor = t.name;
  l.element_bytes = t.element_bytes;
  for (const auto& d : t.shape) {
    l.labels.push_back(d.label);
    l.extents.push_back(d.extent);
  }
  return l;
}

inline Box part_box(const TensorSpec& t, const PartitionSpec& p,
                    const std::map<std::string, int>& index) {
  Box b;
  for (const auto& d : t.shape) {
    auto pi = p.find(d.label);
    int degree = pi == p.end() ? 1 : pi->second;
    auto ii = index.find(d.label);
    int idx = ii == index.end() ? 0 : ii->second;
    b.push_back(part_interval(d.extent, degree, idx, d.label, "tensor '" + t.name + "'"));
  }
  return b;
}

}  // namespace detail

// Device-level placement described by a tensor's memory config.
inline PlacementLayout layout_of(const TensorSpec& t, const MemoryConfig& cfg) {
  auto l = detail::empty_layout(t);
  const auto parts = detail::part_indices(cfg.partition, t.labels());
  if (parts.size() != cfg.map.size())
    throw Error("tensor '" + t.name + "'", "map size does not match partition");
  for (std::size_t i = 0; i < parts.size(); ++i) {
    Box b = detail::part_box(t, cfg.partition, parts[i]);
    for (int d : cfg.map[i]) l.holdings.push_back({d, b, -1});
  }
  l.normalize();
  return l;
}

// Layout an operator produces for one of its outputs. Parts split along a
// reduction dim hold partial sums.
inline PlacementLayout implied_output_layout(const TensorSpec& t, const OperatorSpec& op,
                                             const ComputationConfig& cfg) {
  auto l = detail::empty_layout(t);
  std::vector<std::string> red;
  std::vector<int> red_deg;
  for (const auto& label : op.parallel_dims) {
    auto it = cfg.partition.find(label);
    if (it == cfg.partition.end() || t.has_dim(label) || !op.is_reduction(label)) continue;
    red.push_back(label);
    red_deg.push_back(it->second);
  }
  int nc = 1;
  for (int d : red_deg) nc *= d;
  l.ncontrib = nc;
  const auto parts = detail::part_indices(cfg.partition, op.parallel_dims);
  std::map<std::pair<int, Box>, int> seen;
  for (std::size_t i = 0; i < parts.size() && i < cfg.map.size(); ++i) {
    Box b = detail::part_box(t, cfg.partition, parts[i]);
    int c = -1;
    if (nc > 1) {
      c = 0;
      for (std::size_t k = 0; k < red.size(); ++k) c = c * red_deg[k] + parts[i].at(red[k]);
    }
    for (int d : cfg.map[i]) {
      auto key = std::make_pair(d, b);
      auto it = seen.find(key);
      if (it != seen.end() && it->second != c)
        throw Error("operator '" + op.name + "'",
                    "device " + std::to_string(d) +
                        " would hold two partial contributions of one region of '" +
                        t.name + "'");
      seen[key] = c;
      l.holdings.push_back({d, b, c});
    }
  }
  l.normalize();
  return l;
}

// Layout an operator needs for one of its inputs: op dims the tensor lacks
// turn into replicas.
inline PlacementLayout implied_input_layout(const TensorSpec& t, const OperatorSpec& op,
                                            const ComputationConfig& cfg) {
  auto l = detail::empty_layout(t);
  const auto parts = detail::part_indices(cfg.partition, op.parallel_dims);
  for (std::size_t i = 0; i < parts.size() && i < cfg.map.size(); ++i) {
    Box b = detail::part_box(t, cfg.partition, parts[i]);
    for (int d : cfg.map[i]) l.holdings.push_back({d, b, -1});
  }
  l.normalize();
  return l;
}

struct CommStep {
  Primitive primitive = Primitive::send_recv;
  std::vector<int> group;                   // send-recv: {source, destination}
  std::vector<Box> region;                  // data the step moves or reduces
  std::vector<std::vector<Box>> per_device;  // rs/a2a: target pieces; ag: own pieces
  int value = -1;                           // copy steps: contribution moved
  int64_t bytes = 0;                        // S in the cost formulas
  int stage = 1;                            // 0 reduce, 1 redistribute

  // Bytes of the step's result buffer on `device`.
  int64_t output_elements(int device) const {
    auto it = std::find(group.begin(), group.end(), device);
    if (it == group.end()) return 0;
    std::size_t i = static_cast<std::size_t>(it - group.begin());
    switch (primitive) {
      case Primitive::reduce_scatter:
      case Primitive::all_to_all:
        return total_volume(per_device[i]);
      case Primitive::send_recv:
        return i == 1 ? total_volume(region) : 0;
      default:
        return total_volume(region);
    }
  }
};

struct CommPlan {
  std::string tensor;
  int64_t element_bytes = 4;
  std::vector<CommStep> steps;

  bool empty() const { return steps.empty(); }
};

namespace detail {

inline std::vector<Box> merge_sorted(std::vector<Box> boxes) {
  std::sort(boxes.begin(), boxes.end());
  boxes.erase(std::unique(boxes.begin(), boxes.end()), boxes.end());
  return boxes;
}

inline bool pairwise_disjoint(const std::vector<Box>& boxes) {
  for (std::size_t i = 0; i < boxes.size(); ++i)
    for (std::size_t j = i + 1; j < boxes.size(); ++j)
      if (intersect(boxes[i], boxes[j])) return false;
  return true;
}

inline bool covers(const std::vector<Box>& have, const std::vector<Box>& want) {
  return subtract(want, have).empty();
}

// What each device still lacks of `dst`, by contribution tag.
inline std::map<int, std::map<int, std::vector<Box>>> needs(const PlacementLayout& have,
                                                            const PlacementLayout& dst) {
  std::map<int, std::map<int, std::vector<Box>>> out;
  for (int d : dst.devices()) {
    std::set<int> tags;
    for (const auto& h : dst.holdings)
      if (h.device == d) tags.insert(h.contrib);
    for (int tag : tags) {
      auto missing = subtract(dst.boxes_on(d, tag), have.boxes_on(d, tag));
      if (!missing.empty()) out[d][tag] = missing;
    }
  }
  return out;
}

inline std::map<int, std::vector<Box>> boxes_by_device(const PlacementLayout& l, int tag) {
  std::map<int, std::vector<Box>> out;
  for (const auto& h : l.holdings)
    if (h.contrib == tag) out[h.device].push_back(h.box);
  for (auto& [d, boxes] : out) boxes = merge_sorted(boxes);
  return out;
}

// Step A: sum partial contributions box by box. Lane k of a box joins the
// k-th holder of every contribution.
inline PlacementLayout reduce_partials(const PlacementLayout& src, const PlacementLayout& dst,
                                       CommPlan& plan) {
  PlacementLayout mid = src;
  mid.ncontrib = 1;
  mid.holdings.clear();
  std::map<Box, std::vector<std::vector<int>>> holders;
  for (const auto& h : src.holdings) {
    auto& per = holders[h.box];
    per.resize(src.ncontrib);
    per[h.contrib].push_back(h.device);
  }
  const auto dst_boxes = boxes_by_device(dst, -1);
  for (auto& [box, per] : holders) {
    std::size_t lanes = std::numeric_limits<std::size_t>::max();
    for (auto& devs : per) {
      sort_unique(devs);
      lanes = std::min(lanes, devs.size());
    }
    if (lanes == 0)
      throw Error("tensor '" + src.tensor + "'",
                  "region " + to_string(box) + " is missing a partial contribution");
    bool wanted = false;
    for (const auto& [d, boxes] : dst_boxes)
      for (const auto& b : boxes)
        if (intersect(b, box)) wanted = true;
    if (!wanted) continue;
    std::vector<std::vector<int>> lane_groups(lanes);
    std::vector<bool> lane_needed(lanes, false);
    for (std::size_t k = 0; k < lanes; ++k) {
      for (const auto& devs : per) lane_groups[k].push_back(devs[k]);
      sort_unique(lane_groups[k]);
      for (int d : lane_groups[k]) {
        auto it = dst_boxes.find(d);
        if (it == dst_boxes.end()) continue;
        for (const auto& b : it->second)
          if (intersect(b, box)) lane_needed[k] = true;
      }
    }
    if (std::none_of(lane_needed.begin(), lane_needed.end(), [](bool b) { return b; }))
      lane_needed[0] = true;
    for (std::size_t k = 0; k < lanes; ++k) {
      if (!lane_needed[k]) continue;
      const auto& group = lane_groups[k];
      // Reduce-scatter when the members' wanted pieces tile the box evenly.
      std::vector<std::vector<Box>> pieces;
      bool scatter = true;
      for (int d : group) {
        std::vector<Box> mine;
        auto it = dst_boxes.find(d);
        if (it != dst_boxes.end())
          for (const auto& b : it->second)
            if (auto c = intersect(b, box)) mine.push_back(*c);
        mine = merge_sorted(mine);
        if (mine.size() != 1) scatter = false;
        pieces.push_back(mine);
      }
      if (scatter) {
        std::vector<Box> flat;
        for (const auto& p : pieces) flat.push_back(p.front());
        scatter = pairwise_disjoint(flat) && total_volume(flat) == volume(box);
        for (const auto& p : flat)
          if (volume(p) != volume(flat.front())) scatter = false;
      }
      CommStep s;
      s.group = group;
      s.region = {box};
      s.bytes = volume(box) * src.element_bytes;
      s.stage = 0;
      if (scatter) {
        s.primitive = Primitive::reduce_scatter;
        s.per_device = pieces;
        for (std::size_t i = 0; i < group.size(); ++i)
          mid.holdings.push_back({group[i], pieces[i].front(), -1});
      } else {
        s.primitive = Primitive::all_reduce;
        for (int d : group) mid.holdings.push_back({d, box, -1});
      }
      plan.steps.push_back(std::move(s));
    }
  }
  mid.normalize();
  return mid;
}

inline bool all_full(const PlacementLayout& l) {
  const Box f = l.full();
  for (const auto& h : l.holdings)
    if (h.box != f) return false;
  return true;
}

// Pattern: lanes of devices that want the same data and hold disjoint pieces.
inline bool try_all_gather(const PlacementLayout& mid, const PlacementLayout& dst,
                           const std::map<int, std::map<int, std::vector<Box>>>& need,
                           std::vector<CommStep>& out) {
  const auto have = boxes_by_device(mid, -1);
  const auto want = boxes_by_device(dst, -1);
  std::map<std::vector<Box>, std::vector<int>> classes;
  for (const auto& [d, boxes] : want) classes[boxes].push_back(d);
  std::vector<CommStep> steps;
  for (const auto& [required, members] : classes) {
    bool needy = false;
    for (int d : members) needy = needy || need.count(d);
    if (!needy) continue;
    std::map<std::vector<Box>, std::vector<int>> by_src;
    for (int d : members) {
      auto it = have.find(d);
      if (it == have.end()) return false;
      by_src[it->second].push_back(d);
    }
    if (by_src.size() < 2) return false;
    std::vector<Box> pieces;
    std::size_t lanes = std::numeric_limits<std::size_t>::max();
    for (const auto& [boxes, devs] : by_src) {
      pieces.insert(pieces.end(), boxes.begin(), boxes.end());
      lanes = std::min(lanes, devs.size());
    }
    if (!pairwise_disjoint(pieces) || !covers(pieces, required)) return false;
    std::set<int> in_lane;
    for (std::size_t k = 0; k < lanes; ++k) {
      CommStep s;
      s.primitive = Primitive::all_gather;
      bool lane_needy = false;
      std::vector<std::pair<int, std::vector<Box>>> members_k;
      for (const auto& [boxes, devs] : by_src) {
        members_k.emplace_back(devs[k], boxes);
        in_lane.insert(devs[k]);
        lane_needy = lane_needy || need.count(devs[k]);
      }
      if (!lane_needy) continue;
      std::sort(members_k.begin(), members_k.end());
      for (const auto& [d, boxes] : members_k) {
        s.group.push_back(d);
        s.per_device.push_back(boxes);
      }
      s.region = merge_sorted(pieces);
      s.bytes = total_volume(pieces) * mid.element_bytes;
      steps.push_back(std::move(s));
    }
    for (int d : members)
      if (need.count(d) && !in_lane.count(d)) return false;
  }
  out.insert(out.end(), steps.begin(), steps.end());
  return true;
}

inline int distinct_boxes(const PlacementLayout& l) {
  std::set<Box> s;
  for (const auto& h : l.holdings) s.insert(h.box);
  return static_cast<int>(s.size());
}

}  // namespace detail

// Communication turning `src` into `dst`: reduce partial sums first, then
// redistribute with the first matching pattern (all-gather, all-to-all,
// broadcast), else point-to-point copies of exactly the missing pieces.
inline CommPlan infer_transform(const PlacementLayout& src_in, const PlacementLayout& dst_in) {
  PlacementLayout src = src_in, dst = dst_in;
  src.normalize();
  dst.normalize();
  CommPlan plan;
  plan.tensor = src.tensor;
  plan.element_bytes = src.element_bytes;
  const std::string where = "tensor '" + src.tensor + "'";
  if (src.extents != dst.extents) throw Error(where, "source and destination shapes differ");
  if (src == dst) return plan;
  if (dst.partial() && dst.ncontrib != src.ncontrib)
    throw Error(where, "destination is partial but does not match the source's contributions");

  PlacementLayout mid = src;
  if (src.partial() && !dst.partial()) mid = detail::reduce_partials(src, dst, plan);

  auto need = detail::needs(mid, dst);
  if (need.empty()) return plan;

  const bool plain = !mid.partial() && !dst.partial();
  const auto src_devs = mid.devices();
  const auto dst_devs = dst.devices();
  std::vector<CommStep> steps;
  if (plain && src_devs == dst_devs && detail::try_all_gather(mid, dst, need, steps)) {
    plan.steps.insert(plan.steps.end(), steps.begin(), steps.end());
    return plan;
  }
  if (plain && src_devs == dst_devs && detail::distinct_boxes(mid) >= 2 &&
      detail::distinct_boxes(dst) >= 2) {
    std::vector<Box> held;
    for (const auto& h : mid.holdings) held.push_back(h.box);
    held = detail::merge_sorted(held);
    bool ok = true;
    for (const auto& [d, tags] : need)
      for (const auto& [tag, boxes] : tags) ok = ok && detail::covers(held, boxes);
    if (ok) {
      CommStep s;
      s.primitive = Primitive::all_to_all;
      s.group = dst_devs;
      for (int d : dst_devs) s.per_device.push_back(detail::merge_sorted(dst.boxes_on(d)));
      std::vector<Box> targets;
      for (const auto& p : s.per_device) targets.insert(targets.end(), p.begin(), p.end());
      s.region = detail::merge_sorted(targets);
      std::vector<Box> unique_src = held;
      for (std::size_t i = 0; i < unique_src.size(); ++i)
        for (std::size_t j = 0; j < i; ++j)
          if (intersect(unique_src[i], unique_src[j])) ok = false;
      s.bytes = (ok ? total_volume(held) : volume(mid.full())) * mid.element_bytes;
      plan.steps.push_back(std::move(s));
      return plan;
    }
  }
  if (plain && detail::all_full(mid) && detail::all_full(dst) &&
      std::includes(dst_devs.begin(), dst_devs.end(), src_devs.begin(), src_devs.end())) {
    CommStep s;
    s.primitive = Primitive::broadcast;
    s.group.push_back(src_devs.front());
    for (const auto& [d, tags] : need) s.group.push_back(d);
    s.region = {mid.full()};
    s.bytes = volume(mid.full()) * mid.element_bytes;
    plan.steps.push_back(std::move(s));
    return plan;
  }
  // Point-to-point: each missing piece comes from the lowest-id holder.
  for (const auto& [d, tags] : need) {
    for (const auto& [tag, boxes] : tags) {
      std::vector<Box> missing = boxes;
      const auto holders = detail::boxes_by_device(mid, tag);
      for (const auto& [s_dev, held] : holders) {
        if (s_dev == d || missing.empty()) continue;
        std::vector<Box> got;
        for (const auto& m : missing)
          for (const auto& h : held)
            if (auto c = intersect(m, h)) got.push_back(*c);
        if (got.empty()) continue;
        // Pieces held by several boxes of one source are counted once.
        std::vector<Box> unique_got;
        for (const auto& g : got) {
          auto rest = subtract(std::vector<Box>{g}, unique_got);
          unique_got.insert(unique_got.end(), rest.begin(), rest.end());
        }
        CommStep s;
        s.primitive = Primitive::send_recv;
        s.group = {s_dev, d};
        s.region = unique_got;
        s.value = tag;
        s.bytes = total_volume(unique_got) * mid.element_bytes;
        plan.steps.push_back(std::move(s));
        missing = subtract(missing, unique_got);
      }
      if (!missing.empty())
        throw Error(where, "destination not coverable: device " + std::to_string(d) +
                               " needs " + to_string(missing.front()) +
                               " which no device holds");
    }
  }
  return plan;
}

// Independent check of a plan: replays it over value-tracked cells (count of
// each contribution summed into a cell) and requires every destination cell
// to hold exactly the value it asks for.
inline bool verify_plan(const PlacementLayout& src, const PlacementLayout& dst,
                        const CommPlan& plan, std::string* why = nullptr) {
  auto fail = [&](const std::string& m) {
    if (why) *why = m;
    return false;
  };
  if (src.extents != dst.extents) return fail("shape mismatch");
  const std::size_t nd = src.extents.size();
  const int nc = std::max(src.ncontrib, dst.ncontrib);
  // Coordinate compression over every boundary mentioned anywhere.
  std::vector<std::vector<int64_t>> cuts(nd);
  auto add_box = [&](const Box& b) {
    for (std::size_t i = 0; i < nd; ++i) {
      cuts[i].push_back(b[i].lo);
      cuts[i].push_back(b[i].hi);
    }
  };
  for (std::size_t i = 0; i < nd; ++i) cuts[i] = {0, src.extents[i]};
  for (const auto& h : src.holdings) add_box(h.box);
  for (const auto& h : dst.holdings) add_box(h.box);
  for (const auto& s : plan.steps) {
    for (const auto& b : s.region) add_box(b);
    for (const auto& p : s.per_device)
      for (const auto& b : p) add_box(b);
  }
  for (auto& c : cuts) {
    std::sort(c.begin(), c.end());
    c.erase(std::unique(c.begin(), c.end()), c.end());
  }
  using Cell = std::vector<int>;
  using Value = std::vector<int>;
  auto cells_of = [&](const Box& b) {
    std::vector<int> radix, base;
    for (std::size_t i = 0; i < nd; ++i) {
      auto lo = std::lower_bound(cuts[i].begin(), cuts[i].end(), b[i].lo) - cuts[i].begin();
      auto hi = std::lower_bound(cuts[i].begin(), cuts[i].end(), b[i].hi) - cuts[i].begin();
      base.push_back(static_cast<int>(lo));
      radix.push_back(static_cast<int>(hi - lo));
    }
    std::vector<Cell> out;
    for (const auto& idx : enumerate_grid(radix)) {
      Cell c(nd);
      for (std::size_t i = 0; i < nd; ++i) c[i] = base[i] + idx[i];
      out.push_back(c);
    }
    return out;
  };
  auto tag_value = [&](int tag) {
    Value v(nc, tag < 0 ? 1 : 0);
    if (tag >= 0) v[tag] = 1;
    return v;
  };
  std::map<int, std::map<Cell, std::set<Value>>> state;
  for (const auto& h : src.holdings)
    for (const auto& c : cells_of(h.box)) state[h.device][c].insert(tag_value(src.partial() ? h.contrib : -1));

  const Value full = tag_value(-1);
  auto partial_input = [&](int d, const Cell& c, Value& out) {
    const auto& vals = state[d][c];
    std::vector<Value> partials;
    for (const auto& v : vals)
      if (v != full) partials.push_back(v);
    if (partials.size() != 1) return false;
    out = partials.front();
    return true;
  };
  for (std::size_t si = 0; si < plan.steps.size(); ++si) {
    const auto& s = plan.steps[si];
    const std::string at = "step " + std::to_string(si) + " (" + to_string(s.primitive) + ")";
    std::set<int> uniq(s.group.begin(), s.group.end());
    if (uniq.size() != s.group.size() || s.group.size() < 2) return fail(at + ": bad group");
    switch (s.primitive) {
      case Primitive::all_reduce:
      case Primitive::reduce_scatter: {
        if (s.primitive == Primitive::reduce_scatter && s.per_device.size() != s.group.size())
          return fail(at + ": missing pieces");
        std::map<Cell, Value> sum;
        for (const auto& b : s.region)
          for (const auto& c : cells_of(b)) {
            Value acc(nc, 0);
            for (int d : s.group) {
              Value v;
              if (!partial_input(d, c, v)) return fail(at + ": member lacks a partial input");
              for (int k = 0; k < nc; ++k) acc[k] += v[k];
            }
            sum[c] = acc;
          }
        for (std::size_t i = 0; i < s.group.size(); ++i) {
          std::vector<Box> targets =
              s.primitive == Primitive::all_reduce ? s.region : s.per_device[i];
          for (const auto& b : targets)
            for (const auto& c : cells_of(b)) {
              auto it = sum.find(c);
              if (it == sum.end()) return fail(at + ": piece outside region");
              state[s.group[i]][c].insert(it->second);
            }
        }
        break;
      }
      case Primitive::all_gather: {
        const Value v = tag_value(s.value);
        std::set<Cell> have;
        for (const auto& b : s.region)
          for (const auto& c : cells_of(b))
            for (int d : s.group)
              if (state[d][c].count(v)) have.insert(c);
        for (int d : s.group)
          for (const auto& c : have) state[d][c].insert(v);
        break;
      }
      case Primitive::all_to_all: {
        if (s.per_device.size() != s.group.size()) return fail(at + ": missing targets");
        const Value v = tag_value(s.value);
        std::vector<std::pair<int, Cell>> adds;
        for (std::size_t i = 0; i < s.group.size(); ++i)
          for (const auto& b : s.per_device[i])
            for (const auto& c : cells_of(b))
              for (int d : s.group)
                if (state[d][c].count(v)) {
                  adds.emplace_back(s.group[i], c);
                  break;
                }
        for (const auto& [d, c] : adds) state[d][c].insert(v);
        break;
      }
      case Primitive::broadcast:
      case Primitive::send_recv: {
        if (s.primitive == Primitive::send_recv && s.group.size() != 2)
          return fail(at + ": send-recv needs two devices");
        const Value v = tag_value(s.value);
        for (const auto& b : s.region)
          for (const auto& c : cells_of(b)) {
            if (!state[s.group[0]][c].count(v)) return fail(at + ": source lacks the data");
            for (std::size_t i = 1; i < s.group.size(); ++i) state[s.group[i]][c].insert(v);
          }
        break;
      }
    }
  }
  for (const auto& h : dst.holdings) {
    const Value want = tag_value(dst.partial() ? h.contrib : -1);
    for (const auto& c : cells_of(h.box))
      if (!state[h.device][c].count(want))
        return fail("device " + std::to_string(h.device) + " misses " + to_string(h.box));
  }
  return true;
}

// Ring-algorithm bytes each member puts on the wire for one step.
inline double per_device_volume(Primitive p, double S, int n) {
  switch (p) {
    case Primitive::all_reduce: return 2.0 * S * (n - 1) / n;
    case Primitive::reduce_scatter:
    case Primitive::all_gather:
    case Primitive::all_to_all: return S * (n - 1) / n;
    case Primitive::broadcast:
    case Primitive::send_recv: return S;
  }
  return 0;
}

// Wire bytes per hierarchy level: each step's per-member volume counted once
// on every level its ring crosses.
inline std::map<LinkLevel, double> plan_volume(const CommPlan& plan, const ClusterSpec& c) {
  std::map<LinkLevel, double> out;
  for (const auto& s : plan.steps) {
    const int n = static_cast<int>(s.group.size());
    if (n < 2) continue;
    const double v = per_device_volume(s.primitive, static_cast<double>(s.bytes), n);
    std::set<LinkLevel> levels;
    if (s.primitive == Primitive::send_recv) {
      levels.insert(lowest_common_level(c, s.group[0], s.group[1]));
    } else {
      std::vector<int> ring = s.group;
      std::sort(ring.begin(), ring.end());
      for (int i = 0; i < n; ++i)
        levels.insert(lowest_common_level(c, ring[i], ring[(i + 1) % n]));
    }
    for (auto l : levels) out[l] += v;
  }
  return out;
}

inline std::string describe(const CommPlan& plan) {
  if (plan.empty()) return "no communication needed\n";
  std::string out;
  for (std::size_t i = 0; i < plan.steps.size(); ++i) {
    const auto& s = plan.steps[i];
    out += std::to_string(i) + ": " + to_string(s.primitive) + " group {" +
           join_ints(s.group) + "} bytes " + std::to_string(s.bytes);
    if (s.value >= 0) out += " contribution " + std::to_string(s.value);
    out += " region";
    for (const auto& b : s.region) out += " " + to_string(b);
    out += "\n";
  }
  return out;
}

inline json plan_to_json(const CommPlan& plan) {
  json steps = json::array();
  for (const auto& s : plan.steps) {
    json j;
    j["primitive"] = to_string(s.primitive);
    j["group"] = s.group;
    j["bytes"] = s.bytes;
    j["stage"] = s.stage == 0 ? "reduce" : "redistribute";
    json region = json::array();
    for (const auto& b : s.region) region.push_back(to_string(b));
    j["region"] = region;
    if (s.value >= 0) j["contribution"] = s.value;
    steps.push_back(j);
  }
  return {{"tensor", plan.tensor}, {"steps", steps}};
}

inline json layout_to_json(const PlacementLayout& l) {
  json hs = json::array();
  for (const auto& h : l.holdings) {
    json j = {{"device", h.device}, {"box", to_string(h.box)}};
    if (h.contrib >= 0) j["contribution"] = h.contrib;
    hs.push_back(j);
  }
  return {{"tensor", l.tensor}, {"partial", l.partial()}, {"holdings", hs}};
}

}  // namespace stratsim
