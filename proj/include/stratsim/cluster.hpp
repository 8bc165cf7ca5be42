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

#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "stratsim/common.hpp"

namespace stratsim {

// Physical link levels, top-down.
enum class LinkLevel { nic = 0, inter_socket = 1, intra_fabric = 2, device_port = 3 };

inline std::string to_string(LinkLevel l) {
  switch (l) {
    case LinkLevel::nic: return "nic";
    case LinkLevel::inter_socket: return "inter-socket";
    case LinkLevel::intra_fabric: return "intra-node";
    case LinkLevel::device_port: return "device-port";
  }
  return "?";
}

enum class IntraLinkClass { pcie, nvlink };

struct LinkSpec {
  double bandwidth = 0;  // bytes/s
  double alpha = 0;      // s
};

inline constexpr double kDefaultNicAlpha = 5e-6;
inline constexpr double kDefaultIntraAlpha = 1e-6;
inline constexpr double kDefaultSocketAlpha = 1e-6;

struct ClusterSpec {
  std::string name;
  int n_nodes = 1;
  int devices_per_node = 1;
  std::string device_type = "gpu";
  int64_t device_memory = 0;  // bytes
  IntraLinkClass intra_class = IntraLinkClass::pcie;
  LinkSpec intra{1e10, kDefaultIntraAlpha};
  std::optional<LinkSpec> inter_socket;
  std::optional<LinkSpec> nic;
  int sockets_per_node = 1;
  std::vector<int> socket_assignment;  // local device index -> socket
  int nic_links = 1;
  int inter_socket_links = 1;
  int intra_links = 1;

  int num_devices() const { return n_nodes * devices_per_node; }
  bool has_device(int d) const { return d >= 0 && d < num_devices(); }
  int node_of(int d) const { return d / devices_per_node; }
  int socket_of(int d) const {
    int local = d % devices_per_node;
    if (!socket_assignment.empty()) return socket_assignment[local];
    int per_socket = (devices_per_node + sockets_per_node - 1) / sockets_per_node;
    return local / per_socket;
  }

  // Bandwidth of one instance of the level (all parallel links included).
  double level_capacity(LinkLevel l) const {
    switch (l) {
      case LinkLevel::nic: return nic ? nic->bandwidth * nic_links : 0.0;
      case LinkLevel::inter_socket:
        return inter_socket ? inter_socket->bandwidth * inter_socket_links : 0.0;
      case LinkLevel::intra_fabric: return intra.bandwidth * intra_links;
      case LinkLevel::device_port: return intra.bandwidth;
    }
    return 0.0;
  }
  int level_links(LinkLevel l) const {
    switch (l) {
      case LinkLevel::nic: return nic_links;
      case LinkLevel::inter_socket: return inter_socket_links;
      case LinkLevel::intra_fabric: return intra_links;
      case LinkLevel::device_port: return 1;
    }
    return 1;
  }
  double level_alpha(LinkLevel l) const {
    switch (l) {
      case LinkLevel::nic: return nic ? nic->alpha : kDefaultNicAlpha;
      case LinkLevel::inter_socket:
        return inter_socket ? inter_socket->alpha : kDefaultSocketAlpha;
      case LinkLevel::intra_fabric:
      case LinkLevel::device_port: return intra.alpha;
    }
    return 0.0;
  }
};

struct LinkHierarchy {
  std::vector<LinkLevel> levels;  // top-down
};

inline LinkHierarchy link_hierarchy(const ClusterSpec& c) {
  LinkHierarchy h;
  if (c.n_nodes > 1) h.levels.push_back(LinkLevel::nic);
  if (c.sockets_per_node > 1) h.levels.push_back(LinkLevel::inter_socket);
  h.levels.push_back(LinkLevel::intra_fabric);
  h.levels.push_back(LinkLevel::device_port);
  return h;
}

inline void validate_cluster(const ClusterSpec& c) {
  if (c.n_nodes < 1) throw Error("n_nodes", "must be >= 1");
  if (c.devices_per_node < 1) throw Error("devices_per_node", "must be >= 1");
  if (c.device_memory <= 0) throw Error("device_memory", "must be > 0");
  if (!(c.intra.bandwidth > 0))
    throw Error("intra_node_link/bandwidth", "must be > 0");
  if (c.intra.alpha < 0) throw Error("intra_node_link/alpha", "must be >= 0");
  if (c.n_nodes > 1 && (!c.nic || !(c.nic->bandwidth > 0)))
    throw Error("nic/bandwidth", "must be > 0 when n_nodes > 1");
  if (c.nic && c.nic->alpha < 0) throw Error("nic/alpha", "must be >= 0");
  if (c.sockets_per_node < 1) throw Error("sockets_per_node", "must be >= 1");
  if (c.sockets_per_node > 1 &&
      (!c.inter_socket || !(c.inter_socket->bandwidth > 0)))
    throw Error("inter_socket_link/bandwidth",
                "must be > 0 when sockets_per_node > 1");
  if (!c.socket_assignment.empty()) {
    if (static_cast<int>(c.socket_assignment.size()) != c.devices_per_node)
      throw Error("socket_assignment", "needs one entry per device in a node");
    for (int s : c.socket_assignment)
      if (s < 0 || s >= c.sockets_per_node)
        throw Error("socket_assignment", "socket id out of range");
  }
  if (c.nic_links < 1 || c.inter_socket_links < 1 || c.intra_links < 1)
    throw Error("links_per_level", "link counts must be >= 1");
}

inline ClusterSpec parse_cluster(const json& doc) {
  ClusterSpec c;
  c.name = optional_field<std::string>(doc, "name", "cluster", "");
  c.n_nodes = require_field<int>(doc, "n_nodes", "");
  c.devices_per_node = require_field<int>(doc, "devices_per_node", "");
  c.device_type = optional_field<std::string>(doc, "device_type", "gpu", "");
  c.device_memory = require_field<int64_t>(doc, "device_memory", "");
  if (!doc.contains("intra_node_link"))
    throw Error("", "missing field 'intra_node_link'");
  const auto& intra = doc.at("intra_node_link");
  auto cls = optional_field<std::string>(intra, "class", "pcie", "intra_node_link");
  if (cls == "pcie") c.intra_class = IntraLinkClass::pcie;
  else if (cls == "nvlink") c.intra_class = IntraLinkClass::nvlink;
  else throw Error("intra_node_link/class", "unknown link class '" + cls + "'");
  c.intra.bandwidth = require_field<double>(intra, "bandwidth", "intra_node_link");
  c.intra.alpha = optional_field<double>(intra, "alpha", kDefaultIntraAlpha,
                                         "intra_node_link");
  if (doc.contains("inter_socket_link") && !doc.at("inter_socket_link").is_null()) {
    const auto& s = doc.at("inter_socket_link");
    c.inter_socket = LinkSpec{
        require_field<double>(s, "bandwidth", "inter_socket_link"),
        optional_field<double>(s, "alpha", kDefaultSocketAlpha, "inter_socket_link")};
  }
  if (doc.contains("nic") && !doc.at("nic").is_null()) {
    const auto& n = doc.at("nic");
    c.nic = LinkSpec{require_field<double>(n, "bandwidth", "nic"),
                     optional_field<double>(n, "alpha", kDefaultNicAlpha, "nic")};
  }
  c.sockets_per_node = optional_field<int>(doc, "sockets_per_node", 1, "");
  c.socket_assignment =
      optional_field<std::vector<int>>(doc, "socket_assignment", {}, "");
  if (doc.contains("links_per_level")) {
    const auto& l = doc.at("links_per_level");
    c.nic_links = optional_field<int>(l, "nic", 1, "links_per_level");
    c.inter_socket_links = optional_field<int>(l, "inter_socket", 1, "links_per_level");
    c.intra_links = optional_field<int>(l, "intra", 1, "links_per_level");
  }
  validate_cluster(c);
  return c;
}

inline ClusterSpec load_cluster(const std::string& path) {
  try {
    return parse_cluster(read_json_file(path));
  } catch (const Error& e) {
    if (e.where().rfind(path, 0) == 0) throw;
    throw Error(path + ":" + e.where(), e.message());
  }
}

inline json cluster_to_json(const ClusterSpec& c) {
  json j;
  j["name"] = c.name;
  j["n_nodes"] = c.n_nodes;
  j["devices_per_node"] = c.devices_per_node;
  j["device_type"] = c.device_type;
  j["device_memory"] = c.device_memory;
  j["intra_node_link"] = {
      {"class", c.intra_class == IntraLinkClass::pcie ? "pcie" : "nvlink"},
      {"bandwidth", c.intra.bandwidth},
      {"alpha", c.intra.alpha}};
  if (c.inter_socket)
    j["inter_socket_link"] = {{"bandwidth", c.inter_socket->bandwidth},
                              {"alpha", c.inter_socket->alpha}};
  if (c.nic) j["nic"] = {{"bandwidth", c.nic->bandwidth}, {"alpha", c.nic->alpha}};
  j["sockets_per_node"] = c.sockets_per_node;
  if (!c.socket_assignment.empty()) j["socket_assignment"] = c.socket_assignment;
  j["links_per_level"] = {{"nic", c.nic_links},
                          {"inter_socket", c.inter_socket_links},
                          {"intra", c.intra_links}};
  return j;
}

inline LinkLevel lowest_common_level(const ClusterSpec& c, int d1, int d2) {
  if (!c.has_device(d1) || !c.has_device(d2))
    throw Error("device " + std::to_string(c.has_device(d1) ? d2 : d1),
                "not in cluster");
  if (d1 == d2) return LinkLevel::device_port;
  if (c.node_of(d1) != c.node_of(d2)) return LinkLevel::nic;
  if (c.sockets_per_node > 1 && c.socket_of(d1) != c.socket_of(d2))
    return LinkLevel::inter_socket;
  return LinkLevel::intra_fabric;
}

// One physical link (or bundle of parallel links) that traffic can share.
struct LinkInstance {
  LinkLevel level = LinkLevel::device_port;
  int node = 0;
  int index = 0;  // socket for fabric, device for ports, 0 otherwise

  auto operator<=>(const LinkInstance&) const = default;
};

inline std::string to_string(const LinkInstance& l) {
  return to_string(l.level) + "[" + std::to_string(l.node) + ":" +
         std::to_string(l.index) + "]";
}

// Levels a collective over `group` puts traffic on.
inline std::vector<LinkLevel> crossed_levels(const ClusterSpec& c,
                                             const std::vector<int>& group) {
  std::map<int, std::set<int>> by_node;
  std::map<int, std::set<int>> sockets;
  for (int d : group) {
    by_node[c.node_of(d)].insert(d);
    sockets[c.node_of(d)].insert(c.socket_of(d));
  }
  std::vector<LinkLevel> out;
  if (by_node.size() > 1) out.push_back(LinkLevel::nic);
  bool socket_cross = false, fabric = false;
  for (const auto& [node, devs] : by_node) {
    if (devs.size() >= 2) fabric = true;
    if (sockets[node].size() >= 2) socket_cross = true;
  }
  if (socket_cross) out.push_back(LinkLevel::inter_socket);
  if (fabric) out.push_back(LinkLevel::intra_fabric);
  out.push_back(LinkLevel::device_port);
  return out;
}

// Shareable link instances crossed by `group`. NVLink fabrics are
// point-to-point, so only their device ports are shared.
inline std::vector<LinkInstance> crossed_links(const ClusterSpec& c,
                                               const std::vector<int>& group) {
  std::map<int, std::set<int>> by_node;
  for (int d : group) by_node[c.node_of(d)].insert(d);
  std::vector<LinkInstance> out;
  if (by_node.size() > 1)
    for (const auto& [node, devs] : by_node)
      out.push_back({LinkLevel::nic, node, 0});
  for (const auto& [node, devs] : by_node) {
    std::set<int> sockets;
    for (int d : devs) sockets.insert(c.socket_of(d));
    if (sockets.size() >= 2) out.push_back({LinkLevel::inter_socket, node, 0});
    if (devs.size() >= 2 && c.intra_class == IntraLinkClass::pcie)
      for (int s : sockets) out.push_back({LinkLevel::intra_fabric, node, s});
  }
  for (int d : group) out.push_back({LinkLevel::device_port, c.node_of(d), d});
  sort_unique(out);
  return out;
}

struct Channel {
  LinkLevel bottleneck = LinkLevel::device_port;
  double bandwidth = 0;
};

struct ChannelSet {
  std::vector<Channel> channels;
  double aggregate = 0;                         // bytes/s
  LinkLevel bottleneck = LinkLevel::device_port;  // level limiting bandwidth
  LinkLevel highest = LinkLevel::device_port;     // topmost level crossed
  double alpha = 0;                             // latency of `highest`
};

inline ChannelSet channels(const ClusterSpec& c, const std::vector<int>& group) {
  std::vector<int> g = group;
  sort_unique(g);
  if (g.size() < 2)
    throw Error("group {" + join_ints(g) + "}",
                "channel detection needs at least two devices");
  for (int d : g)
    if (!c.has_device(d)) throw Error("device " + std::to_string(d), "not in cluster");
  ChannelSet cs;
  auto levels = crossed_levels(c, g);
  cs.highest = levels.front();
  cs.alpha = c.level_alpha(cs.highest);
  cs.aggregate = std::numeric_limits<double>::infinity();
  for (LinkLevel l : levels) {
    double cap = c.level_capacity(l);
    if (cap < cs.aggregate) {
      cs.aggregate = cap;
      cs.bottleneck = l;
    }
  }
  int n = c.level_links(cs.bottleneck);
  for (int i = 0; i < n; ++i)
    cs.channels.push_back({cs.bottleneck, cs.aggregate / n});
  return cs;
}

// For each group and each hierarchy level, how many of the groups put traffic
// on the most contended link instance of that level the group uses.
inline std::vector<std::map<LinkLevel, int>> shared_links(
    const ClusterSpec& c, const std::vector<std::vector<int>>& groups) {
  std::map<LinkInstance, int> load;
  std::vector<std::vector<LinkInstance>> crossed;
  for (const auto& g : groups) {
    crossed.push_back(crossed_links(c, g));
    for (const auto& l : crossed.back()) ++load[l];
  }
  std::vector<std::map<LinkLevel, int>> out;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    std::map<LinkLevel, int> counts;
    for (LinkLevel l : link_hierarchy(c).levels) counts[l] = 1;
    for (const auto& inst : crossed[i])
      counts[inst.level] = std::max(counts[inst.level], load[inst]);
    out.push_back(counts);
  }
  return out;
}

// Bandwidth a group gets when each link instance is split evenly among the
// groups using it (`load` counts groups per instance).
inline double shared_bandwidth(const ClusterSpec& c, const std::vector<int>& group,
                               const std::map<LinkInstance, int>& load) {
  double best = std::numeric_limits<double>::infinity();
  std::map<LinkLevel, int> worst;
  for (const auto& inst : crossed_links(c, group)) {
    auto it = load.find(inst);
    int n = it == load.end() ? 1 : std::max(1, it->second);
    worst[inst.level] = std::max(worst[inst.level], n);
  }
  for (LinkLevel l : crossed_levels(c, group)) {
    int n = worst.count(l) ? worst[l] : 1;
    best = std::min(best, c.level_capacity(l) / n);
  }
  return best;
}

}  // namespace stratsim
