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

#include <gtest/gtest.h>

#include "test_support.hpp"

namespace stratsim {
namespace {

using testing::fixture;

json root_schedule(int m = 1, int k = 1, bool rc = false) {
  return {{"path", "root"},
          {"schedule", {{"n_micro_batch", m}, {"max_ongoing_micro_batch", k}, {"recomputation", rc}}}};
}

json cfg(json partition, json map) { return {{"partition", partition}, {"map", map}}; }

struct Fixture {
  ModelGraph g;
  StrategyTree tree;
};

Fixture two_layer() {
  Fixture f;
  f.g = derive_backward(parse_model(testing::two_linear()));
  f.tree = construct_tree(f.g);
  return f;
}

TEST(ConstructTree, SixLayerModulesNest) {
  auto g = load_model(fixture("fig3_model.json"));
  auto t = construct_tree(g);
  ASSERT_EQ(t.root().children.size(), 4u);
  int s1 = t.find("S1");
  ASSERT_GE(s1, 0);
  EXPECT_FALSE(t.nodes[s1].leaf());
  EXPECT_EQ(t.nodes[s1].children.size(), 3u);
  EXPECT_EQ(t.leaves_under(s1).size(), 3u);
  EXPECT_GE(t.find("S1/e"), 0);
  EXPECT_TRUE(t.nodes[t.find("a")].leaf());
  EXPECT_EQ(t.depth(), 2);
}

TEST(ConstructTree, FlatModelHasDepthOne) {
  auto t = construct_tree(parse_model(testing::two_linear()));
  EXPECT_EQ(t.root().children.size(), 2u);
  EXPECT_EQ(t.depth(), 1);
}

TEST(ConstructTree, SingleLayer) {
  json doc = testing::two_linear();
  doc["layers"].erase(1);
  auto t = construct_tree(parse_model(doc));
  EXPECT_EQ(t.nodes.size(), 2u);
  EXPECT_EQ(t.root().children.size(), 1u);
}

TEST(LoadStrategy, RootScheduleOnly) {
  auto f = two_layer();
  auto t = apply_strategy(f.tree, f.g, {{"nodes", {root_schedule()}}});
  ASSERT_TRUE(t.root().schedule.has_value());
  EXPECT_EQ(t.root().schedule->n_micro_batch, 1);
  EXPECT_FALSE(t.root().schedule->recomputation);
  EXPECT_TRUE(t.op_configs.empty());
  EXPECT_TRUE(t.tensor_configs.empty());
}

TEST(LoadStrategy, TwoByFourPartitionHasEightParts) {
  auto f = two_layer();
  json map = json::array();
  for (int d = 0; d < 8; ++d) map.push_back({d});
  auto t = apply_strategy(
      f.tree, f.g,
      {{"nodes", {root_schedule(), {{"path", "l1"}, {"ops", {{"l1.fc", cfg({{"b", 2}, {"h", 4}}, map)}}}}}}});
  const auto& c = t.op_configs.at("l1.fc");
  EXPECT_EQ(c.parts(), 8);
  EXPECT_EQ(c.map.size(), 8u);
  EXPECT_TRUE(c.user_defined);
}

TEST(LoadStrategy, UnknownDimNamesDimAndOperator) {
  auto f = two_layer();
  try {
    apply_strategy(f.tree, f.g,
                   {{"nodes", {{{"path", "l1"}, {"ops", {{"l1.fc", cfg({{"q", 2}}, {{0}, {1}})}}}}}}});
    FAIL();
  } catch (const Error& e) {
    std::string m = e.what();
    EXPECT_NE(m.find("'q'"), std::string::npos) << m;
    EXPECT_NE(m.find("l1.fc"), std::string::npos) << m;
  }
}

TEST(LoadStrategy, MapSizeMismatchIsAnError) {
  auto f = two_layer();
  EXPECT_THROW(apply_strategy(f.tree, f.g,
                              {{"nodes", {{{"path", "l1"}, {"ops", {{"l1.fc", cfg({{"b", 2}}, {{0}})}}}}}}}),
               Error);
}

TEST(LoadStrategy, ConfigOutsideNodeIsRejected) {
  auto f = two_layer();
  EXPECT_THROW(apply_strategy(f.tree, f.g,
                              {{"nodes", {{{"path", "l2"}, {"ops", {{"l1.fc", cfg(json::object(), {{0}})}}}}}}}),
               Error);
  EXPECT_THROW(apply_strategy(f.tree, f.g, {{"nodes", {{{"path", "nowhere"}}}}}), Error);
  EXPECT_THROW(apply_strategy(f.tree, f.g,
                              {{"nodes", {{{"path", "l1"}, {"schedule", {{"n_micro_batch", 1}}}}}}}),
               Error);
}

TEST(Propagate, DataParallelFromInputOnly) {
  auto f = two_layer();
  auto t = propagate(
      apply_strategy(f.tree, f.g,
                     {{"nodes", {root_schedule(),
                                 {{"path", "l1"},
                                  {"tensors", {{"x", cfg({{"b", 4}}, {{0}, {1}, {2}, {3}})}}}}}}}),
      f.g);
  for (const auto& op : f.g.ops) {
    ASSERT_TRUE(t.op_configs.count(op.name)) << op.name;
    if (op.phase == OpPhase::optimizer) {
      // Steps follow their replicated parameter.
      EXPECT_EQ(t.op_configs.at(op.name).map, (MapSpec{{0, 1, 2, 3}})) << op.name;
      continue;
    }
    EXPECT_EQ(t.op_configs.at(op.name).partition, (PartitionSpec{{"b", 4}})) << op.name;
  }
  for (const auto& w : {"W1", "W2", "W1.opt", "W2.opt"}) {
    const auto& c = t.tensor_configs.at(w);
    EXPECT_TRUE(c.partition.empty()) << w;
    EXPECT_EQ(c.map, (MapSpec{{0, 1, 2, 3}})) << w;
  }
  // Weight gradients are partial sums over b: replicated layout.
  EXPECT_EQ(t.tensor_configs.at("W1.grad").map, (MapSpec{{0, 1, 2, 3}}));
  EXPECT_EQ(t.tensor_configs.size(), f.g.tensors.size());
  EXPECT_EQ(t.op_configs.size(), f.g.ops.size());
}

TEST(Propagate, ExplicitChildScheduleSurvives) {
  auto g = derive_backward(load_model(fixture("fig3_model.json")));
  auto t = propagate(load_strategy(construct_tree(g), g, fixture("fig3_pipeline.json")), g);
  EXPECT_TRUE(t.nodes[t.find("S1")].schedule->recomputation);
  EXPECT_FALSE(t.root().schedule->recomputation);
}

TEST(Propagate, InheritsScheduleTopDown) {
  auto g = derive_backward(load_model(fixture("fig3_model.json")));
  auto t = propagate(load_strategy(construct_tree(g), g, fixture("fig3_dp4.json")), g);
  EXPECT_EQ(*t.nodes[t.find("S1")].schedule, *t.root().schedule);
}

TEST(Propagate, IsIdempotent) {
  auto g = derive_backward(load_model(fixture("fig3_model.json")));
  auto once = propagate(load_strategy(construct_tree(g), g, fixture("fig3_hybrid.json")), g);
  EXPECT_EQ(propagate(once, g), once);
}

TEST(Propagate, UnderdeterminedIsReported) {
  auto f = two_layer();
  auto t = apply_strategy(f.tree, f.g, {{"nodes", {root_schedule()}}});
  EXPECT_THROW(propagate(t, f.g), AggregateError);
  EXPECT_THROW(propagate(f.tree, f.g), Error);  // no root schedule
}

TEST(Propagate, BackwardMirrorsForwardAndReductionYieldsReplicas) {
  auto f = two_layer();
  auto t = propagate(
      apply_strategy(f.tree, f.g,
                     {{"nodes", {root_schedule(),
                                 {{"path", "l1"}, {"ops", {{"l1.fc", cfg({{"o", 2}}, {{0}, {1}})}}}},
                                 {{"path", "l2"}, {"ops", {{"l2.fc", cfg({{"o", 2}}, {{0}, {1}})}}}}}}}),
      f.g);
  EXPECT_EQ(t.op_configs.at("l2.fc.grad.W2"), t.op_configs.at("l2.fc"));
  EXPECT_EQ(t.op_configs.at("l1.fc.grad.W1"), t.op_configs.at("l1.fc"));
  // l2 reduces over o: its output is replicated on both devices.
  EXPECT_EQ(t.tensor_configs.at("y2").map, (MapSpec{{0, 1}}));
  EXPECT_EQ(t.tensor_configs.at("W1").partition, (PartitionSpec{{"o", 2}}));
}

TEST(Propagate, FirstInputWinsOnConflict) {
  auto g = derive_backward(parse_model(testing::two_linear()));
  auto t = propagate(
      apply_strategy(construct_tree(g), g,
                     {{"nodes", {root_schedule(),
                                 {{"path", "l1"}, {"tensors", {{"x", cfg({{"b", 2}}, {{0}, {1}})}}}},
                                 {{"path", "l2"}, {"tensors", {{"W2", cfg(json::object(), {{5}})}}}}}}}),
      g);
  // l2.fc reads y1 (from l1 on {0,1}) first and W2 (on 5) second.
  EXPECT_EQ(t.op_configs.at("l2.fc").map, (MapSpec{{0}, {1}}));
  EXPECT_EQ(t.tensor_configs.at("W2").map, (MapSpec{{5}}));
}

TEST(DevGroup, LeafOnOneDevice) {
  auto f = two_layer();
  auto t = propagate(
      apply_strategy(f.tree, f.g,
                     {{"nodes", {root_schedule(),
                                 {{"path", "l1"}, {"tensors", {{"x", cfg(json::object(), {{3}})}}}},
                                 {{"path", "l2"}, {"ops", {{"l2.fc", cfg(json::object(), {{6}})}}}}}}}),
      f.g);
  EXPECT_EQ(dev_group(t, f.g, t.find("l1")), (DeviceGroup{3}));
  EXPECT_EQ(dev_group(t, f.g, t.find("l2")), (DeviceGroup{6}));
  EXPECT_EQ(dev_group(t, f.g, 0), (DeviceGroup{3, 6}));
}

TEST(DevGroup, PipelineStagesAndMonotonicity) {
  auto g = derive_backward(load_model(fixture("fig3_model.json")));
  auto t = propagate(load_strategy(construct_tree(g), g, fixture("fig3_pipeline.json")), g);
  EXPECT_EQ(dev_group(t, g, t.find("S1")), (DeviceGroup{4, 5, 6, 7}));
  EXPECT_EQ(dev_group(t, g, t.find("a")), (DeviceGroup{0, 1, 2, 3}));
  EXPECT_EQ(dev_group(t, g, 0), (DeviceGroup{0, 1, 2, 3, 4, 5, 6, 7}));
  for (std::size_t i = 1; i < t.nodes.size(); ++i) {
    auto child = dev_group(t, g, static_cast<int>(i));
    auto parent = dev_group(t, g, t.nodes[i].parent);
    EXPECT_TRUE(std::includes(parent.begin(), parent.end(), child.begin(), child.end()));
  }
}

TEST(DevGroup, UnconfiguredDescendantIsAnError) {
  auto f = two_layer();
  EXPECT_THROW(dev_group(f.tree, f.g, 0), Error);
}

TEST(ValidateStrategy, HybridFixtureIsValid) {
  auto g = derive_backward(load_model(fixture("fig3_model.json")));
  auto t = propagate(load_strategy(construct_tree(g), g, fixture("fig3_hybrid.json")), g);
  EXPECT_TRUE(validate_strategy(t, g, load_cluster(fixture("hc1.json"))).empty());
}

TEST(ValidateStrategy, ReportsBadConfigs) {
  auto f = two_layer();
  auto cluster = testing::nvlink_node(8);
  auto t = apply_strategy(f.tree, f.g, {{"nodes", {root_schedule()}}});
  t.nodes[0].schedule = ScheduleConfig{3, 4, false};
  ParallelConfig bad_map;
  bad_map.partition = {{"b", 2}};
  bad_map.map = {{0}};
  t.op_configs["l1.fc"] = bad_map;
  ParallelConfig non_dividing;
  non_dividing.partition = {{"b", 3}};
  non_dividing.map = {{0}, {1}, {2}};
  t.tensor_configs["x"] = non_dividing;
  ParallelConfig off_cluster;
  off_cluster.map = {{9}};
  t.tensor_configs["W1"] = off_cluster;
  auto d = validate_strategy(t, f.g, cluster);
  auto mentions = [&](const std::string& s) {
    for (const auto& x : d)
      if (x.find(s) != std::string::npos) return true;
    return false;
  };
  EXPECT_TRUE(mentions("map has 1 entries but partition has 2 parts"));
  EXPECT_TRUE(mentions("degree 3 does not divide extent 8"));
  EXPECT_TRUE(mentions("device 9 not in cluster"));
  EXPECT_TRUE(mentions("max_ongoing_micro_batch out of range"));
  EXPECT_TRUE(mentions("does not divide batch size"));
}

TEST(DumpStrategy, RoundTrips) {
  auto g = derive_backward(load_model(fixture("fig3_model.json")));
  auto t = propagate(load_strategy(construct_tree(g), g, fixture("fig3_pipeline.json")), g);
  auto again = apply_strategy(construct_tree(g), g, dump_strategy(t, g));
  EXPECT_EQ(again, t);
  EXPECT_EQ(dump_strategy(again, g), dump_strategy(t, g));
}

TEST(Project, DropsLabelsAndUnionsDevices) {
  ParallelConfig c;
  c.partition = {{"b", 2}, {"h", 2}};
  c.map = {{0}, {1}, {2}, {3}};
  auto p = detail::project(c, {"b", "h", "o"}, {"b", "o"});
  EXPECT_EQ(p.partition, (PartitionSpec{{"b", 2}}));
  EXPECT_EQ(p.map, (MapSpec{{0, 1}, {2, 3}}));
}

}  // namespace
}  // namespace stratsim
