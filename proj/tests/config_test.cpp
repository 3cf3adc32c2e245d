#include <gtest/gtest.h>

#include "bard/run_config.hpp"

using namespace bard;
using nlohmann::json;

TEST(RunConfig, DefaultsResolve) {
  const RunConfig rc = default_run_config();
  EXPECT_EQ(rc.bridge.task.response_len(), 32);
  EXPECT_EQ(rc.bridge.net.max_positions, 35 + 32);
  EXPECT_EQ(rc.bridge.net.vocab_total, 65);
  EXPECT_EQ(rc.bridge.block_schedule, (std::vector<int>{4, 8, 16, 32}));
}

TEST(RunConfig, SchemaIsRequired) {
  EXPECT_THROW(parse_run_config(json::object()), ConfigError);
  EXPECT_THROW(parse_run_config({{"schema", "bard.run/v0"}}), ConfigError);
}

TEST(RunConfig, UnknownKeysRejectedAtEveryLevel) {
  EXPECT_THROW(parse_run_config({{"schema", kRunSchema}, {"extra", 1}}), ConfigError);
  EXPECT_THROW(parse_run_config({{"schema", kRunSchema}, {"task", {{"pairs", 3}}}}), ConfigError);
  EXPECT_THROW(parse_run_config({{"schema", kRunSchema}, {"bridge", {{"phases", {{"ar", {{"lr", 1}}}}}}}}), ConfigError);
  EXPECT_THROW(parse_run_config({{"schema", kRunSchema}, {"decode", {{{"block_size", 4}, {"eta", 0.5}}}}}), ConfigError);
}

TEST(RunConfig, SemanticErrors) {
  EXPECT_THROW(parse_run_config({{"schema", kRunSchema}, {"task", {{"num_pairs", 2}, {"num_queries", 3}}}}), ConfigError);
  EXPECT_THROW(parse_run_config({{"schema", kRunSchema}, {"bridge", {{"block_schedule", {4, 12}}}}}), ConfigError);
  EXPECT_THROW(parse_run_config({{"schema", kRunSchema}, {"bridge", {{"noise", "gaussian"}}}}), ConfigError);
  EXPECT_THROW(parse_run_config({{"schema", kRunSchema}, {"decode", {{{"block_size", 5}}}}}), ConfigError);
  EXPECT_THROW(parse_run_config({{"schema", kRunSchema}, {"task", {{"num_pairs", "eight"}}}}), ConfigError);
}

TEST(RunConfig, RoundTripAndStableHash) {
  json j = {{"schema", kRunSchema},
            {"run_id", "r1"},
            {"task", {{"num_pairs", 4}, {"num_queries", 2}, {"value_len", 1}, {"echo_key", false}}},
            {"bridge", {{"block_schedule", {1, 2, 4}}, {"stage_steps", {5, 5, 5}}, {"distill_steps", {0, 3, 3}}, {"tau", 2.0}}},
            {"decode", {{{"id", "fast"}, {"block_size", 4}, {"threshold", 0.7}}}}};
  const RunConfig a = parse_run_config(j);
  EXPECT_EQ(a.bridge.task.response_len(), 4);
  EXPECT_EQ(a.bridge.kd.teacher_block, 1);
  ASSERT_EQ(a.policies.size(), 1u);
  EXPECT_EQ(a.policies[0].id, "fast");
  const RunConfig b = parse_run_config(to_json(a));
  EXPECT_EQ(to_json(a), to_json(b));
  EXPECT_EQ(config_hash(a), config_hash(b));
  j["bridge"]["tau"] = 3.0;
  EXPECT_NE(config_hash(parse_run_config(j)), config_hash(a));
}

TEST(RunConfig, DirectStepsDefaultToWarmBudget) {
  const RunConfig rc = parse_run_config(
      {{"schema", kRunSchema}, {"bridge", {{"stage_steps", {10, 20, 30, 40}}, {"distill_steps", {0, 5, 6, 7}}}}});
  EXPECT_EQ(rc.bridge.direct_steps_for(1), 10);
  EXPECT_EQ(rc.bridge.direct_steps_for(2), 35);
  EXPECT_EQ(rc.bridge.direct_steps_for(4), 118);
}
