#include <gtest/gtest.h>

#include <cmath>

#include "desire/experiment.hpp"

using namespace desire;

TEST(ExperimentConfigJson, RoundTripPreservesEveryField) {
  ExperimentConfig c;
  c.data_dir = "somewhere";
  c.backbone.num_blocks = 3;
  c.pretrain.learning_rate = 0.02;
  c.pretrain_class_ids = {1, 2, 3};
  c.pipeline.lora.rank = 8;
  c.pipeline.consolidation.temperature = 0.25;
  c.pipeline.consolidation.merge_from_train = true;
  c.pipeline.refinement.pseudo_count = 17;
  c.pipeline.stream.shuffle_class_order = false;
  c.variant = Variant::WeightAverage;
  c.seeds = {5, 9};
  const ExperimentConfig back = experiment_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(ExperimentConfigJson, UnknownKeyRejected) {
  nlohmann::json doc = to_json(ExperimentConfig{});
  doc["consolidation"]["temprature"] = 0.1;
  EXPECT_THROW(experiment_from_json(doc), ConfigError);
  nlohmann::json top = to_json(ExperimentConfig{});
  top["extra"] = 1;
  EXPECT_THROW(experiment_from_json(top), ConfigError);
}

TEST(ExperimentConfigJson, MissingKeysTakeDefaults) {
  const ExperimentConfig c = experiment_from_json(nlohmann::json::parse(R"({"seeds": [4]})"));
  ExperimentConfig expected;
  expected.seeds = {4};
  EXPECT_EQ(to_json(c), to_json(expected));
}

TEST(ExperimentConfigJson, WrongTypeRejected) {
  EXPECT_THROW(experiment_from_json(nlohmann::json::parse(R"({"seeds": "zero"})")), ConfigError);
  EXPECT_THROW(experiment_from_json(nlohmann::json::parse(R"({"variant": "nope"})")), ConfigError);
}

TEST(ConfigHash, StableAndSensitive) {
  ExperimentConfig a;
  ExperimentConfig b;
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  b.pipeline.training.learning_rate *= 2.0;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(SyntheticSpecJson, RoundTrip) {
  SyntheticSpec s;
  s.num_classes = 30;
  s.warp_depth = 2;
  EXPECT_EQ(to_json(synthetic_from_json(to_json(s))), to_json(s));
}

TEST(NumberFormatting, ShortestRoundTrip) {
  EXPECT_EQ(format_number(0.5), "0.5");
  EXPECT_EQ(format_number(0.1), "0.1");
  EXPECT_EQ(std::stod(format_number(1.0 / 3.0)), 1.0 / 3.0);
  EXPECT_EQ(format_number(std::nan("")), "nan");
}
