#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "desire/pipeline.hpp"
#include "desire/synthetic.hpp"
#include "fixtures.hpp"

using namespace desire;
using desire::test_support::small_backbone;

namespace {

SyntheticSpec tiny_spec() {
  SyntheticSpec s;
  s.num_classes = 8;
  s.pretrain_classes = 2;
  s.input_dim = 8;
  s.latent_dim = 4;
  s.samples_per_class = 40;
  return s;
}

PipelineConfig tiny_pipeline(int tasks) {
  PipelineConfig p;
  p.lora.rank = 2;
  p.training.epochs = 2;
  p.training.batch_size = 16;
  p.training.learning_rate = 0.05;
  p.consolidation.epochs = 1;
  p.consolidation.batch_size = 8;
  p.consolidation.merge_dataset_size = 16;
  p.refinement.epochs = 2;
  p.refinement.batch_size = 16;
  p.refinement.pseudo_count = 20;
  p.stream.num_tasks = tasks;
  p.stream.classes_per_task = 2;
  return p;
}

struct TinyWorld {
  SyntheticData data = generate_synthetic(tiny_spec());
  FrozenBackbone backbone{small_backbone(), init_backbone(small_backbone(), 5)};
  std::set<int> pretrain{data.pretrain_class_ids.begin(), data.pretrain_class_ids.end()};

  std::vector<RunResult> run(const PipelineConfig& cfg, std::vector<Variant> variants, std::uint64_t seed) const {
    return run_variants(backbone, data.stream_train, data.stream_test, pretrain, cfg, variants, seed);
  }
};

const TinyWorld& world() {
  static const TinyWorld w;
  return w;
}

}  // namespace

TEST(Metrics, AverageAndLast) {
  const MetricsReport m = compute_metrics({0.8, 0.6}, {0.5, 0.7});
  EXPECT_DOUBLE_EQ(m.avg, 0.7);
  EXPECT_DOUBLE_EQ(m.a_last, 0.6);
  EXPECT_DOUBLE_EQ(m.final_task_accuracy, 0.7);
  EXPECT_DOUBLE_EQ(m.previous_tasks_mean, 0.5);
}

TEST(Metrics, EqualTaskAccuraciesHaveZeroSpread) {
  EXPECT_EQ(compute_metrics({1, 1, 1}, {0.5, 0.5, 0.5}).sd_acc, 0.0);
}

TEST(Metrics, PopulationStandardDeviation) {
  EXPECT_DOUBLE_EQ(compute_metrics({1, 1}, {1.0, 0.0}).sd_acc, 0.5);
}

TEST(Metrics, SingleTaskHasNoPreviousMean) {
  const MetricsReport m = compute_metrics({0.9}, {0.9});
  EXPECT_TRUE(std::isnan(m.previous_tasks_mean));
  EXPECT_EQ(m.sd_acc, 0.0);
}

TEST(Metrics, LengthMismatchRejected) {
  EXPECT_THROW(compute_metrics({0.1, 0.2}, {0.1}), ConsistencyError);
  EXPECT_THROW(compute_metrics({}, {}), ConsistencyError);
}

TEST(Variants, NamesRoundTripAndTyposAreRejected) {
  for (Variant v : all_variants()) EXPECT_EQ(parse_variant(to_string(v)), v);
  EXPECT_THROW(parse_variant("desire_ful"), ConfigError);
}

TEST(Variants, AblationTraits) {
  EXPECT_TRUE(traits(Variant::DesireFull).learned_coefficients);
  EXPECT_TRUE(traits(Variant::DesireFull).refine_head);
  EXPECT_FALSE(traits(Variant::BaselineMerge).learned_coefficients);
  EXPECT_FALSE(traits(Variant::BaselineMerge).refine_head);
  EXPECT_TRUE(traits(Variant::BaselinePlusDrc).learned_coefficients);
  EXPECT_FALSE(traits(Variant::BaselinePlusDrc).refine_head);
  EXPECT_FALSE(traits(Variant::BaselinePlusDbr).learned_coefficients);
  EXPECT_TRUE(traits(Variant::BaselinePlusDbr).refine_head);
  EXPECT_TRUE(traits(Variant::SeqLora).sequential);
  EXPECT_TRUE(traits(Variant::WeightAverage).archive);
}

TEST(Stream, RehearsalGuard) {
  const TinyWorld& w = world();
  TaskStream stream(w.data.stream_train, w.data.stream_test, w.pretrain, tiny_pipeline(3).stream, 1);
  EXPECT_THROW(stream.train(0), ProtocolError);
  stream.begin_stage(0);
  EXPECT_NO_THROW(stream.train(0));
  EXPECT_THROW(stream.train(1), ProtocolError);
  stream.begin_stage(1);
  EXPECT_THROW(stream.train(0), ProtocolError);
  EXPECT_NO_THROW(stream.test(0));
  EXPECT_THROW(stream.begin_stage(0), ProtocolError);
  EXPECT_EQ(stream.train_reads()[0], 1);
}

TEST(Stream, TasksAreDisjointAndCoverRequestedClasses) {
  const TinyWorld& w = world();
  TaskStream stream(w.data.stream_train, w.data.stream_test, w.pretrain, tiny_pipeline(3).stream, 4);
  std::set<int> seen;
  for (int t = 0; t < stream.num_tasks(); ++t) {
    for (int c : stream.task_classes(t)) EXPECT_TRUE(seen.insert(c).second);
    EXPECT_EQ(stream.test(t).classes(), std::set<int>(stream.task_classes(t).begin(), stream.task_classes(t).end()));
  }
  EXPECT_EQ(seen.size(), 6u);
}

TEST(Stream, PretrainOverlapIsLeakage) {
  const TinyWorld& w = world();
  std::set<int> overlapping = w.pretrain;
  overlapping.insert(w.data.stream_class_ids.front());
  EXPECT_THROW(TaskStream(w.data.stream_train, w.data.stream_test, overlapping, tiny_pipeline(2).stream, 0),
               LeakageError);
}

TEST(Stream, TooManyTasksRejected) {
  const TinyWorld& w = world();
  EXPECT_THROW(TaskStream(w.data.stream_train, w.data.stream_test, w.pretrain, tiny_pipeline(4).stream, 0),
               ConfigError);
}

TEST(IndividualTraining, StatsCoverTaskClassesAndOldRowsStay) {
  const TinyWorld& w = world();
  TaskStream stream(w.data.stream_train, w.data.stream_test, w.pretrain, tiny_pipeline(2).stream, 0);
  stream.begin_stage(0);
  const PipelineConfig cfg = tiny_pipeline(2);
  const IndividualResult first = run_individual_training(
      w.backbone, init_lora(w.backbone.config, cfg.lora, 1), stream.task_classes(0), stream.train(0), cfg.training, 2);
  ASSERT_EQ(first.stats.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(first.stats[i].class_id, stream.task_classes(0)[i]);
  const Classifier head = attach_head_rows(Classifier(w.backbone.config.model_dim), first);

  stream.begin_stage(1);
  const IndividualResult second = run_individual_training(
      w.backbone, init_lora(w.backbone.config, cfg.lora, 3), stream.task_classes(1), stream.train(1), cfg.training, 4);
  const Classifier grown = attach_head_rows(head, second);
  EXPECT_EQ(grown.seen_classes(), 4);
  EXPECT_EQ(Matrix(grown.weight.topRows(2)), head.weight);
  EXPECT_EQ(Matrix(grown.bias.leftCols(2)), head.bias);
  w.backbone.verify();
}

TEST(Pipeline, IdenticalSeedIsBitIdentical) {
  const PipelineConfig cfg = tiny_pipeline(2);
  const auto a = world().run(cfg, {Variant::DesireFull}, 3);
  const auto b = world().run(cfg, {Variant::DesireFull}, 3);
  EXPECT_EQ(a[0].metrics.stage_accuracies, b[0].metrics.stage_accuracies);
  EXPECT_EQ(a[0].metrics.last_task_accuracies, b[0].metrics.last_task_accuracies);
  EXPECT_EQ(a[0].consolidations.back().coefficients, b[0].consolidations.back().coefficients);
}

TEST(Pipeline, LockstepMatchesSolo) {
  const PipelineConfig cfg = tiny_pipeline(2);
  const auto together = world().run(cfg, {Variant::BaselineMerge, Variant::DesireFull}, 6);
  const auto solo = world().run(cfg, {Variant::DesireFull}, 6);
  EXPECT_EQ(together[1].metrics.stage_accuracies, solo[0].metrics.stage_accuracies);
  EXPECT_EQ(together[1].consolidations.back().coefficients, solo[0].consolidations.back().coefficients);
}

TEST(Pipeline, SingleTaskWeightAverageEqualsSeqLora) {
  const PipelineConfig cfg = tiny_pipeline(1);
  const auto runs = world().run(cfg, {Variant::WeightAverage, Variant::SeqLora}, 1);
  EXPECT_EQ(runs[0].metrics.stage_accuracies, runs[1].metrics.stage_accuracies);
  EXPECT_EQ(runs[0].task_deltas, runs[1].task_deltas);
}

TEST(Pipeline, SingleTaskAccuracyIsTheTaskAccuracy) {
  const auto runs = world().run(tiny_pipeline(1), {Variant::DesireFull}, 2);
  EXPECT_EQ(runs[0].metrics.a_last, runs[0].metrics.last_task_accuracies[0]);
  EXPECT_TRUE(runs[0].consolidations.empty());
}

TEST(Pipeline, DrcAblationOnlyChangesCoefficients) {
  const auto runs = world().run(tiny_pipeline(3), {Variant::BaselineMerge, Variant::BaselinePlusDrc}, 2);
  EXPECT_EQ(runs[0].task_deltas, runs[1].task_deltas);
  ASSERT_EQ(runs[0].consolidations.size(), runs[1].consolidations.size());
  for (std::size_t i = 0; i < runs[0].consolidations.size(); ++i) {
    EXPECT_FALSE(runs[0].consolidations[i].learned);
    EXPECT_TRUE(runs[1].consolidations[i].learned);
  }
  // Empirical coefficients: lambda_c = 1/t for the t-th task.
  const MergeCoefficients& third = runs[0].consolidations.back().coefficients;
  EXPECT_DOUBLE_EQ(third.at(0, Projection::Q, FactorMatrix::A, SetRole::Current), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(third.at(0, Projection::Q, FactorMatrix::A, SetRole::Previous), 2.0 / 3.0);
}

TEST(Pipeline, LiveSetAudit) {
  const auto runs = world().run(tiny_pipeline(3), std::vector<Variant>(all_variants().begin(), all_variants().end()), 0);
  for (const RunResult& r : runs) {
    const int expected = r.variant == Variant::WeightAverage ? 3 : r.variant == Variant::SeqLora ? 1 : 2;
    EXPECT_EQ(r.peak_live_sets, expected) << to_string(r.variant);
    ASSERT_EQ(r.live_sets_per_stage.size(), 3u);
    for (int t = 0; t < 3; ++t) {
      const int per_stage = r.variant == Variant::WeightAverage ? t + 1 : expected;
      EXPECT_EQ(r.live_sets_per_stage[t], per_stage) << to_string(r.variant) << " stage " << t;
    }
    EXPECT_EQ(r.backbone_checksum, world().backbone.checksum);
    for (const ConsolidationRecord& c : r.consolidations) EXPECT_EQ(c.coefficients.size(), 8u * 2u);
  }
  world().backbone.verify();
}

TEST(Pipeline, EvaluationCoversExactlySeenTasks) {
  const auto runs = world().run(tiny_pipeline(3), {Variant::DesireFull}, 4);
  ASSERT_EQ(runs[0].task_accuracy.size(), 3u);
  for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(runs[0].task_accuracy[t].size(), t + 1);
}

TEST(FeatureDrift, ReExportHasZeroDrift) {
  const TinyWorld& w = world();
  const Matrix x = w.data.stream_test.inputs.topRows(20);
  const std::vector<int> labels(w.data.stream_test.labels.begin(), w.data.stream_test.labels.begin() + 20);
  const Matrix f1 = extract_features(w.backbone.weights, w.backbone.config, x);
  const Matrix f2 = extract_features(w.backbone.weights, w.backbone.config, x);
  for (const auto& [c, d] : feature_drift(f1, f2, labels)) EXPECT_EQ(d, 0.0);

  const auto path = std::filesystem::temp_directory_path() / "desire_features.csv";
  export_features(path, f1, labels, 1, "abc");
  std::ifstream in(path);
  std::string first, header;
  std::getline(in, first);
  std::getline(in, header);
  EXPECT_EQ(first, "# config_hash=abc");
  EXPECT_EQ(header.substr(0, 13), "stage,label,f");
  std::filesystem::remove(path);
}
