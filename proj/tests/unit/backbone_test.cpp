#include <gtest/gtest.h>

#include <filesystem>
#include <map>

#include "desire/backbone.hpp"
#include "desire/lora.hpp"
#include "desire/numerics/rng.hpp"
#include "desire/synthetic.hpp"
#include "fixtures.hpp"

using namespace desire;
using desire::test_support::small_backbone;

namespace {

Matrix inputs(Index n, std::uint64_t seed) { return SeededRng(seed).normal_matrix(n, small_backbone().input_dim); }

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.num_classes = 6;
  s.pretrain_classes = 3;
  s.input_dim = 8;
  s.latent_dim = 4;
  s.samples_per_class = 30;
  return s;
}

}  // namespace

TEST(Features, FreshLoraIsExactIdentity) {
  const BackboneConfig cfg = small_backbone();
  const BackboneWeights w = init_backbone(cfg, 1);
  const Matrix x = inputs(10, 2);
  const LoraSet fresh = init_lora(cfg, LoraConfig{2, 0.02}, 3);
  const Matrix plain = extract_features(w, cfg, x);
  const Matrix adapted = extract_features(w, cfg, x, fresh.deltas());
  EXPECT_LT((plain - adapted).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Features, OutputShape) {
  const BackboneConfig cfg = small_backbone();
  const Matrix f = extract_features(init_backbone(cfg, 1), cfg, inputs(7, 3));
  EXPECT_EQ(f.rows(), 7);
  EXPECT_EQ(f.cols(), cfg.model_dim);
  EXPECT_THROW(extract_features(init_backbone(cfg, 1), cfg, Matrix::Zero(2, cfg.input_dim + 1)), DimensionError);
}

TEST(Features, PerturbingAChangesFeaturesWhenBIsNonZero) {
  const BackboneConfig cfg = small_backbone();
  const BackboneWeights w = init_backbone(cfg, 1);
  const Matrix x = inputs(5, 4);
  LoraSet set = init_lora(cfg, LoraConfig{2, 0.1}, 5);
  SeededRng rng(6);
  for (LoraAdapter& ad : set.adapters) ad.b = rng.normal_matrix(ad.b.rows(), ad.b.cols(), 0.1);
  const Matrix before = extract_features(w, cfg, x, set.deltas());
  for (std::size_t site = 0; site < set.adapters.size(); ++site) {
    LoraSet probe = set;
    probe.adapters[site].a(0, 0) += 0.5;
    EXPECT_GT((extract_features(w, cfg, x, probe.deltas()) - before).cwiseAbs().maxCoeff(), 1e-9) << site;
  }
}

TEST(Features, RowsAreIndependentOfTheirBatch) {
  const BackboneConfig cfg = small_backbone();
  const BackboneWeights w = init_backbone(cfg, 1);
  const Matrix x = inputs(6, 7);
  const Matrix joint = extract_features(w, cfg, x, {}, 4);
  for (Index r = 0; r < x.rows(); ++r) {
    const Matrix single = extract_features(w, cfg, x.row(r));
    EXPECT_LT((single - joint.row(r)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Features, TapeForwardMatchesPlainExtraction) {
  const BackboneConfig cfg = small_backbone();
  const BackboneWeights w = init_backbone(cfg, 1);
  const Matrix x = inputs(3, 8);
  Tape tape;
  const Var z = forward_features(tape, bind_constant(tape, w), cfg, x);
  EXPECT_LT((z.value() - extract_features(w, cfg, x)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Features, LoraOnlyTouchesItsSite) {
  // Only the block-1 Q site gets a non-zero delta, so a one-block model built
  // from block 0 sees no change.
  const BackboneConfig cfg = small_backbone();
  const BackboneWeights w = init_backbone(cfg, 1);
  LoraSet set = init_lora(cfg, LoraConfig{2, 0.1}, 2);
  set.adapters[2].b.setConstant(0.3);  // block 1, Q
  std::vector<Matrix> deltas = set.deltas();
  EXPECT_TRUE((deltas[0].array() == 0.0).all());
  EXPECT_TRUE((deltas[1].array() == 0.0).all());
  EXPECT_FALSE((deltas[2].array() == 0.0).all());

  BackboneConfig one = cfg;
  one.num_blocks = 1;
  BackboneWeights w1 = w;
  w1.blocks.resize(1);
  const Matrix x = inputs(4, 9);
  const std::vector<Matrix> first_block(deltas.begin(), deltas.begin() + 2);
  EXPECT_LT((extract_features(w1, one, x, first_block) - extract_features(w1, one, x)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(ClassifierHead, ExpansionKeepsOldLogits) {
  Classifier c(3);
  const Classifier first = expand_classifier(c, {4, 7});
  EXPECT_EQ(first.seen_classes(), 2);
  EXPECT_TRUE((first.weight.array() == 0.0).all());
  Classifier trained = first;
  trained.weight << 1, 2, 3, 4, 5, 6;
  trained.bias << 0.5, -0.5;
  const Classifier grown = expand_classifier(trained, {1});
  EXPECT_EQ(grown.class_ids, (std::vector<int>{4, 7, 1}));
  const Matrix z = SeededRng(1).normal_matrix(5, 3);
  EXPECT_EQ(Matrix(grown.logits(z).leftCols(2)), trained.logits(z));
  EXPECT_EQ(grown.row_of(1), 2);
  EXPECT_THROW(grown.row_of(99), ConsistencyError);
}

TEST(ClassifierHead, EmptyOrDuplicateExpansionRejected) {
  const Classifier c = expand_classifier(Classifier(3), {0});
  EXPECT_THROW(expand_classifier(c, {}), ConfigError);
  EXPECT_THROW(expand_classifier(c, {0}), ConsistencyError);
}

TEST(ClassifierHead, PredictionsUseGlobalIds) {
  Classifier c = expand_classifier(Classifier(2), {10, 20});
  c.weight << 1, 0, 0, 1;
  EXPECT_EQ(c.predict(test_support::mat({{2, 0}, {0, 2}})), (std::vector<int>{10, 20}));
  EXPECT_DOUBLE_EQ(accuracy({10, 20, 20}, {10, 20, 10}), 2.0 / 3.0);
}

TEST(Pretraining, OverlapWithStreamIsLeakage) {
  const SyntheticData data = generate_synthetic(small_spec());
  BackboneConfig cfg = small_backbone();
  PretrainConfig opts;
  opts.epochs = 1;
  opts.min_accuracy = 0.0;
  const std::set<int> stream = {data.pretrain_class_ids.front()};
  EXPECT_THROW(pretrain_backbone(data.pretrain_train, data.pretrain_test, stream, cfg, opts), LeakageError);
}

TEST(Pretraining, SameSeedGivesIdenticalWeights) {
  const SyntheticData data = generate_synthetic(small_spec());
  const std::set<int> stream(data.stream_class_ids.begin(), data.stream_class_ids.end());
  PretrainConfig opts;
  opts.epochs = 2;
  opts.min_accuracy = 0.0;
  const PretrainResult a = pretrain_backbone(data.pretrain_train, data.pretrain_test, stream, small_backbone(), opts);
  const PretrainResult b = pretrain_backbone(data.pretrain_train, data.pretrain_test, stream, small_backbone(), opts);
  EXPECT_EQ(checksum(a.weights), checksum(b.weights));
  EXPECT_EQ(a.epoch_losses, b.epoch_losses);
  opts.seed = 1;
  const PretrainResult c = pretrain_backbone(data.pretrain_train, data.pretrain_test, stream, small_backbone(), opts);
  EXPECT_NE(checksum(a.weights), checksum(c.weights));
}

TEST(Pretraining, AccuracyGateIsEnforced) {
  const SyntheticData data = generate_synthetic(small_spec());
  const std::set<int> stream(data.stream_class_ids.begin(), data.stream_class_ids.end());
  PretrainConfig opts;
  opts.epochs = 1;
  opts.min_accuracy = 1.01;
  EXPECT_THROW(pretrain_backbone(data.pretrain_train, data.pretrain_test, stream, small_backbone(), opts), Error);
}

TEST(BackboneFormat, RoundTripIsBitExact) {
  const BackboneConfig cfg = small_backbone();
  const BackboneWeights w = init_backbone(cfg, 3);
  const auto [cfg2, w2] = decode_backbone(encode_backbone(cfg, w));
  EXPECT_TRUE(cfg2 == cfg);
  EXPECT_EQ(checksum(w2), checksum(w));
  const auto path = std::filesystem::temp_directory_path() / "desire_backbone.dsrb";
  save_backbone(path, cfg, w);
  EXPECT_EQ(checksum(load_backbone(path).second), checksum(w));
  std::filesystem::remove(path);

  std::vector<unsigned char> bad = encode_backbone(cfg, w);
  bad.pop_back();
  EXPECT_THROW(decode_backbone(bad), IoError);
}

TEST(BackboneChecksum, DetectsSingleBitChange) {
  BackboneWeights w = init_backbone(small_backbone(), 3);
  const std::uint64_t before = checksum(w);
  w.blocks[1].w_v(0, 0) = std::nextafter(w.blocks[1].w_v(0, 0), 1e9);
  EXPECT_NE(checksum(w), before);
}

TEST(DatasetFormat, RoundTripAndValidation) {
  Dataset d;
  d.inputs = test_support::mat({{1, 2}, {3, 4}, {5, 6}});
  d.labels = {3, 1, 3};
  const Dataset back = decode_dataset(encode_dataset(d));
  EXPECT_EQ(back.inputs, d.inputs);
  EXPECT_EQ(back.labels, d.labels);
  std::vector<unsigned char> bytes = encode_dataset(d);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "DSR1");
  // magic + n + d + num_classes + 3 * (2 doubles + label)
  EXPECT_EQ(bytes.size(), 4u + 12u + 3u * (16u + 4u));
  bytes[2] = 'X';
  EXPECT_THROW(decode_dataset(bytes), IoError);

  const Dataset only3 = d.filter({3});
  EXPECT_EQ(only3.size(), 2);
  EXPECT_EQ(only3.inputs.row(1), d.inputs.row(2));
}

TEST(SyntheticData, SplitSizesAndDisjointClasses) {
  const SyntheticSpec spec = small_spec();
  const SyntheticData data = generate_synthetic(spec);
  std::map<int, int> train_counts, test_counts;
  for (int l : data.stream_train.labels) ++train_counts[l];
  for (int l : data.stream_test.labels) ++test_counts[l];
  for (int c : data.stream_class_ids) {
    EXPECT_EQ(train_counts[c], spec.train_per_class());
    EXPECT_EQ(test_counts[c], spec.samples_per_class - spec.train_per_class());
  }
  for (int c : data.pretrain_class_ids) EXPECT_EQ(train_counts.count(c), 0u);
  EXPECT_EQ(data.pretrain_class_ids.size(), 3u);
  EXPECT_EQ(data.stream_class_ids.size(), 3u);
}

TEST(SyntheticData, SameSeedIdenticalAndClassBudgetChecked) {
  const SyntheticData a = generate_synthetic(small_spec());
  const SyntheticData b = generate_synthetic(small_spec());
  EXPECT_EQ(encode_dataset(a.stream_train), encode_dataset(b.stream_train));
  SyntheticSpec bad = small_spec();
  bad.pretrain_classes = bad.num_classes;
  EXPECT_THROW(generate_synthetic(bad), ConfigError);
}
