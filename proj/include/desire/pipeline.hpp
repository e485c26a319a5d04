#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "desire/backbone.hpp"
#include "desire/consolidation.hpp"
#include "desire/lora.hpp"
#include "desire/refinement.hpp"
#include "desire/stats.hpp"

namespace desire {

enum class Variant { DesireFull, BaselineMerge, BaselinePlusDrc, BaselinePlusDbr, SeqLora, WeightAverage };

const std::array<Variant, 6>& all_variants();
std::string to_string(Variant v);
/// Throws ConfigError listing the valid names.
Variant parse_variant(const std::string& name);

/// What each variant does after individual training.
struct VariantTraits {
  bool learned_coefficients = false;  // DRC, else lambda = 1/t
  bool refine_head = false;           // DBR
  bool merges = true;                 // two-set continual merging
  bool sequential = false;            // one adapter set trained throughout
  bool archive = false;               // keeps every task's set
};
VariantTraits traits(Variant v);

/// Per-task LoRA + head training.
struct TrainingConfig {
  int epochs = 20;
  double learning_rate = 5e-3;
  double momentum = 0.9;
  int batch_size = 64;

  void validate() const;
  bool operator==(const TrainingConfig&) const = default;
};

struct StreamConfig {
  int num_tasks = 5;
  int classes_per_task = 2;
  /// Permute the stream classes with the run seed before splitting into tasks.
  bool shuffle_class_order = true;

  void validate() const;
  bool operator==(const StreamConfig&) const = default;
};

/// Disjoint class-incremental tasks. Training data of a task can be read only
/// while that task is the active stage; test splits stay readable.
class TaskStream {
 public:
  TaskStream(const Dataset& stream_train, const Dataset& stream_test, const std::set<int>& pretrain_classes,
             const StreamConfig& config, std::uint64_t order_seed);

  int num_tasks() const { return static_cast<int>(classes_.size()); }
  const std::vector<int>& task_classes(int task) const;
  const Dataset& test(int task) const;
  /// Throws ProtocolError unless `task` is the active stage.
  const Dataset& train(int task) const;

  /// Stages only move forward.
  void begin_stage(int task);
  int active_stage() const { return active_; }
  /// Train-split reads per task, for auditing.
  const std::vector<int>& train_reads() const { return train_reads_; }

 private:
  std::vector<std::vector<int>> classes_;
  std::vector<Dataset> train_;
  std::vector<Dataset> test_;
  int active_ = -1;
  mutable std::vector<int> train_reads_;
};

/// Pretrained weights plus the checksum taken when they were frozen.
struct FrozenBackbone {
  BackboneConfig config;
  BackboneWeights weights;
  std::uint64_t checksum = 0;

  FrozenBackbone(BackboneConfig c, BackboneWeights w);
  /// Throws ConsistencyError if the weights changed since freezing.
  void verify() const;
};

struct IndividualResult {
  LoraSet adapters;
  std::vector<int> classes;
  Matrix head_weight;  // new rows only
  Matrix head_bias;
  std::vector<ClassStats> stats;
  std::vector<double> epoch_losses;
};

/// Trains `adapters` and zero-initialized head rows for `classes` on `train`
/// with cross-entropy restricted to those classes, then computes the class
/// statistics under the trained adapters.
IndividualResult run_individual_training(const FrozenBackbone& backbone, LoraSet adapters,
                                         const std::vector<int>& classes, const Dataset& train,
                                         const TrainingConfig& config, std::uint64_t seed, bool compute_stats = true);

/// Appends the new head rows of `result` to `classifier`.
Classifier attach_head_rows(const Classifier& classifier, const IndividualResult& result);

struct MetricsReport {
  std::vector<double> stage_accuracies;      // A_t
  std::vector<double> last_task_accuracies;  // per task under the final model
  double a_last = 0.0;
  double avg = 0.0;
  double sd_acc = 0.0;            // population std of last_task_accuracies
  double final_task_accuracy = 0.0;
  double previous_tasks_mean = 0.0;  // NaN when T = 1
};

/// Throws ConsistencyError when the two lists differ in length or are empty.
MetricsReport compute_metrics(const std::vector<double>& stage_accuracies,
                              const std::vector<double>& last_task_accuracies);

struct ConsolidationRecord {
  int task = 0;  // 0-based stage that was folded in
  MergeCoefficients coefficients;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  bool learned = false;
};

/// Everything one variant produced on one seed.
struct RunResult {
  Variant variant = Variant::DesireFull;
  std::uint64_t seed = 0;
  MetricsReport metrics;
  /// task_accuracy[t][s]: accuracy on task s's test split after stage t.
  std::vector<std::vector<double>> task_accuracy;
  std::vector<ConsolidationRecord> consolidations;
  std::vector<std::vector<int>> task_classes;
  /// Mean over seen classes of |mu(stage t) - mu(first stage)| on test features.
  std::vector<double> mean_feature_drift;
  double mean_class_separation = 0.0;  // mean pairwise distance of final class means
  /// Largest number of adapter sets held at once, overall and within each stage.
  int peak_live_sets = 0;
  std::vector<int> live_sets_per_stage;
  std::vector<std::vector<Matrix>> task_deltas;  // per task A*B per site, after individual training
  std::vector<std::vector<double>> training_losses;
  std::uint64_t backbone_checksum = 0;
};

struct PipelineConfig {
  LoraConfig lora;
  TrainingConfig training;
  ConsolidationConfig consolidation;
  RefinementConfig refinement;
  StreamConfig stream;

  void validate(const BackboneConfig& backbone) const;
};

/// Optional per-stage feature dump, called with (variant, seed, stage, features
/// of all seen test data, labels).
using FeatureSink = std::function<void(Variant, std::uint64_t, int, const Matrix&, const std::vector<int>&)>;

/// Runs the given variants in lockstep on one seed. Individual training is
/// shared by every variant that starts each task from a fresh adapter set, so
/// the ablations differ only in what happens after it.
std::vector<RunResult> run_variants(const FrozenBackbone& backbone, const Dataset& stream_train,
                                    const Dataset& stream_test, const std::set<int>& pretrain_classes,
                                    const PipelineConfig& config, const std::vector<Variant>& variants,
                                    std::uint64_t seed, const FeatureSink& sink = {});

RunResult run_desire(const FrozenBackbone& backbone, const Dataset& stream_train, const Dataset& stream_test,
                     const std::set<int>& pretrain_classes, const PipelineConfig& config, std::uint64_t seed);
RunResult run_baseline(const FrozenBackbone& backbone, const Dataset& stream_train, const Dataset& stream_test,
                       const std::set<int>& pretrain_classes, const PipelineConfig& config, Variant variant,
                       std::uint64_t seed);

/// Per-class mean drift between two feature sets of the same samples.
std::map<int, double> feature_drift(const Matrix& before, const Matrix& after, const std::vector<int>& labels);

/// CSV with a config-hash comment line, then stage,label,f0..f{d-1}.
void export_features(const std::filesystem::path& path, const Matrix& features, const std::vector<int>& labels,
                     int stage, const std::string& config_hash);

}  // namespace desire
