#include "desire/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "desire/io.hpp"
#include "desire/numerics/optim.hpp"
#include "desire/numerics/rng.hpp"

namespace desire {

const std::array<Variant, 6>& all_variants() {
  static const std::array<Variant, 6> v = {Variant::DesireFull,      Variant::BaselineMerge, Variant::BaselinePlusDrc,
                                           Variant::BaselinePlusDbr, Variant::SeqLora,       Variant::WeightAverage};
  return v;
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::DesireFull: return "desire_full";
    case Variant::BaselineMerge: return "baseline_merge";
    case Variant::BaselinePlusDrc: return "baseline_plus_drc";
    case Variant::BaselinePlusDbr: return "baseline_plus_dbr";
    case Variant::SeqLora: return "seq_lora";
    case Variant::WeightAverage: return "weight_average";
  }
  return "unknown";
}

Variant parse_variant(const std::string& name) {
  std::string valid;
  for (Variant v : all_variants()) {
    if (to_string(v) == name) return v;
    valid += (valid.empty() ? "" : ", ") + to_string(v);
  }
  throw ConfigError("unknown variant '" + name + "'; valid variants: " + valid);
}

VariantTraits traits(Variant v) {
  VariantTraits t;
  switch (v) {
    case Variant::DesireFull:
      t.learned_coefficients = true;
      t.refine_head = true;
      break;
    case Variant::BaselineMerge: break;
    case Variant::BaselinePlusDrc: t.learned_coefficients = true; break;
    case Variant::BaselinePlusDbr: t.refine_head = true; break;
    case Variant::SeqLora:
      t.merges = false;
      t.sequential = true;
      break;
    case Variant::WeightAverage:
      t.merges = false;
      t.archive = true;
      break;
  }
  return t;
}

void TrainingConfig::validate() const {
  if (epochs < 1) throw ConfigError("training: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("training: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("training: learning_rate must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("training: momentum must be in [0, 1)");
}

void StreamConfig::validate() const {
  if (num_tasks < 1) throw ConfigError("stream: num_tasks must be >= 1");
  if (classes_per_task < 1) throw ConfigError("stream: classes_per_task must be >= 1");
}

void PipelineConfig::validate(const BackboneConfig& backbone) const {
  lora.validate(backbone);
  training.validate();
  consolidation.validate();
  if (consolidation.epochs < 1) throw ConfigError("consolidation: epochs must be >= 1 in a pipeline run");
  refinement.validate();
  stream.validate();
}

// ---------------------------------------------------------------------------

TaskStream::TaskStream(const Dataset& stream_train, const Dataset& stream_test, const std::set<int>& pretrain_classes,
                       const StreamConfig& config, std::uint64_t order_seed) {
  config.validate();
  stream_train.validate();
  stream_test.validate();
  const std::set<int> available = stream_train.classes();
  std::vector<int> leaked;
  for (int c : available) {
    if (pretrain_classes.contains(c)) leaked.push_back(c);
  }
  for (int c : stream_test.classes()) {
    if (pretrain_classes.contains(c) && std::find(leaked.begin(), leaked.end(), c) == leaked.end()) leaked.push_back(c);
  }
  if (!leaked.empty()) {
    std::string ids;
    for (int c : leaked) ids += (ids.empty() ? "" : ",") + std::to_string(c);
    throw LeakageError("stream classes overlap the pretraining classes: " + ids);
  }
  const int needed = config.num_tasks * config.classes_per_task;
  if (static_cast<int>(available.size()) < needed) {
    throw ConfigError("stream: " + std::to_string(config.num_tasks) + " tasks x " +
                      std::to_string(config.classes_per_task) + " classes need " + std::to_string(needed) +
                      " classes, data has " + std::to_string(available.size()));
  }
  std::vector<int> order(available.begin(), available.end());
  if (config.shuffle_class_order) SeededRng(order_seed).shuffle(order);
  for (int t = 0; t < config.num_tasks; ++t) {
    std::vector<int> cls(order.begin() + t * config.classes_per_task, order.begin() + (t + 1) * config.classes_per_task);
    const std::set<int> keep(cls.begin(), cls.end());
    Dataset tr = stream_train.filter(keep);
    Dataset te = stream_test.filter(keep);
    for (int c : cls) {
      if (std::count(te.labels.begin(), te.labels.end(), c) == 0) {
        throw ConfigError("stream: class " + std::to_string(c) + " has no test samples");
      }
    }
    classes_.push_back(std::move(cls));
    train_.push_back(std::move(tr));
    test_.push_back(std::move(te));
  }
  train_reads_.assign(classes_.size(), 0);
}

const std::vector<int>& TaskStream::task_classes(int task) const { return classes_.at(static_cast<std::size_t>(task)); }

const Dataset& TaskStream::test(int task) const { return test_.at(static_cast<std::size_t>(task)); }

const Dataset& TaskStream::train(int task) const {
  if (task != active_) {
    throw ProtocolError("rehearsal-free protocol: training data of task " + std::to_string(task) +
                        " requested during stage " + std::to_string(active_));
  }
  ++train_reads_[static_cast<std::size_t>(task)];
  return train_.at(static_cast<std::size_t>(task));
}

void TaskStream::begin_stage(int task) {
  if (task <= active_ || task >= num_tasks()) {
    throw ProtocolError("task stream: cannot move from stage " + std::to_string(active_) + " to " +
                        std::to_string(task));
  }
  // Past training splits are dropped, not merely hidden.
  if (active_ >= 0) train_[static_cast<std::size_t>(active_)] = Dataset{};
  active_ = task;
}

// ---------------------------------------------------------------------------

FrozenBackbone::FrozenBackbone(BackboneConfig c, BackboneWeights w)
    : config(c), weights(std::move(w)), checksum(desire::checksum(weights)) {
  config.validate();
}

void FrozenBackbone::verify() const {
  if (desire::checksum(weights) != checksum) throw ConsistencyError("frozen backbone weights were modified");
}

IndividualResult run_individual_training(const FrozenBackbone& backbone, LoraSet adapters,
                                         const std::vector<int>& classes, const Dataset& train,
                                         const TrainingConfig& config, std::uint64_t seed, bool compute_stats) {
  config.validate();
  adapters.validate();
  if (train.size() == 0) throw ConfigError("individual training: empty task data");
  if (classes.empty()) throw ConfigError("individual training: no classes");
  std::vector<int> local(train.labels.size());
  for (std::size_t i = 0; i < local.size(); ++i) {
    const auto it = std::find(classes.begin(), classes.end(), train.labels[i]);
    if (it == classes.end()) throw ConsistencyError("individual training: label outside the task's classes");
    local[i] = static_cast<int>(it - classes.begin());
  }

  const Index d = backbone.config.model_dim;
  const Index k = static_cast<Index>(classes.size());
  IndividualResult out;
  out.classes = classes;
  out.head_weight = Matrix::Zero(k, d);
  out.head_bias = Matrix::Zero(1, k);

  std::vector<Matrix*> params;
  for (auto& ad : adapters.adapters) {
    params.push_back(&ad.a);
    params.push_back(&ad.b);
  }
  params.push_back(&out.head_weight);
  params.push_back(&out.head_bias);

  SgdMomentum opt(config.learning_rate, config.momentum);
  SeededRng rng(seed);
  std::vector<Index> order(static_cast<std::size_t>(train.size()));
  std::iota(order.begin(), order.end(), Index{0});
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    opt.set_learning_rate(cosine_anneal_lr(epoch, config.epochs, config.learning_rate));
    rng.shuffle(order);
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      Matrix x(static_cast<Index>(end - start), train.dim());
      std::vector<int> y;
      for (std::size_t i = start; i < end; ++i) {
        x.row(static_cast<Index>(i - start)) = train.inputs.row(order[i]);
        y.push_back(local[static_cast<std::size_t>(order[i])]);
      }
      Tape tape;
      const BoundBackbone net = bind_constant(tape, backbone.weights);
      std::vector<Var> vars;
      std::vector<Var> deltas;
      for (const auto& ad : adapters.adapters) {
        const Var a = tape.variable(ad.a);
        const Var b = tape.variable(ad.b);
        vars.push_back(a);
        vars.push_back(b);
        deltas.push_back(matmul(a, b));
      }
      const Var w = tape.variable(out.head_weight);
      const Var bias = tape.variable(out.head_bias);
      vars.push_back(w);
      vars.push_back(bias);
      const Var z = forward_features(tape, net, backbone.config, x, deltas);
      const Var loss = cross_entropy(add_row(matmul_transposed(z, w), bias), y);
      tape.backward(loss);
      std::vector<const Matrix*> grads;
      for (const Var& v : vars) grads.push_back(&tape.grad(v));
      opt.step(params, grads);
      loss_sum += loss.value()(0, 0);
      ++batches;
    }
    out.epoch_losses.push_back(loss_sum / batches);
  }

  if (compute_stats) {
    const Matrix features = extract_features(backbone.weights, backbone.config, train.inputs, adapters.deltas());
    for (int c : classes) {
      std::vector<Index> rows;
      for (std::size_t i = 0; i < train.labels.size(); ++i) {
        if (train.labels[i] == c) rows.push_back(static_cast<Index>(i));
      }
      out.stats.push_back(compute_class_stats(features(rows, Eigen::all), c));
    }
  }
  out.adapters = std::move(adapters);
  return out;
}

Classifier attach_head_rows(const Classifier& classifier, const IndividualResult& result) {
  Classifier out = expand_classifier(classifier, result.classes);
  const Index old_c = classifier.seen_classes();
  const Index k = static_cast<Index>(result.classes.size());
  out.weight.middleRows(old_c, k) = result.head_weight;
  out.bias.middleCols(old_c, k) = result.head_bias;
  return out;
}

// ---------------------------------------------------------------------------

MetricsReport compute_metrics(const std::vector<double>& stage_accuracies,
                              const std::vector<double>& last_task_accuracies) {
  if (stage_accuracies.empty() || stage_accuracies.size() != last_task_accuracies.size()) {
    throw ConsistencyError("metrics: need T stage accuracies and T per-task accuracies, got " +
                           std::to_string(stage_accuracies.size()) + " and " +
                           std::to_string(last_task_accuracies.size()));
  }
  MetricsReport m;
  m.stage_accuracies = stage_accuracies;
  m.last_task_accuracies = last_task_accuracies;
  const double t = static_cast<double>(stage_accuracies.size());
  m.a_last = stage_accuracies.back();
  m.avg = std::accumulate(stage_accuracies.begin(), stage_accuracies.end(), 0.0) / t;
  const double mean = std::accumulate(last_task_accuracies.begin(), last_task_accuracies.end(), 0.0) / t;
  double var = 0.0;
  for (double a : last_task_accuracies) var += (a - mean) * (a - mean);
  m.sd_acc = std::sqrt(var / t);
  m.final_task_accuracy = last_task_accuracies.back();
  m.previous_tasks_mean =
      last_task_accuracies.size() < 2
          ? std::nan("")
          : std::accumulate(last_task_accuracies.begin(), last_task_accuracies.end() - 1, 0.0) / (t - 1.0);
  return m;
}

std::map<int, double> feature_drift(const Matrix& before, const Matrix& after, const std::vector<int>& labels) {
  if (before.rows() != after.rows() || before.cols() != after.cols() ||
      before.rows() != static_cast<Index>(labels.size())) {
    throw DimensionError("feature_drift: feature sets and labels disagree");
  }
  std::map<int, std::pair<Vector, int>> acc;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto [it, fresh] = acc.try_emplace(labels[i], Vector::Zero(before.cols()), 0);
    it->second.first += (after.row(static_cast<Index>(i)) - before.row(static_cast<Index>(i))).transpose();
    ++it->second.second;
  }
  std::map<int, double> out;
  for (const auto& [c, sum] : acc) out[c] = (sum.first / sum.second).norm();
  return out;
}

void export_features(const std::filesystem::path& path, const Matrix& features, const std::vector<int>& labels,
                     int stage, const std::string& config_hash) {
  if (features.rows() != static_cast<Index>(labels.size())) throw DimensionError("export_features: label count");
  std::ostringstream os;
  os.precision(17);
  os << "# config_hash=" << config_hash << "\n";
  os << "stage,label";
  for (Index c = 0; c < features.cols(); ++c) os << ",f" << c;
  os << "\n";
  for (Index r = 0; r < features.rows(); ++r) {
    os << stage << "," << labels[static_cast<std::size_t>(r)];
    for (Index c = 0; c < features.cols(); ++c) os << "," << features(r, c);
    os << "\n";
  }
  io::write_text_atomic(path, os.str());
}

// ---------------------------------------------------------------------------

namespace {

struct VariantState {
  Variant variant;
  VariantTraits tr;
  Classifier classifier;
  std::optional<LoraSet> previous;
  std::optional<LoraSet> current;
  std::vector<LoraSet> archive;
  StatsStore store;
  std::map<int, Vector> first_means;
  RunResult result;
  int stage_peak = 0;

  int live_sets() const {
    return static_cast<int>(previous.has_value()) + static_cast<int>(current.has_value()) +
           static_cast<int>(archive.size());
  }
  void audit() {
    stage_peak = std::max(stage_peak, live_sets());
    result.peak_live_sets = std::max(result.peak_live_sets, stage_peak);
  }
};

// Uniform average of A and of B across the archived sets.
std::vector<Matrix> averaged_deltas(const std::vector<LoraSet>& archive) {
  const double w = 1.0 / static_cast<double>(archive.size());
  std::vector<Matrix> out;
  for (std::size_t s = 0; s < archive.front().adapters.size(); ++s) {
    Matrix a = Matrix::Zero(archive.front().adapters[s].a.rows(), archive.front().adapters[s].a.cols());
    Matrix b = Matrix::Zero(archive.front().adapters[s].b.rows(), archive.front().adapters[s].b.cols());
    for (const LoraSet& set : archive) {
      a += w * set.adapters[s].a;
      b += w * set.adapters[s].b;
    }
    out.push_back(a * b);
  }
  return out;
}

std::uint64_t stage_seed(const SeededRng& root, std::string_view label, int task) {
  return root.fork(label).fork(static_cast<std::uint64_t>(task)).seed();
}

}  // namespace

std::vector<RunResult> run_variants(const FrozenBackbone& backbone, const Dataset& stream_train,
                                    const Dataset& stream_test, const std::set<int>& pretrain_classes,
                                    const PipelineConfig& config, const std::vector<Variant>& variants,
                                    std::uint64_t seed, const FeatureSink& sink) {
  config.validate(backbone.config);
  backbone.verify();
  if (variants.empty()) throw ConfigError("run: no variants requested");
  const SeededRng root(seed);
  TaskStream stream(stream_train, stream_test, pretrain_classes, config.stream, root.fork("order").seed());
  const int num_tasks = stream.num_tasks();
  const int blocks = backbone.config.num_blocks;

  std::vector<VariantState> states;
  bool need_shared = false;
  for (Variant v : variants) {
    VariantState s{v, traits(v), Classifier(backbone.config.model_dim), {}, {}, {}, {}, {}, {}};
    s.result.variant = v;
    s.result.seed = seed;
    s.result.backbone_checksum = backbone.checksum;
    if (s.tr.merges) {
      // Zero-delta previous set, so the first fold simply adopts the current one.
      s.previous = init_lora(backbone.config, config.lora, root.fork("bootstrap").seed(), SetRole::Previous);
    }
    s.audit();
    need_shared = need_shared || !s.tr.sequential;
    states.push_back(std::move(s));
  }

  for (int t = 0; t < num_tasks; ++t) {
    stream.begin_stage(t);
    const std::vector<int>& classes = stream.task_classes(t);
    const std::uint64_t lora_seed = stage_seed(root, "lora", t);
    const std::uint64_t train_seed = stage_seed(root, "train", t);
    spdlog::debug("seed {} stage {} of {}", seed, t + 1, num_tasks);

    std::optional<IndividualResult> shared;
    if (need_shared) {
      shared = run_individual_training(backbone, init_lora(backbone.config, config.lora, lora_seed), classes,
                                       stream.train(t), config.training, train_seed);
    }

    // Seen-class test data for evaluation.
    Dataset seen_test;
    std::vector<std::pair<Index, Index>> task_ranges;
    for (int s = 0; s <= t; ++s) {
      task_ranges.emplace_back(seen_test.size(), stream.test(s).size());
      seen_test.append(stream.test(s));
    }

    for (VariantState& st : states) {
      st.stage_peak = st.live_sets();
      const IndividualResult* ind = nullptr;
      std::optional<IndividualResult> own;
      if (st.tr.sequential) {
        LoraSet start = st.current ? *st.current : init_lora(backbone.config, config.lora, lora_seed);
        own = run_individual_training(backbone, std::move(start), classes, stream.train(t), config.training,
                                      train_seed, false);
        ind = &*own;
        st.current = ind->adapters;
      } else {
        ind = &*shared;
        for (const ClassStats& cs : ind->stats) st.store.add(cs);
      }
      st.audit();
      st.classifier = attach_head_rows(st.classifier, *ind);
      st.result.task_deltas.push_back(ind->adapters.deltas());
      st.result.training_losses.push_back(ind->epoch_losses);
      st.result.task_classes.push_back(classes);

      std::vector<Matrix> deltas;
      if (st.tr.merges) {
        st.current = ind->adapters;
        st.audit();
        MergeCoefficients coeffs;
        if (t == 0) {
          coeffs = MergeCoefficients::uniform(blocks, 0.0, 1.0);
        } else if (st.tr.learned_coefficients) {
          std::vector<Matrix> pools;
          if (config.consolidation.merge_from_train) {
            pools.push_back(stream.train(t).inputs);
          } else {
            for (int s = 0; s <= t; ++s) pools.push_back(stream.test(s).inputs);
          }
          const MergeDataset merge_set =
              sample_merge_dataset(pools, config.consolidation.merge_dataset_size, stage_seed(root, "merge", t));
          const MergeProblem problem{&backbone.weights, &backbone.config, &*st.previous, &*st.current, &st.store,
                                     config.consolidation.temperature};
          const CoefficientFit fit =
              optimize_coefficients(problem, merge_set, config.consolidation, stage_seed(root, "drc", t));
          coeffs = fit.coefficients;
          st.result.consolidations.push_back({t, coeffs, fit.initial_loss, fit.final_loss, true});
        } else {
          const double lc = 1.0 / static_cast<double>(t + 1);
          coeffs = MergeCoefficients::uniform(blocks, 1.0 - lc, lc);
          st.result.consolidations.push_back({t, coeffs, 0.0, 0.0, false});
        }
        st.previous = consolidate(*st.previous, *st.current, coeffs);
        st.current.reset();
        deltas = st.previous->deltas();
      } else if (st.tr.archive) {
        st.archive.push_back(ind->adapters);
        st.audit();
        deltas = averaged_deltas(st.archive);
      } else {
        deltas = st.current->deltas();
      }

      if (st.tr.refine_head) {
        const PseudoFeatureBatch pseudo =
            sample_pseudo_features(st.store, config.refinement.pseudo_count, stage_seed(root, "pseudo", t));
        st.classifier = refine_classifier(st.classifier, pseudo, config.refinement, stage_seed(root, "refine", t));
      }

      // Evaluate on every seen task's test split.
      const Matrix features = extract_features(backbone.weights, backbone.config, seen_test.inputs, deltas);
      const std::vector<int> predicted = st.classifier.predict(features);
      std::vector<double> per_task;
      for (const auto& [begin, count] : task_ranges) {
        const std::vector<int> p(predicted.begin() + begin, predicted.begin() + begin + count);
        const std::vector<int> l(seen_test.labels.begin() + begin, seen_test.labels.begin() + begin + count);
        per_task.push_back(accuracy(p, l));
      }
      st.result.task_accuracy.push_back(per_task);
      st.result.metrics.stage_accuracies.push_back(accuracy(predicted, seen_test.labels));
      if (sink) sink(st.variant, seed, t, features, seen_test.labels);

      // Drift of per-class test means relative to the stage each class arrived.
      std::map<int, std::pair<Vector, int>> sums;
      for (std::size_t i = 0; i < seen_test.labels.size(); ++i) {
        auto [it, fresh] = sums.try_emplace(seen_test.labels[i], Vector::Zero(features.cols()), 0);
        it->second.first += features.row(static_cast<Index>(i)).transpose();
        ++it->second.second;
      }
      double drift = 0.0;
      std::vector<Vector> means;
      for (const auto& [c, sum] : sums) {
        const Vector mu = sum.first / sum.second;
        means.push_back(mu);
        const auto [it, fresh] = st.first_means.try_emplace(c, mu);
        drift += (mu - it->second).norm();
      }
      st.result.mean_feature_drift.push_back(drift / static_cast<double>(sums.size()));
      if (t == num_tasks - 1) {
        double sep = 0.0;
        int pairs = 0;
        for (std::size_t i = 0; i < means.size(); ++i) {
          for (std::size_t j = i + 1; j < means.size(); ++j, ++pairs) sep += (means[i] - means[j]).norm();
        }
        st.result.mean_class_separation = pairs ? sep / pairs : 0.0;
      }
      st.result.live_sets_per_stage.push_back(st.stage_peak);
    }
    backbone.verify();
  }

  std::vector<RunResult> out;
  for (VariantState& st : states) {
    std::vector<double> last = st.result.task_accuracy.back();
    st.result.metrics = compute_metrics(st.result.metrics.stage_accuracies, last);
    out.push_back(std::move(st.result));
  }
  return out;
}

RunResult run_desire(const FrozenBackbone& backbone, const Dataset& stream_train, const Dataset& stream_test,
                     const std::set<int>& pretrain_classes, const PipelineConfig& config, std::uint64_t seed) {
  return run_variants(backbone, stream_train, stream_test, pretrain_classes, config, {Variant::DesireFull}, seed)
      .front();
}

RunResult run_baseline(const FrozenBackbone& backbone, const Dataset& stream_train, const Dataset& stream_test,
                       const std::set<int>& pretrain_classes, const PipelineConfig& config, Variant variant,
                       std::uint64_t seed) {
  return run_variants(backbone, stream_train, stream_test, pretrain_classes, config, {variant}, seed).front();
}

}  // namespace desire
