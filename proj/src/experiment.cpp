#include "desire/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "desire/io.hpp"

namespace desire {

using nlohmann::json;

std::string format_number(double value) {
  if (std::isnan(value)) return "nan";
  return fmt::format("{}", value);
}

namespace {

// Reads the keys of one JSON object and rejects anything left over.
class ObjectReader {
 public:
  ObjectReader(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) throw ConfigError("config: '" + path_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    if (!doc_.contains(key)) return;
    seen_.insert(key);
    try {
      out = doc_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config: '" + path_ + "." + key + "': " + e.what());
    }
  }

  const json* child(const char* key) {
    if (!doc_.contains(key)) return nullptr;
    seen_.insert(key);
    return &doc_.at(key);
  }

  void finish() const {
    for (const auto& [key, value] : doc_.items()) {
      if (!seen_.contains(key)) throw ConfigError("config: unknown key '" + path_ + "." + key + "'");
    }
  }

 private:
  const json& doc_;
  std::string path_;
  std::set<std::string> seen_;
};

json to_json(const BackboneConfig& c) {
  return {{"num_blocks", c.num_blocks}, {"model_dim", c.model_dim}, {"num_heads", c.num_heads},
          {"mlp_hidden", c.mlp_hidden}, {"input_dim", c.input_dim}, {"num_tokens", c.num_tokens}};
}

void read(const json& doc, BackboneConfig& c) {
  ObjectReader r(doc, "backbone");
  r.get("num_blocks", c.num_blocks);
  r.get("model_dim", c.model_dim);
  r.get("num_heads", c.num_heads);
  r.get("mlp_hidden", c.mlp_hidden);
  r.get("input_dim", c.input_dim);
  r.get("num_tokens", c.num_tokens);
  r.finish();
}

json to_json(const PretrainConfig& c) {
  return {{"epochs", c.epochs},         {"learning_rate", c.learning_rate}, {"momentum", c.momentum},
          {"batch_size", c.batch_size}, {"seed", c.seed},                   {"min_accuracy", c.min_accuracy}};
}

void read(const json& doc, PretrainConfig& c) {
  ObjectReader r(doc, "pretrain");
  r.get("epochs", c.epochs);
  r.get("learning_rate", c.learning_rate);
  r.get("momentum", c.momentum);
  r.get("batch_size", c.batch_size);
  r.get("seed", c.seed);
  r.get("min_accuracy", c.min_accuracy);
  r.finish();
}

json to_json(const PipelineConfig& c) {
  return {
      {"lora", {{"rank", c.lora.rank}, {"init_std", c.lora.init_std}}},
      {"training",
       {{"epochs", c.training.epochs},
        {"learning_rate", c.training.learning_rate},
        {"momentum", c.training.momentum},
        {"batch_size", c.training.batch_size}}},
      {"consolidation",
       {{"epochs", c.consolidation.epochs},
        {"learning_rate", c.consolidation.learning_rate},
        {"momentum", c.consolidation.momentum},
        {"batch_size", c.consolidation.batch_size},
        {"temperature", c.consolidation.temperature},
        {"lambda_prev_init", c.consolidation.lambda_prev_init},
        {"lambda_curr_init", c.consolidation.lambda_curr_init},
        {"merge_dataset_size", c.consolidation.merge_dataset_size},
        {"merge_from_train", c.consolidation.merge_from_train}}},
      {"refinement",
       {{"epochs", c.refinement.epochs},
        {"learning_rate", c.refinement.learning_rate},
        {"momentum", c.refinement.momentum},
        {"batch_size", c.refinement.batch_size},
        {"pseudo_count", c.refinement.pseudo_count}}},
      {"stream",
       {{"num_tasks", c.stream.num_tasks},
        {"classes_per_task", c.stream.classes_per_task},
        {"shuffle_class_order", c.stream.shuffle_class_order}}},
  };
}

void read_section(ObjectReader& parent, const char* key, auto&& fill) {
  if (const json* doc = parent.child(key)) {
    ObjectReader r(*doc, key);
    fill(r);
    r.finish();
  }
}

}  // namespace

json to_json(const SyntheticSpec& s) {
  return {{"num_classes", s.num_classes},
          {"pretrain_classes", s.pretrain_classes},
          {"input_dim", s.input_dim},
          {"latent_dim", s.latent_dim},
          {"samples_per_class", s.samples_per_class},
          {"train_fraction", s.train_fraction},
          {"warp_depth", s.warp_depth},
          {"warp_strength", s.warp_strength},
          {"class_spread", s.class_spread},
          {"class_scale", s.class_scale},
          {"noise", s.noise},
          {"seed", s.seed}};
}

SyntheticSpec synthetic_from_json(const json& doc) {
  SyntheticSpec s;
  ObjectReader r(doc, "generator");
  r.get("num_classes", s.num_classes);
  r.get("pretrain_classes", s.pretrain_classes);
  r.get("input_dim", s.input_dim);
  r.get("latent_dim", s.latent_dim);
  r.get("samples_per_class", s.samples_per_class);
  r.get("train_fraction", s.train_fraction);
  r.get("warp_depth", s.warp_depth);
  r.get("warp_strength", s.warp_strength);
  r.get("class_spread", s.class_spread);
  r.get("class_scale", s.class_scale);
  r.get("noise", s.noise);
  r.get("seed", s.seed);
  r.finish();
  return s;
}

void ExperimentConfig::validate() const {
  backbone.validate();
  pipeline.validate(backbone);
  if (seeds.empty()) throw ConfigError("config: seeds must be non-empty");
  if (pretrain.epochs < 1 || pretrain.batch_size < 1) throw ConfigError("config: pretrain epochs/batch must be >= 1");
}

json to_json(const ExperimentConfig& c) {
  json doc = to_json(c.pipeline);
  doc["data_dir"] = c.data_dir;
  doc["backbone_checkpoint"] = c.backbone_checkpoint;
  doc["backbone"] = to_json(c.backbone);
  doc["pretrain"] = to_json(c.pretrain);
  doc["pretrain_class_ids"] = c.pretrain_class_ids;
  doc["variant"] = to_string(c.variant);
  doc["seeds"] = c.seeds;
  return doc;
}

ExperimentConfig experiment_from_json(const json& doc) {
  ExperimentConfig c;
  ObjectReader r(doc, "config");
  r.get("data_dir", c.data_dir);
  r.get("backbone_checkpoint", c.backbone_checkpoint);
  if (const json* b = r.child("backbone")) read(*b, c.backbone);
  if (const json* p = r.child("pretrain")) read(*p, c.pretrain);
  r.get("pretrain_class_ids", c.pretrain_class_ids);
  auto& p = c.pipeline;
  read_section(r, "lora", [&](ObjectReader& s) {
    s.get("rank", p.lora.rank);
    s.get("init_std", p.lora.init_std);
  });
  read_section(r, "training", [&](ObjectReader& s) {
    s.get("epochs", p.training.epochs);
    s.get("learning_rate", p.training.learning_rate);
    s.get("momentum", p.training.momentum);
    s.get("batch_size", p.training.batch_size);
  });
  read_section(r, "consolidation", [&](ObjectReader& s) {
    s.get("epochs", p.consolidation.epochs);
    s.get("learning_rate", p.consolidation.learning_rate);
    s.get("momentum", p.consolidation.momentum);
    s.get("batch_size", p.consolidation.batch_size);
    s.get("temperature", p.consolidation.temperature);
    s.get("lambda_prev_init", p.consolidation.lambda_prev_init);
    s.get("lambda_curr_init", p.consolidation.lambda_curr_init);
    s.get("merge_dataset_size", p.consolidation.merge_dataset_size);
    s.get("merge_from_train", p.consolidation.merge_from_train);
  });
  read_section(r, "refinement", [&](ObjectReader& s) {
    s.get("epochs", p.refinement.epochs);
    s.get("learning_rate", p.refinement.learning_rate);
    s.get("momentum", p.refinement.momentum);
    s.get("batch_size", p.refinement.batch_size);
    s.get("pseudo_count", p.refinement.pseudo_count);
  });
  read_section(r, "stream", [&](ObjectReader& s) {
    s.get("num_tasks", p.stream.num_tasks);
    s.get("classes_per_task", p.stream.classes_per_task);
    s.get("shuffle_class_order", p.stream.shuffle_class_order);
  });
  std::string variant = to_string(c.variant);
  r.get("variant", variant);
  c.variant = parse_variant(variant);
  r.get("seeds", c.seeds);
  r.finish();
  c.validate();
  return c;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  const std::vector<unsigned char> bytes = io::read_file(path);
  json doc;
  try {
    doc = json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return experiment_from_json(doc);
}

std::string config_hash(const ExperimentConfig& config) {
  const std::string canonical = to_json(config).dump();
  return hex64(fnv1a(canonical.data(), canonical.size()));
}

// ---------------------------------------------------------------------------

namespace {

constexpr const char* kSplits[] = {"pretrain_train", "pretrain_test", "stream_train", "stream_test"};

std::string file_checksum(const std::vector<unsigned char>& bytes) { return hex64(fnv1a(bytes.data(), bytes.size())); }

}  // namespace

json generate_synthetic_stream(const SyntheticSpec& spec, const std::filesystem::path& dir) {
  const SyntheticData data = generate_synthetic(spec);
  const Dataset* splits[] = {&data.pretrain_train, &data.pretrain_test, &data.stream_train, &data.stream_test};
  json manifest;
  manifest["generator"] = to_json(spec);
  manifest["pretrain_class_ids"] = data.pretrain_class_ids;
  manifest["stream_class_ids"] = data.stream_class_ids;
  manifest["num_classes"] = spec.num_classes;
  manifest["train_per_class"] = spec.train_per_class();
  manifest["test_per_class"] = spec.samples_per_class - spec.train_per_class();
  for (std::size_t i = 0; i < 4; ++i) {
    const std::vector<unsigned char> bytes = encode_dataset(*splits[i]);
    const std::string file = std::string(kSplits[i]) + ".dsr1";
    io::write_file_atomic(dir / file, bytes);
    manifest["files"][kSplits[i]] = {{"path", file}, {"rows", splits[i]->size()}, {"checksum", file_checksum(bytes)}};
  }
  io::write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

DataBundle load_data(const std::filesystem::path& dir) {
  const std::vector<unsigned char> raw = io::read_file(dir / "manifest.json");
  json manifest;
  try {
    manifest = json::parse(raw.begin(), raw.end());
  } catch (const json::parse_error& e) {
    throw IoError("manifest: " + std::string(e.what()));
  }
  DataBundle out;
  Dataset* splits[] = {&out.pretrain_train, &out.pretrain_test, &out.stream_train, &out.stream_test};
  std::string combined;
  try {
    for (std::size_t i = 0; i < 4; ++i) {
      const json& entry = manifest.at("files").at(kSplits[i]);
      const std::vector<unsigned char> bytes = io::read_file(dir / entry.at("path").get<std::string>());
      const std::string sum = file_checksum(bytes);
      if (sum != entry.at("checksum").get<std::string>()) {
        throw IoError("dataset " + std::string(kSplits[i]) + ": checksum mismatch");
      }
      *splits[i] = decode_dataset(bytes);
      combined += sum;
    }
    for (int c : manifest.at("pretrain_class_ids").get<std::vector<int>>()) out.pretrain_classes.insert(c);
    for (int c : manifest.at("stream_class_ids").get<std::vector<int>>()) out.stream_classes.insert(c);
  } catch (const json::exception& e) {
    throw IoError("manifest: " + std::string(e.what()));
  }
  out.data_hash = hex64(fnv1a(combined.data(), combined.size()));
  return out;
}

// ---------------------------------------------------------------------------

std::string stage_report_csv(const RunResult& run, const std::string& hash) {
  std::ostringstream os;
  os << "# config_hash=" << hash << "\n";
  os << "variant,seed,stage,seen_classes,accuracy,task_accuracies,mean_feature_drift,live_sets\n";
  int seen = 0;
  for (std::size_t t = 0; t < run.task_accuracy.size(); ++t) {
    seen += static_cast<int>(run.task_classes[t].size());
    std::string tasks;
    for (double a : run.task_accuracy[t]) tasks += (tasks.empty() ? "" : ";") + format_number(a);
    os << to_string(run.variant) << "," << run.seed << "," << t + 1 << "," << seen << ","
       << format_number(run.metrics.stage_accuracies[t]) << "," << tasks << ","
       << format_number(run.mean_feature_drift[t]) << "," << run.live_sets_per_stage[t] << "\n";
  }
  return os.str();
}

namespace {

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json metrics_json(const MetricsReport& m) {
  return {{"A_last", m.a_last},
          {"Avg", m.avg},
          {"SD_Acc", m.sd_acc},
          {"stage_accuracies", m.stage_accuracies},
          {"last_task_accuracies", m.last_task_accuracies},
          {"final_task_accuracy", m.final_task_accuracy},
          {"previous_tasks_mean", number_or_null(m.previous_tasks_mean)}};
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd out;
  if (v.empty()) return out;
  out.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - out.mean) * (x - out.mean);
  out.std = std::sqrt(var / static_cast<double>(v.size()));
  return out;
}

}  // namespace

json run_summary(const RunResult& run, const std::string& hash) {
  json doc;
  doc["config_hash"] = hash;
  doc["variant"] = to_string(run.variant);
  doc["seed"] = run.seed;
  doc["metrics"] = metrics_json(run.metrics);
  doc["task_classes"] = run.task_classes;
  doc["task_accuracy"] = run.task_accuracy;
  doc["mean_feature_drift"] = run.mean_feature_drift;
  doc["mean_class_separation"] = run.mean_class_separation;
  doc["peak_live_sets"] = run.peak_live_sets;
  doc["live_sets_per_stage"] = run.live_sets_per_stage;
  doc["backbone_checksum"] = hex64(run.backbone_checksum);
  json cons = json::array();
  for (const ConsolidationRecord& c : run.consolidations) {
    cons.push_back({{"stage", c.task + 1},
                    {"learned", c.learned},
                    {"initial_loss", c.initial_loss},
                    {"final_loss", c.final_loss},
                    {"coefficients", c.coefficients.values()}});
  }
  doc["consolidations"] = cons;
  doc["training_losses"] = run.training_losses;
  if (run.task_deltas.size() >= 2) {
    const CosineReport cos = cross_task_cosine(run.task_deltas);
    std::vector<std::vector<double>> rows;
    for (Index i = 0; i < cos.similarity.rows(); ++i) {
      rows.emplace_back(cos.similarity.row(i).begin(), cos.similarity.row(i).end());
    }
    doc["delta_cosine"] = {{"matrix", rows}, {"mean_abs_off_diagonal", number_or_null(cos.mean_abs_off_diagonal())}};
  }
  return doc;
}

json aggregate_summary(const std::vector<RunResult>& runs, const std::string& hash) {
  json doc;
  doc["config_hash"] = hash;
  std::map<std::string, std::vector<const RunResult*>> by_variant;
  for (const RunResult& r : runs) by_variant[to_string(r.variant)].push_back(&r);
  for (const auto& [name, list] : by_variant) {
    std::vector<double> a_last, avg, sd;
    std::vector<std::uint64_t> seeds;
    for (const RunResult* r : list) {
      a_last.push_back(r->metrics.a_last);
      avg.push_back(r->metrics.avg);
      sd.push_back(r->metrics.sd_acc);
      seeds.push_back(r->seed);
    }
    const auto [al_m, al_s] = mean_std(a_last);
    const auto [avg_m, avg_s] = mean_std(avg);
    const auto [sd_m, sd_s] = mean_std(sd);
    doc["variants"][name] = {{"seeds", seeds},
                             {"A_last", {{"mean", al_m}, {"std", al_s}, {"per_seed", a_last}}},
                             {"Avg", {{"mean", avg_m}, {"std", avg_s}, {"per_seed", avg}}},
                             {"SD_Acc", {{"mean", sd_m}, {"std", sd_s}, {"per_seed", sd}}}};
  }
  return doc;
}

std::string aggregate_csv(const std::vector<RunResult>& runs, const std::string& hash) {
  const json agg = aggregate_summary(runs, hash);
  std::ostringstream os;
  os << "# config_hash=" << hash << "\n";
  os << "variant,seeds,A_last_mean,A_last_std,Avg_mean,Avg_std,SD_Acc_mean,SD_Acc_std\n";
  for (const auto& [name, v] : agg.at("variants").items()) {
    os << name << "," << v.at("seeds").size();
    for (const char* key : {"A_last", "Avg", "SD_Acc"}) {
      os << "," << format_number(v.at(key).at("mean").get<double>()) << ","
         << format_number(v.at(key).at("std").get<double>());
    }
    os << "\n";
  }
  return os.str();
}

std::string coefficient_csv(const std::vector<RunResult>& runs, const std::string& hash, bool learned_only) {
  std::ostringstream os;
  os << "# config_hash=" << hash << "\n";
  os << "variant,seed,task,block,projection,matrix,role,value\n";
  for (const RunResult& r : runs) {
    for (const ConsolidationRecord& c : r.consolidations) {
      if (learned_only && !c.learned) continue;
      const int blocks = c.coefficients.num_blocks();
      for (int b = 0; b < blocks; ++b) {
        for (Projection p : {Projection::Q, Projection::V}) {
          for (FactorMatrix m : {FactorMatrix::A, FactorMatrix::B}) {
            for (SetRole role : {SetRole::Previous, SetRole::Current}) {
              os << to_string(r.variant) << "," << r.seed << "," << c.task + 1 << "," << b + 1 << ","
                 << to_string(p) << "," << to_string(m) << "," << to_string(role) << ","
                 << format_number(c.coefficients.at(b, p, m, role)) << "\n";
            }
          }
        }
      }
    }
  }
  return os.str();
}

std::string ablation_csv(const std::vector<RunResult>& runs, const std::string& hash, const std::string& data_hash) {
  std::ostringstream os;
  os << "# config_hash=" << hash << "\n";
  os << "variant,seed,A_last,Avg,SD_Acc,final_task_accuracy,previous_tasks_mean,peak_live_sets,data_hash,"
        "backbone_checksum\n";
  for (Variant v : all_variants()) {
    for (const RunResult& r : runs) {
      if (r.variant != v) continue;
      os << to_string(v) << "," << r.seed << "," << format_number(r.metrics.a_last) << ","
         << format_number(r.metrics.avg) << "," << format_number(r.metrics.sd_acc) << ","
         << format_number(r.metrics.final_task_accuracy) << "," << format_number(r.metrics.previous_tasks_mean)
         << "," << r.peak_live_sets << "," << data_hash << "," << hex64(r.backbone_checksum) << "\n";
    }
  }
  return os.str();
}

}  // namespace desire
