#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "desire/pipeline.hpp"
#include "desire/synthetic.hpp"

namespace desire {

/// Everything a run needs. Serializes to a JSON document with every key
/// spelled out; parsing rejects keys it does not know.
struct ExperimentConfig {
  std::string data_dir = "data";
  std::string backbone_checkpoint = "backbone.dsrb";
  BackboneConfig backbone;
  PretrainConfig pretrain;
  /// Classes to pretrain on; empty means the data manifest's pretraining classes.
  std::vector<int> pretrain_class_ids;
  PipelineConfig pipeline;
  Variant variant = Variant::DesireFull;
  std::vector<std::uint64_t> seeds = {0, 1, 2};

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig experiment_from_json(const nlohmann::json& doc);
ExperimentConfig load_experiment(const std::filesystem::path& path);
/// 16 hex digits of FNV-1a over the canonical (sorted-key) JSON.
std::string config_hash(const ExperimentConfig& config);

nlohmann::json to_json(const SyntheticSpec& spec);
SyntheticSpec synthetic_from_json(const nlohmann::json& doc);

/// The four splits of a generated stream plus the class partition.
struct DataBundle {
  Dataset pretrain_train;
  Dataset pretrain_test;
  Dataset stream_train;
  Dataset stream_test;
  std::set<int> pretrain_classes;
  std::set<int> stream_classes;
  /// Hash over the split checksums, identical for identical data.
  std::string data_hash;
};

/// Writes pretrain/stream x train/test DSR1 files and manifest.json (generator
/// parameters, class ids, sample counts and per-file checksums) into `dir`.
nlohmann::json generate_synthetic_stream(const SyntheticSpec& spec, const std::filesystem::path& dir);
/// Loads a generated directory and verifies every checksum in the manifest.
DataBundle load_data(const std::filesystem::path& dir);

// Report documents. Every file starts with (or contains) the config hash.
std::string stage_report_csv(const RunResult& run, const std::string& hash);
nlohmann::json run_summary(const RunResult& run, const std::string& hash);
nlohmann::json aggregate_summary(const std::vector<RunResult>& runs, const std::string& hash);
std::string aggregate_csv(const std::vector<RunResult>& runs, const std::string& hash);
/// seed,task,block,projection,matrix,role,value for every consolidation record.
std::string coefficient_csv(const std::vector<RunResult>& runs, const std::string& hash, bool learned_only);
/// One row per (variant, seed): A_last and Avg with the shared data and backbone hashes.
std::string ablation_csv(const std::vector<RunResult>& runs, const std::string& hash, const std::string& data_hash);

/// Stable text for a double (shortest round-trip form).
std::string format_number(double value);

}  // namespace desire
