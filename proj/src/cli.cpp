#include "desire/cli.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <cstdlib>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "desire/experiment.hpp"
#include "desire/io.hpp"

namespace desire {

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfiguration: return kExitUsage;
    case ErrorKind::kIo: return kExitIo;
    case ErrorKind::kLeakage:
    case ErrorKind::kProtocol: return kExitProtocol;
    case ErrorKind::kNumeric:
    case ErrorKind::kDecomposition:
    case ErrorKind::kConditioning: return kExitNumeric;
    default: return kExitFailure;
  }
}

int worker_threads() {
  const char* env = std::getenv("DESIRE_THREADS");
  if (!env || !*env) return 1;
  try {
    return std::max(1, std::stoi(env));
  } catch (const std::exception&) {
    throw ConfigError(std::string("DESIRE_THREADS must be a positive integer, got '") + env + "'");
  }
}

namespace {

namespace fs = std::filesystem;

void setup_logging() {
  static std::once_flag once;
  std::call_once(once, [] {
    auto logger = spdlog::stderr_color_mt("desire");
    logger->set_pattern("[%l] %v");
    spdlog::set_default_logger(logger);
    if (const char* level = std::getenv("DESIRE_LOG")) spdlog::set_level(spdlog::level::from_str(level));
  });
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      seeds.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("--seeds: '" + item + "' is not a non-negative integer");
    }
  }
  if (seeds.empty()) throw ConfigError("--seeds: no seeds given");
  return seeds;
}

ExperimentConfig resolve_config(const std::string& path) {
  return path.empty() ? ExperimentConfig{} : load_experiment(path);
}

FrozenBackbone load_frozen(const ExperimentConfig& config) {
  auto [bc, weights] = load_backbone(config.backbone_checkpoint);
  if (!(bc == config.backbone)) {
    throw ConfigError("backbone checkpoint " + config.backbone_checkpoint +
                      " was built for a different backbone configuration");
  }
  return FrozenBackbone(bc, std::move(weights));
}

// Runs `variants` for every seed on up to DESIRE_THREADS workers. Failed seeds
// are reported and skipped; the returned code is the first failure's.
int run_seeds(const ExperimentConfig& config, const std::vector<Variant>& variants, const FrozenBackbone& backbone,
              const DataBundle& data, const FeatureSink& sink, std::vector<RunResult>& results) {
  const std::size_t n = config.seeds.size();
  std::vector<std::vector<RunResult>> per_seed(n);
  std::vector<int> codes(n, kExitOk);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      const std::uint64_t seed = config.seeds[i];
      try {
        spdlog::info("seed {}: starting", seed);
        per_seed[i] = run_variants(backbone, data.stream_train, data.stream_test, data.pretrain_classes,
                                   config.pipeline, variants, seed, sink);
        for (const RunResult& r : per_seed[i]) {
          spdlog::info("seed {} {}: A_last {:.4f} Avg {:.4f}", seed, to_string(r.variant), r.metrics.a_last,
                       r.metrics.avg);
        }
      } catch (const Error& e) {
        spdlog::error("seed {} failed: {}", seed, e.what());
        codes[i] = exit_code_for(e.kind());
      } catch (const std::exception& e) {
        spdlog::error("seed {} failed: {}", seed, e.what());
        codes[i] = kExitFailure;
      }
    }
  };
  const int threads = std::min<int>(worker_threads(), static_cast<int>(n));
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();

  int code = kExitOk;
  for (std::size_t i = 0; i < n; ++i) {
    for (RunResult& r : per_seed[i]) results.push_back(std::move(r));
    if (code == kExitOk && codes[i] != kExitOk) code = codes[i];
  }
  return code;
}

void write_config(const fs::path& out, const ExperimentConfig& config, const std::string& hash) {
  nlohmann::json doc = to_json(config);
  doc["config_hash"] = hash;
  io::write_text_atomic(out / "config.json", doc.dump(2) + "\n");
}

int cmd_gen_data(const fs::path& out, const SyntheticSpec& spec) {
  spec.validate();
  const nlohmann::json manifest = generate_synthetic_stream(spec, out);
  std::cout << "wrote " << out.string() << ": " << spec.num_classes << " classes ("
            << manifest.at("pretrain_class_ids").size() << " pretrain, " << manifest.at("stream_class_ids").size()
            << " stream)\n";
  for (const auto& [name, entry] : manifest.at("files").items()) {
    std::cout << "  " << name << " rows=" << entry.at("rows") << " checksum=" << entry.at("checksum").get<std::string>()
              << "\n";
  }
  return kExitOk;
}

int cmd_pretrain(ExperimentConfig config, const std::string& data_dir, const std::string& out) {
  if (!data_dir.empty()) config.data_dir = data_dir;
  if (!out.empty()) config.backbone_checkpoint = out;
  const DataBundle data = load_data(config.data_dir);
  Dataset train = data.pretrain_train;
  Dataset heldout = data.pretrain_test;
  if (!config.pretrain_class_ids.empty()) {
    const std::set<int> keep(config.pretrain_class_ids.begin(), config.pretrain_class_ids.end());
    train = data.pretrain_train.filter(keep);
    train.append(data.stream_train.filter(keep));
    heldout = data.pretrain_test.filter(keep);
    heldout.append(data.stream_test.filter(keep));
  }
  const PretrainResult result =
      pretrain_backbone(train, heldout, data.stream_classes, config.backbone, config.pretrain);
  save_backbone(config.backbone_checkpoint, config.backbone, result.weights);
  const auto [bc, reloaded] = load_backbone(config.backbone_checkpoint);
  if (checksum(reloaded) != checksum(result.weights) || !(bc == config.backbone)) {
    throw IoError("backbone checkpoint did not read back identically");
  }
  std::cout << "pretrain held-out accuracy " << format_number(result.heldout_accuracy) << "\n";
  std::cout << "backbone checksum " << hex64(checksum(result.weights)) << " -> " << config.backbone_checkpoint << "\n";
  return kExitOk;
}

struct RunFlags {
  std::string data_dir;
  std::string backbone;
  std::string variant;
  std::string seeds;
  std::string out;
  bool export_features = false;
};

void apply_common(ExperimentConfig& config, const RunFlags& flags) {
  if (!flags.data_dir.empty()) config.data_dir = flags.data_dir;
  if (!flags.backbone.empty()) config.backbone_checkpoint = flags.backbone;
  if (!flags.seeds.empty()) config.seeds = parse_seeds(flags.seeds);
}

int cmd_run(ExperimentConfig config, const RunFlags& flags) {
  apply_common(config, flags);
  if (!flags.variant.empty()) config.variant = parse_variant(flags.variant);
  config.validate();
  const std::string hash = config_hash(config);
  const FrozenBackbone backbone = load_frozen(config);
  const DataBundle data = load_data(config.data_dir);
  const fs::path out = flags.out;
  fs::create_directories(out);
  write_config(out, config, hash);

  FeatureSink sink;
  if (flags.export_features) {
    sink = [&](Variant v, std::uint64_t seed, int stage, const Matrix& f, const std::vector<int>& labels) {
      export_features(out / ("features_" + to_string(v) + "_seed" + std::to_string(seed) + "_stage" +
                             std::to_string(stage + 1) + ".csv"),
                      f, labels, stage + 1, hash);
    };
  }

  std::vector<RunResult> results;
  const int code = run_seeds(config, {config.variant}, backbone, data, sink, results);
  const std::string name = to_string(config.variant);
  for (const RunResult& r : results) {
    const std::string stem = name + "_seed" + std::to_string(r.seed);
    io::write_text_atomic(out / (stem + ".csv"), stage_report_csv(r, hash));
    io::write_text_atomic(out / (stem + ".json"), run_summary(r, hash).dump(2) + "\n");
    if (traits(config.variant).merges) {
      io::write_text_atomic(out / ("coefficients_" + stem + ".csv"), coefficient_csv({r}, hash, false));
    }
  }
  if (!results.empty()) {
    io::write_text_atomic(out / (name + "_aggregate.json"), aggregate_summary(results, hash).dump(2) + "\n");
    io::write_text_atomic(out / (name + "_aggregate.csv"), aggregate_csv(results, hash));
  }
  for (const RunResult& r : results) {
    std::cout << name << " seed " << r.seed << ": A_last " << format_number(r.metrics.a_last) << " Avg "
              << format_number(r.metrics.avg) << " SD(Acc) " << format_number(r.metrics.sd_acc) << "\n";
  }
  return code;
}

int cmd_ablate(ExperimentConfig config, const RunFlags& flags) {
  apply_common(config, flags);
  config.validate();
  const std::string hash = config_hash(config);
  const FrozenBackbone backbone = load_frozen(config);
  const DataBundle data = load_data(config.data_dir);
  const fs::path out = flags.out;
  fs::create_directories(out);
  write_config(out, config, hash);

  const std::vector<Variant> variants(all_variants().begin(), all_variants().end());
  std::vector<RunResult> results;
  const int code = run_seeds(config, variants, backbone, data, {}, results);
  io::write_text_atomic(out / "ablation.csv", ablation_csv(results, hash, data.data_hash));
  std::vector<RunResult> full;
  for (const RunResult& r : results) {
    if (r.variant == Variant::DesireFull) full.push_back(r);
  }
  io::write_text_atomic(out / "coefficients.csv", coefficient_csv(full, hash, true));
  io::write_text_atomic(out / "ablation_summary.json", aggregate_summary(results, hash).dump(2) + "\n");
  std::cout << aggregate_csv(results, hash);
  return code;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  setup_logging();
  CLI::App app{"Continual LoRA merging with dual calibration on a synthetic class-incremental stream", "desire"};
  app.require_subcommand(1);

  SyntheticSpec spec;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic stream and its manifest");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--classes", spec.num_classes, "Total classes (pretrain + stream)");
  gen->add_option("--pretrain-classes", spec.pretrain_classes, "Classes reserved for pretraining");
  gen->add_option("--dim", spec.input_dim, "Input dimension");
  gen->add_option("--samples-per-class", spec.samples_per_class, "Samples per class (train + test)");
  gen->add_option("--warp-depth", spec.warp_depth, "Layers of the shared nonlinear warp");
  gen->add_option("--seed", spec.seed, "Generator seed");

  std::string config_path;
  std::string data_dir;
  std::string pretrain_out;
  auto* pre = app.add_subcommand("pretrain", "Pretrain and freeze the backbone on the pretraining classes");
  pre->add_option("--config", config_path, "Experiment config (JSON)");
  pre->add_option("--data", data_dir, "Data directory from gen-data");
  pre->add_option("--out", pretrain_out, "Backbone checkpoint path");

  RunFlags run_flags;
  auto* run = app.add_subcommand("run", "Run one variant over the configured seeds");
  run->add_option("--config", config_path, "Experiment config (JSON)");
  run->add_option("--variant", run_flags.variant,
                  "desire_full, baseline_merge, baseline_plus_drc, baseline_plus_dbr, seq_lora or weight_average");
  run->add_option("--seeds", run_flags.seeds, "Comma-separated seeds");
  run->add_option("--out", run_flags.out, "Report directory")->required();
  run->add_option("--data", run_flags.data_dir, "Data directory (overrides config)");
  run->add_option("--backbone", run_flags.backbone, "Backbone checkpoint (overrides config)");
  run->add_flag("--export-features", run_flags.export_features, "Write per-stage feature CSVs");

  RunFlags ablate_flags;
  auto* ablate = app.add_subcommand("ablate", "Run all six variants over shared seeds");
  ablate->add_option("--config", config_path, "Experiment config (JSON)");
  ablate->add_option("--seeds", ablate_flags.seeds, "Comma-separated seeds");
  ablate->add_option("--out", ablate_flags.out, "Report directory")->required();
  ablate->add_option("--data", ablate_flags.data_dir, "Data directory (overrides config)");
  ablate->add_option("--backbone", ablate_flags.backbone, "Backbone checkpoint (overrides config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(gen_out, spec);
    if (*pre) return cmd_pretrain(resolve_config(config_path), data_dir, pretrain_out);
    if (*run) return cmd_run(resolve_config(config_path), run_flags);
    if (*ablate) return cmd_ablate(resolve_config(config_path), ablate_flags);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("desire");
  for (const std::string& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace desire
