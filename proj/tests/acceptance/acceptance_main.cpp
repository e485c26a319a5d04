// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cstring>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "desire/cli.hpp"
#include "desire/consolidation.hpp"
#include "desire/experiment.hpp"
#include "desire/io.hpp"
#include "desire/lora.hpp"
#include "desire/numerics/rng.hpp"
#include "desire/pipeline.hpp"
#include "desire/refinement.hpp"
#include "desire/runtime.hpp"
#include "desire/stats.hpp"
#include "desire/synthetic.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"

using namespace desire;
namespace fs = std::filesystem;
using test_support::gradcheck;
using test_support::small_backbone;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Desk data plus a pretrained backbone, built once and shared.
struct Desk {
  SyntheticData data;
  std::set<int> pretrain;
  std::set<int> stream;
  std::optional<FrozenBackbone> backbone;
  double setup_seconds = 0.0;
};

Desk make_desk(const SyntheticSpec& spec) {
  const auto t0 = Clock::now();
  Desk d;
  d.data = generate_synthetic(spec);
  d.pretrain = {d.data.pretrain_class_ids.begin(), d.data.pretrain_class_ids.end()};
  d.stream = {d.data.stream_class_ids.begin(), d.data.stream_class_ids.end()};
  const BackboneConfig cfg;
  const PretrainResult r = pretrain_backbone(d.data.pretrain_train, d.data.pretrain_test, d.stream, cfg, PretrainConfig{});
  d.backbone.emplace(cfg, r.weights);
  d.setup_seconds = seconds_since(t0);
  spdlog::info("desk backbone: {} classes, held-out accuracy {:.3f}, {:.1f} s", spec.num_classes,
               r.heldout_accuracy, d.setup_seconds);
  return d;
}

LoraSet trained_like(const BackboneConfig& cfg, std::uint64_t seed, SetRole role) {
  LoraSet set = init_lora(cfg, LoraConfig{2, 0.3}, seed, role);
  SeededRng rng(seed + 77);
  for (LoraAdapter& ad : set.adapters) ad.b = rng.normal_matrix(ad.b.rows(), ad.b.cols(), 0.3);
  return set;
}

/// Two-block toy merge problem with `classes` shifted clusters.
struct Toy {
  BackboneConfig cfg = small_backbone();
  BackboneWeights weights;
  LoraSet previous;
  LoraSet current;
  StatsStore store;
  Matrix inputs;

  explicit Toy(int classes, std::uint64_t seed = 0) {
    weights = init_backbone(cfg, seed);
    previous = trained_like(cfg, seed + 1, SetRole::Previous);
    current = trained_like(cfg, seed + 2, SetRole::Current);
    SeededRng rng(seed + 3);
    inputs.resize(6 * classes, cfg.input_dim);
    for (int k = 0; k < classes; ++k) {
      Matrix x = rng.normal_matrix(30, cfg.input_dim);
      x.array() += 1.5 * (k - 0.5 * (classes - 1));
      x.col(k % cfg.input_dim).array() += 2.0;
      store.add(compute_class_stats(extract_features(weights, cfg, x, (k % 2 ? current : previous).deltas()), k));
      inputs.middleRows(6 * k, 6) = x.topRows(6);
    }
  }
  MergeProblem problem(double kappa) const { return MergeProblem{&weights, &cfg, &previous, &current, &store, kappa}; }
};

std::vector<Matrix> coefficient_inputs(int blocks, std::uint64_t seed) {
  SeededRng rng(seed);
  std::vector<Matrix> out;
  for (int i = 0; i < 8 * blocks; ++i) out.push_back(Matrix::Constant(1, 1, rng.uniform(0.3, 0.7)));
  return out;
}

// 1 ------------------------------------------------------------------------

Outcome zero_init_identity() {
  const BackboneConfig cfg;
  const BackboneWeights w = init_backbone(cfg, 11);
  const Matrix x = SeededRng(12).normal_matrix(64, cfg.input_dim);
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 3; ++s) {
    const LoraSet fresh = init_lora(cfg, LoraConfig{}, s);
    worst = std::max(worst, (extract_features(w, cfg, x) - extract_features(w, cfg, x, fresh.deltas())).cwiseAbs().maxCoeff());
  }
  return {worst < 1e-12, fmt::format("max abs diff {:.3g}", worst)};
}

// 2 ------------------------------------------------------------------------

bool bit_equal(const LoraSet& a, const LoraSet& b) {
  if (a.adapters.size() != b.adapters.size()) return false;
  for (std::size_t i = 0; i < a.adapters.size(); ++i) {
    const auto& x = a.adapters[i];
    const auto& y = b.adapters[i];
    if (x.a.size() != y.a.size() || x.b.size() != y.b.size()) return false;
    if (std::memcmp(x.a.data(), y.a.data(), sizeof(double) * x.a.size()) != 0) return false;
    if (std::memcmp(x.b.data(), y.b.data(), sizeof(double) * x.b.size()) != 0) return false;
  }
  return true;
}

Outcome merge_identity() {
  const BackboneConfig cfg;
  const LoraSet prev = trained_like(cfg, 1, SetRole::Previous);
  const LoraSet curr = trained_like(cfg, 2, SetRole::Current);
  const bool keep_prev = bit_equal(merge_sets(prev, curr, MergeCoefficients::uniform(cfg.num_blocks, 1.0, 0.0)), prev);
  const bool keep_curr = bit_equal(merge_sets(prev, curr, MergeCoefficients::uniform(cfg.num_blocks, 0.0, 1.0)), curr);
  return {keep_prev && keep_curr, fmt::format("(1,0) -> previous {}, (0,1) -> current {}", keep_prev, keep_curr)};
}

// 3 ------------------------------------------------------------------------

Outcome two_set_memory_bound() {
  SyntheticSpec spec;
  spec.num_classes = 50;
  const Desk desk = make_desk(spec);
  PipelineConfig pc;
  pc.stream.num_tasks = 20;
  pc.stream.classes_per_task = 2;
  const std::vector<RunResult> runs = run_variants(*desk.backbone, desk.data.stream_train, desk.data.stream_test,
                                                   desk.pretrain, pc, {Variant::DesireFull, Variant::WeightAverage}, 0);
  const RunResult& full = runs[0];
  const RunResult& avg = runs[1];
  const auto& per_stage = full.live_sets_per_stage;
  const int stages_at_two = int(std::count(per_stage.begin(), per_stage.end(), 2));
  const bool bounded = full.peak_live_sets == 2 && per_stage.size() == 20 && stages_at_two == 20;
  const bool archive = avg.peak_live_sets == 20 && avg.live_sets_per_stage.size() == 20 &&
                       avg.live_sets_per_stage.back() == 20;
  return {bounded && archive,
          fmt::format("desire_full holds exactly 2 sets in {}/{} stages (peak {}), weight_average peak {} sets "
                      "(exempt, expected 20)",
                      stages_at_two, per_stage.size(), full.peak_live_sets, avg.peak_live_sets)};
}

// 4 ------------------------------------------------------------------------

Outcome gradient_fidelity() {
  double worst = 0.0;
  std::string notes;
  for (int classes : {2, 3}) {
    const Toy toy(classes);
    const MergeProblem problem = toy.problem(0.5);
    const auto r = gradcheck(
        [&](Tape& tape, const std::vector<Var>& v) { return attribution_loss(tape, problem, toy.inputs, v).loss; },
        coefficient_inputs(toy.cfg.num_blocks, 4));
    worst = std::max(worst, r.max_rel_error);
    notes += fmt::format("{}-class rel {:.2g}; ", classes, r.max_rel_error);
  }

  SeededRng rng(10);
  StatsStore store;
  for (int id = 0; id < 3; ++id) {
    const Matrix m = rng.normal_matrix(40, 4);
    store.add(compute_class_stats((m.array() + double(id)).matrix(), id));
  }
  const Matrix weights = rng.normal_matrix(5, 3);
  const auto r = gradcheck(
      [&](Tape& tape, const std::vector<Var>& v) {
        return sum(hadamard(surrogate_logits(v[0], store), tape.constant(weights)));
      },
      {rng.normal_matrix(5, 4)});
  worst = std::max(worst, r.max_rel_error);
  notes += fmt::format("log-density wrt z rel {:.2g}", r.max_rel_error);
  return {worst < 1e-4, notes};
}

// 5 ------------------------------------------------------------------------

Outcome statistical_oracles() {
  std::vector<std::string> failed;
  // Rows (1,3) and (3,5): mean (2,4), unbiased covariance [[2,2],[2,2]].
  const ClassStats s = compute_class_stats(test_support::mat({{1, 3}, {3, 5}}), 0);
  if (!(s.mu(0) == 2.0 && s.mu(1) == 4.0)) failed.push_back("mean");
  if (!(s.sigma == test_support::mat({{2, 2}, {2, 2}}))) failed.push_back("covariance");
  const ClassStats t = compute_class_stats(test_support::mat({{0, 1}, {2, 1}, {1, 4}}), 1);
  if (!(t.mu(0) == 1.0 && t.mu(1) == 2.0 && t.sigma == test_support::mat({{1, 0}, {0, 3}}))) failed.push_back("3-row case");

  SeededRng rng(3);
  double density_err = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = rng.normal_matrix(5, 5);
    const Matrix sigma = a * a.transpose() + 0.5 * Matrix::Identity(5, 5);
    const Vector mu = rng.normal_matrix(5, 1);
    const ClassStats st = restore_class_stats(trial, 10, 0.0, mu, sigma);
    const Vector z = rng.normal_matrix(5, 1);
    const Vector diff = z - mu;
    const double dense = -0.5 * (5 * std::log(2 * std::numbers::pi) + std::log(sigma.determinant()) +
                                 diff.dot(sigma.inverse() * diff));
    density_err = std::max(density_err, std::abs(gaussian_log_density(z, st) - dense));
  }
  if (density_err >= 1e-8) failed.push_back("log-density");

  const Matrix a = rng.normal_matrix(4, 4);
  const Matrix sigma = a * a.transpose() + 0.2 * Matrix::Identity(4, 4);
  const Vector mu = rng.normal_matrix(4, 1);
  StatsStore store;
  store.add(restore_class_stats(0, 100, 0.0, mu, sigma));
  const PseudoFeatureBatch draw = sample_pseudo_features(store, 50000, 9);
  const Vector mean = draw.features.colwise().mean().transpose();
  const Matrix centered = draw.features.rowwise() - mean.transpose();
  const Matrix cov = centered.transpose() * centered / double(draw.features.rows() - 1);
  const double mean_err = (mean - mu).cwiseAbs().maxCoeff();
  const double cov_rel = (cov - sigma).norm() / sigma.norm();
  if (mean_err >= 0.02) failed.push_back("sample mean");
  if (cov_rel >= 0.05) failed.push_back("sample covariance");

  std::string detail = fmt::format("density err {:.2g}, 50k mean err {:.3g}, cov rel err {:.3g}", density_err,
                                   mean_err, cov_rel);
  for (const auto& f : failed) detail += "; failed " + f;
  return {failed.empty(), detail};
}

// 6 ------------------------------------------------------------------------

Outcome entropy_bounds() {
  bool in_bounds = true;
  int batches = 0;
  SeededRng rng(5);
  for (int classes : {3, 4, 6}) {
    const Toy toy(classes, 20 + classes);
    for (int trial = 0; trial < 10; ++trial) {
      MergeCoefficients c(toy.cfg.num_blocks);
      for (double& v : c.values()) v = rng.uniform(-1.0, 1.5);
      const double kappa = rng.uniform(0.01, 5.0);
      for (Index start = 0; start + 4 <= toy.inputs.rows(); start += 4) {
        const double loss = attribution_loss_value(toy.problem(kappa), toy.inputs.middleRows(start, 4), c);
        in_bounds &= loss >= 0.0 && loss <= std::log(double(classes)) + 1e-12;
        ++batches;
      }
    }
  }

  double uniform_err = 0.0;
  for (int classes : {2, 3, 7, 10}) {
    Tape tape;
    const Var h = softmax_entropy_rows(tape.constant(Matrix::Constant(4, classes, 0.37)));
    uniform_err = std::max(uniform_err, (h.value().array() - std::log(double(classes))).abs().maxCoeff());
  }
  const Toy toy(4, 1);
  const double flat = attribution_loss_value(toy.problem(1e12), toy.inputs, MergeCoefficients::uniform(2, 0.5, 0.5));
  uniform_err = std::max(uniform_err, std::abs(flat - std::log(4.0)));
  return {in_bounds && uniform_err <= 1e-9,
          fmt::format("{} batches in [0, ln C]: {}; uniform logits max |H - ln C| {:.2g}", batches, in_bounds,
                      uniform_err)};
}

// 7, 8, 9, 11 share one five-seed desk ablation ------------------------------

struct DeskAblation {
  std::vector<std::vector<RunResult>> runs;  // [seed][variant in all_variants order]
  double seconds = 0.0;
};

const RunResult& pick(const std::vector<RunResult>& runs, Variant v) {
  return *std::find_if(runs.begin(), runs.end(), [&](const RunResult& r) { return r.variant == v; });
}

Outcome directional(const DeskAblation& ab) {
  std::vector<double> full, seq;
  int drc_order = 0, dbr_order = 0, beats_avg = 0;
  std::string per_seed;
  for (const auto& runs : ab.runs) {
    const double f = pick(runs, Variant::DesireFull).metrics.a_last;
    const double m = pick(runs, Variant::BaselineMerge).metrics.a_last;
    const double drc = pick(runs, Variant::BaselinePlusDrc).metrics.a_last;
    const double dbr = pick(runs, Variant::BaselinePlusDbr).metrics.a_last;
    const double s = pick(runs, Variant::SeqLora).metrics.a_last;
    const double w = pick(runs, Variant::WeightAverage).metrics.a_last;
    full.push_back(f);
    seq.push_back(s);
    drc_order += f >= drc && drc >= m;
    dbr_order += f >= dbr && dbr >= m;
    beats_avg += f >= w;
    per_seed += fmt::format(" [full {:.4f} merge {:.4f} drc {:.4f} dbr {:.4f} seq {:.4f} avg {:.4f}]", f, m, drc, dbr,
                            s, w);
  }
  const int n = int(ab.runs.size());
  const double gap = median(full) - median(seq);
  const bool ok = gap >= 0.10 && beats_avg == n && drc_order >= 4 && dbr_order >= 4;
  spdlog::info("A_last per seed:{}", per_seed);
  return {ok, fmt::format("median A_last desire_full {:.4f} vs seq_lora {:.4f} (+{:.1f} pts); >= weight_average "
                          "{}/{}; full>=drc>=merge {}/{}; full>=dbr>=merge {}/{}",
                          median(full), median(seq), 100 * gap, beats_avg, n, drc_order, n, dbr_order, n)};
}

Outcome stability(const DeskAblation& ab) {
  int ok = 0;
  std::string detail;
  for (const auto& runs : ab.runs) {
    const double f = pick(runs, Variant::DesireFull).metrics.sd_acc;
    const double s = pick(runs, Variant::SeqLora).metrics.sd_acc;
    ok += f <= s;
    detail += fmt::format(" {:.3f}/{:.3f}", f, s);
  }
  return {ok >= 4, fmt::format("SD(Acc) desire_full <= seq_lora in {}/{} seeds (full/seq:{})", ok, ab.runs.size(), detail)};
}

Outcome orthogonality(const DeskAblation& ab) {
  bool ok = true;
  std::string detail;
  for (const auto& runs : ab.runs) {
    const CosineReport rep = cross_task_cosine(pick(runs, Variant::DesireFull).task_deltas);
    const Matrix& sim = rep.similarity;
    double max_off = 0.0;
    for (Index i = 0; i < sim.rows(); ++i)
      for (Index j = 0; j < sim.cols(); ++j)
        if (i != j) max_off = std::max(max_off, std::abs(sim(i, j)));
    const double mean_off = rep.mean_abs_off_diagonal();
    const bool diag_one = (sim.diagonal().array() - 1.0).abs().maxCoeff() < 1e-12;
    ok &= mean_off < 0.5 && max_off < 1.0 && diag_one && rep.excluded.empty();
    detail += fmt::format(" {:.3f}", mean_off);
  }
  return {ok, "mean |cosine| per seed:" + detail};
}

Outcome consolidation_progress(const DeskAblation& ab) {
  int ok = 0;
  std::string detail;
  for (const auto& runs : ab.runs) {
    const RunResult& r = pick(runs, Variant::DesireFull);
    bool seed_ok = !r.consolidations.empty();
    double worst = -1e300;
    for (const ConsolidationRecord& c : r.consolidations) {
      seed_ok &= c.learned && c.final_loss <= c.initial_loss;
      worst = std::max(worst, c.final_loss - c.initial_loss);
    }
    ok += seed_ok;
    detail += fmt::format(" {:+.2e}", worst);
  }
  return {ok >= 4,
          fmt::format("final <= initial loss at every merge in {}/{} seeds (largest final-initial per seed:{})", ok,
                      ab.runs.size(), detail)};
}

// 10 -----------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "desire_acceptance_determinism";
  const fs::path work = root / "work";
  fs::remove_all(root);
  int failed_commands = 0;
  // Both passes use identical paths, so the configs and their hashes match.
  for (const char* keep : {"first", "second"}) {
    fs::create_directories(work);
    ExperimentConfig c;
    c.data_dir = (work / "data").string();
    c.backbone_checkpoint = (work / "backbone.dsrb").string();
    c.backbone = small_backbone();
    c.pretrain.epochs = 3;
    c.pretrain.min_accuracy = 0.0;
    c.pipeline.lora.rank = 2;
    c.pipeline.training.epochs = 3;
    c.pipeline.consolidation.merge_dataset_size = 64;
    c.pipeline.refinement.pseudo_count = 50;
    c.pipeline.stream.num_tasks = 3;
    c.seeds = {0, 1};
    io::write_text_atomic(work / "config.json", to_json(c).dump(2));
    const std::string cfg = (work / "config.json").string();
    const std::vector<std::vector<std::string>> commands = {
        {"gen-data", "--out", c.data_dir, "--classes", "10", "--pretrain-classes", "4", "--dim", "8",
         "--samples-per-class", "80", "--seed", "5"},
        {"pretrain", "--config", cfg},
        {"run", "--config", cfg, "--variant", "desire_full", "--out", (work / "run").string(), "--export-features"},
        {"run", "--config", cfg, "--variant", "weight_average", "--out", (work / "run_avg").string()},
        {"ablate", "--config", cfg, "--out", (work / "ablate").string()},
    };
    for (const auto& cmd : commands) failed_commands += run_cli(cmd) != kExitOk;
    fs::rename(work, root / keep);
  }
  std::vector<std::string> mismatched;
  std::size_t compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(root / "first")) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), root / "first");
    ++compared;
    if (!fs::exists(root / "second" / rel) || slurp(entry.path()) != slurp(root / "second" / rel))
      mismatched.push_back(rel.string());
  }
  fs::remove_all(root);
  std::string detail = fmt::format("{} files compared, {} differ, {} commands failed", compared, mismatched.size(),
                                   failed_commands);
  for (const auto& m : mismatched) detail += " " + m;
  return {failed_commands == 0 && mismatched.empty() && compared > 10, detail};
}

}  // namespace

int main() {
  tune_allocator();
  spdlog::set_level(spdlog::level::info);
  spdlog::set_pattern("[%l] %v");

  int failures = 0;
  // `extra` adds time spent before the check that counts against its budget.
  auto report = [&](int id, const std::string& name, double budget, const std::function<Outcome()>& check,
                    double extra = 0.0) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = seconds_since(t0) + extra;
    const bool pass = o.pass && secs < budget;
    failures += !pass;
    fmt::print("{} criterion {:>2} {}: {} ({:.2f} s, budget {:.0f} s)\n", pass ? "PASS" : "FAIL", id, name, o.detail,
               secs, budget);
    std::fflush(stdout);
  };

  report(1, "zero-init identity", 1, zero_init_identity);
  report(2, "merge identity", 1, merge_identity);
  report(4, "gradient fidelity", 30, gradient_fidelity);
  report(5, "statistical oracles", 60, statistical_oracles);
  report(6, "entropy bounds", 60, entropy_bounds);

  // Backbone pretraining counts against the end-to-end budget.
  DeskAblation ab;
  std::optional<std::string> ablation_error;
  {
    const auto t0 = Clock::now();
    try {
      const Desk desk = make_desk(SyntheticSpec{});
      const PipelineConfig pc;
      const std::vector<Variant> variants(all_variants().begin(), all_variants().end());
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        ab.runs.push_back(run_variants(*desk.backbone, desk.data.stream_train, desk.data.stream_test, desk.pretrain,
                                       pc, variants, seed));
        spdlog::info("desk seed {} done at {:.0f} s", seed, seconds_since(t0));
      }
    } catch (const std::exception& e) {
      ablation_error = e.what();
    }
    ab.seconds = seconds_since(t0);
  }
  auto from_ablation = [&](const std::function<Outcome(const DeskAblation&)>& f) {
    return [&, f] { return ablation_error ? Outcome{false, "desk ablation threw: " + *ablation_error} : f(ab); };
  };
  report(7, "end-to-end ranking", 15 * 60, from_ablation(directional), ab.seconds);
  report(8, "stability-plasticity", 15 * 60, from_ablation(stability), ab.seconds);
  report(9, "adapter orthogonality", 15 * 60, from_ablation(orthogonality), ab.seconds);
  report(11, "consolidation progress", 15 * 60, from_ablation(consolidation_progress), ab.seconds);

  report(3, "two-set memory bound", 10 * 60, two_set_memory_bound);
  report(10, "determinism", 10 * 60, determinism);

  fmt::print("{} of 11 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
