#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "desire/backbone.hpp"

namespace desire {

enum class Projection { Q = 0, V = 1 };
enum class FactorMatrix { A = 0, B = 1 };
enum class SetRole { Previous = 0, Current = 1 };

std::string to_string(Projection p);
std::string to_string(FactorMatrix m);
std::string to_string(SetRole r);

struct LoraConfig {
  int rank = 4;
  double init_std = 0.02;

  /// Throws ConfigError unless rank <= min(d, k) / 4 for the given backbone.
  void validate(const BackboneConfig& backbone) const;
  bool operator==(const LoraConfig&) const = default;
};

/// delta = A * B added to the frozen (in x out) weight of one site.
struct LoraAdapter {
  Matrix a;  // d x r
  Matrix b;  // r x k
  int block = 0;
  Projection projection = Projection::Q;

  Index rank() const { return a.cols(); }
  Matrix delta() const { return a * b; }
};

/// One adapter per (block, projection) site, block-major with Q before V,
/// which is also the backbone's site order.
struct LoraSet {
  SetRole role = SetRole::Current;
  std::vector<LoraAdapter> adapters;

  int num_blocks() const { return static_cast<int>(adapters.size() / 2); }
  Index rank() const { return adapters.empty() ? 0 : adapters.front().rank(); }
  std::vector<Matrix> deltas() const;
  /// Site ordering, equal ranks and factor shapes.
  void validate() const;
};

/// A = N(0, init_std^2), B = 0 at every site, so the set is an exact no-op.
LoraSet init_lora(const BackboneConfig& backbone, const LoraConfig& config, std::uint64_t seed,
                  SetRole role = SetRole::Current);

/// One coefficient per (block, projection, matrix, role): 8 per block.
class MergeCoefficients {
 public:
  MergeCoefficients() = default;
  explicit MergeCoefficients(int num_blocks) : values_(static_cast<std::size_t>(8 * num_blocks), 0.0) {}
  /// Every slot set to (previous, current).
  static MergeCoefficients uniform(int num_blocks, double previous, double current);

  static std::size_t slot(int block, Projection p, FactorMatrix m, SetRole r) {
    return static_cast<std::size_t>(((block * 2 + int(p)) * 2 + int(m)) * 2 + int(r));
  }
  double& at(int block, Projection p, FactorMatrix m, SetRole r) { return values_.at(slot(block, p, m, r)); }
  double at(int block, Projection p, FactorMatrix m, SetRole r) const { return values_.at(slot(block, p, m, r)); }

  int num_blocks() const { return static_cast<int>(values_.size() / 8); }
  std::size_t size() const { return values_.size(); }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  /// Throws unless exactly 8 * num_blocks finite values.
  void validate(int num_blocks) const;

  bool operator==(const MergeCoefficients&) const = default;

 private:
  std::vector<double> values_;
};

/// W + A * B. W is taken by value and never differentiated.
Matrix effective_weight(const Matrix& w, const LoraAdapter& adapter);
/// Same on the tape; W must be a constant.
Var effective_weight(Var w, Var a, Var b);

/// Per site and per factor: lambda_c * curr + lambda_p * prev, with A and B
/// merged separately. The result has role Previous.
LoraSet merge_sets(const LoraSet& previous, const LoraSet& current, const MergeCoefficients& coeffs);

/// Adapters and coefficients bound to a tape. Merged deltas are built as
/// (sum of scaled A) * (sum of scaled B), differentiable in the coefficients.
std::vector<Var> merged_site_deltas(Tape& tape, const LoraSet& previous, const LoraSet& current,
                                    std::span<const Var> coeffs);

struct CosineReport {
  Matrix similarity;  // over the kept tasks, in input order
  std::vector<std::size_t> kept;
  std::vector<std::size_t> excluded;  // zero-norm deltas
  /// Mean |off-diagonal|; NaN with fewer than two kept tasks.
  double mean_abs_off_diagonal() const;
};

/// Pairwise cosine between flattened per-task delta lists (all sites concatenated).
CosineReport cross_task_cosine(const std::vector<std::vector<Matrix>>& task_deltas);

/// "DSRL": magic, u32 blocks, u32 rank, u32 d, u32 k, u32 role, then A and B
/// per site as f64.
std::vector<unsigned char> encode_lora(const LoraSet& set);
LoraSet decode_lora(std::vector<unsigned char> bytes);
void save_lora(const std::filesystem::path& path, const LoraSet& set);
LoraSet load_lora(const std::filesystem::path& path);

}  // namespace desire
