#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <vector>

#include "desire/numerics/types.hpp"

namespace desire {

/// Labelled inputs, one row per sample. Labels are global class ids.
struct Dataset {
  Matrix inputs;
  std::vector<int> labels;

  Index size() const { return inputs.rows(); }
  Index dim() const { return inputs.cols(); }
  std::set<int> classes() const { return {labels.begin(), labels.end()}; }

  /// Rows whose label is in `keep`, in original order.
  Dataset filter(const std::set<int>& keep) const;
  Dataset rows(const std::vector<Index>& indices) const;
  /// Appends `other` (same dimension).
  void append(const Dataset& other);
  void validate() const;
};

/// "DSR1" binary: u32 n, u32 d, u32 num_classes, then n records of
/// (d x f64, u32 label), little-endian.
std::vector<unsigned char> encode_dataset(const Dataset& data);
Dataset decode_dataset(std::vector<unsigned char> bytes);
void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace desire
