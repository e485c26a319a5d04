#include "desire/data.hpp"

#include "desire/io.hpp"

namespace desire {

void Dataset::validate() const {
  if (inputs.rows() != static_cast<Index>(labels.size())) {
    throw DimensionError("dataset: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(inputs.rows()) + " rows");
  }
  for (int label : labels) {
    if (label < 0) throw IndexError("dataset: negative label");
  }
  require_finite(inputs, "dataset");
}

Dataset Dataset::filter(const std::set<int>& keep) const {
  std::vector<Index> idx;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (keep.contains(labels[i])) idx.push_back(static_cast<Index>(i));
  }
  return rows(idx);
}

Dataset Dataset::rows(const std::vector<Index>& indices) const {
  Dataset out;
  out.inputs.resize(static_cast<Index>(indices.size()), inputs.cols());
  out.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out.inputs.row(static_cast<Index>(i)) = inputs.row(indices[i]);
    out.labels.push_back(labels[static_cast<std::size_t>(indices[i])]);
  }
  return out;
}

void Dataset::append(const Dataset& other) {
  if (size() == 0) {
    *this = other;
    return;
  }
  if (other.dim() != dim()) throw DimensionError("dataset append: dimension mismatch");
  Matrix merged(size() + other.size(), dim());
  merged << inputs, other.inputs;
  inputs = std::move(merged);
  labels.insert(labels.end(), other.labels.begin(), other.labels.end());
}

std::vector<unsigned char> encode_dataset(const Dataset& data) {
  data.validate();
  io::BinaryWriter w;
  w.magic("DSR1");
  w.u32(static_cast<std::uint32_t>(data.size()));
  w.u32(static_cast<std::uint32_t>(data.dim()));
  w.u32(static_cast<std::uint32_t>(data.classes().size()));
  for (Index r = 0; r < data.size(); ++r) {
    for (Index c = 0; c < data.dim(); ++c) w.f64(data.inputs(r, c));
    w.u32(static_cast<std::uint32_t>(data.labels[static_cast<std::size_t>(r)]));
  }
  return w.bytes();
}

Dataset decode_dataset(std::vector<unsigned char> bytes) {
  io::BinaryReader r(std::move(bytes));
  r.expect_magic("DSR1");
  const std::uint32_t n = r.u32();
  const std::uint32_t d = r.u32();
  const std::uint32_t num_classes = r.u32();
  Dataset out;
  out.inputs.resize(n, d);
  out.labels.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t c = 0; c < d; ++c) out.inputs(i, c) = r.f64();
    out.labels[i] = static_cast<int>(r.u32());
  }
  r.expect_end();
  if (out.classes().size() != num_classes) throw IoError("dataset: class count does not match header");
  return out;
}

void save_dataset(const std::filesystem::path& path, const Dataset& data) {
  io::write_file_atomic(path, encode_dataset(data));
}

Dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(io::read_file(path)); }

}  // namespace desire
