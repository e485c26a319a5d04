#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "desire/numerics/types.hpp"

namespace desire::io {

/// Little-endian byte sink, independent of host byte order.
class BinaryWriter {
 public:
  void magic(std::string_view tag);
  void u32(std::uint32_t value);
  void u64(std::uint64_t value);
  void f64(double value);
  void matrix(const Matrix& m);

  const std::vector<unsigned char>& bytes() const { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::vector<unsigned char> bytes) : bytes_(std::move(bytes)) {}

  void expect_magic(std::string_view tag);
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  /// Reads rows*cols row-major values.
  Matrix matrix(Index rows, Index cols);
  bool at_end() const { return pos_ == bytes_.size(); }
  void expect_end() const;

 private:
  void need(std::size_t n) const;

  std::vector<unsigned char> bytes_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> read_file(const std::filesystem::path& path);
/// Writes through a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t size);
void write_file_atomic(const std::filesystem::path& path, const std::vector<unsigned char>& bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace desire::io
