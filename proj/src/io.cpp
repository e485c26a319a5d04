#include "desire/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace desire::io {

void BinaryWriter::magic(std::string_view tag) { bytes_.insert(bytes_.end(), tag.begin(), tag.end()); }

void BinaryWriter::u32(std::uint32_t value) {
  for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<unsigned char>(value >> (8 * i)));
}

void BinaryWriter::u64(std::uint64_t value) {
  for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<unsigned char>(value >> (8 * i)));
}

void BinaryWriter::f64(double value) { u64(std::bit_cast<std::uint64_t>(value)); }

void BinaryWriter::matrix(const Matrix& m) {
  for (Index i = 0; i < m.size(); ++i) f64(m.data()[i]);
}

void BinaryReader::need(std::size_t n) const {
  if (bytes_.size() - pos_ < n) throw IoError("truncated binary file");
}

void BinaryReader::expect_magic(std::string_view tag) {
  need(tag.size());
  if (std::memcmp(bytes_.data() + pos_, tag.data(), tag.size()) != 0) {
    throw IoError("bad magic, expected \"" + std::string(tag) + "\"");
  }
  pos_ += tag.size();
}

std::uint32_t BinaryReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
  return v;
}

std::uint64_t BinaryReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
  return v;
}

double BinaryReader::f64() { return std::bit_cast<double>(u64()); }

Matrix BinaryReader::matrix(Index rows, Index cols) {
  need(static_cast<std::size_t>(rows * cols) * 8);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = f64();
  return m;
}

void BinaryReader::expect_end() const {
  if (!at_end()) throw IoError("trailing bytes in binary file");
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t size) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string());
  }
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename into " + path.string());
}

void write_file_atomic(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  write_file_atomic(path, bytes.data(), bytes.size());
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, text.data(), text.size());
}

}  // namespace desire::io
