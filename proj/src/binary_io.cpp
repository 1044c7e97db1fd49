// SPDX-License-Identifier: Apache-2.0
#include "binary_io.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include "dualtalker/errors.hpp"

namespace dualtalker::io {

namespace {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

}  // namespace

void BinaryWriter::u32(std::uint32_t v) { put_le(bytes_, v); }
void BinaryWriter::u64(std::uint64_t v) { put_le(bytes_, v); }
void BinaryWriter::f32(float v) { put_le(bytes_, std::bit_cast<std::uint32_t>(v)); }
void BinaryWriter::f64(double v) { put_le(bytes_, std::bit_cast<std::uint64_t>(v)); }

void BinaryWriter::save(const std::filesystem::path& path) const { write_file(path, bytes_); }

BinaryReader::BinaryReader(std::string bytes, std::string source)
    : bytes_(std::move(bytes)), source_(std::move(source)) {}

BinaryReader BinaryReader::open(const std::filesystem::path& path) {
  return BinaryReader(read_file(path), path.string());
}

void BinaryReader::require(std::size_t n) const {
  if (remaining() < n)
    throw FormatError(FormatError::Kind::truncated,
                      source_ + ": truncated file (needed " + std::to_string(n) + " bytes, " +
                          std::to_string(remaining()) + " remain)");
}

void BinaryReader::expect_magic(std::string_view tag) {
  if (remaining() < tag.size() || std::string_view(bytes_).substr(pos_, tag.size()) != tag)
    throw FormatError(FormatError::Kind::bad_magic, source_ + ": bad magic, expected '" + std::string(tag) + "'");
  pos_ += tag.size();
}

void BinaryReader::expect_version(std::uint32_t supported) {
  const std::uint32_t v = u32();
  if (v != supported)
    throw FormatError(FormatError::Kind::version_mismatch,
                      source_ + ": unsupported version " + std::to_string(v) + " (expected " +
                          std::to_string(supported) + ")");
}

namespace {

template <class U>
U get_le(const std::string& bytes, std::size_t pos) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    v |= static_cast<U>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  return v;
}

}  // namespace

std::uint32_t BinaryReader::u32() {
  require(4);
  auto v = get_le<std::uint32_t>(bytes_, pos_);
  pos_ += 4;
  return v;
}

std::uint64_t BinaryReader::u64() {
  require(8);
  auto v = get_le<std::uint64_t>(bytes_, pos_);
  pos_ += 8;
  return v;
}

float BinaryReader::f32() { return std::bit_cast<float>(u32()); }
double BinaryReader::f64() { return std::bit_cast<double>(u64()); }

std::string BinaryReader::raw(std::size_t n) {
  require(n);
  std::string out = bytes_.substr(pos_, n);
  pos_ += n;
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw IoError("failed reading '" + path.string() + "'");
  return buf.str();
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace dualtalker::io
