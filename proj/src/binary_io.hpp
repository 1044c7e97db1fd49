// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace dualtalker::io {

/// Little-endian byte buffer builder.
class BinaryWriter {
 public:
  void magic(std::string_view tag) { bytes_.append(tag); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void raw(std::string_view data) { bytes_.append(data); }

  const std::string& bytes() const noexcept { return bytes_; }
  void save(const std::filesystem::path& path) const;

 private:
  std::string bytes_;
};

/// Little-endian reader over a whole file; short reads raise FormatError::truncated.
class BinaryReader {
 public:
  BinaryReader(std::string bytes, std::string source);
  static BinaryReader open(const std::filesystem::path& path);

  void expect_magic(std::string_view tag);
  void expect_version(std::uint32_t supported);
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string raw(std::size_t n);
  /// Fails with truncated if fewer than n bytes remain.
  void require(std::size_t n) const;

  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  std::string bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

}  // namespace dualtalker::io
