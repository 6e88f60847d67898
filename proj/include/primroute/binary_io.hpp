#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace primroute {

/// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes,
                      std::uint64_t seed = 0xCBF29CE484222325ULL);
std::uint64_t fnv1a64(std::string_view text);

/// Rounds a double to the nearest binary32 value and back.
inline double round_to_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

/// Little-endian byte writer for checkpoint formats.
class ByteWriter {
 public:
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v);
  void f64(double v);
  void bytes(std::span<const std::uint8_t> b);
  void magic(std::string_view m);

  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  std::uint64_t hash() const { return fnv1a64(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Little-endian reader; every accessor throws FormatError on truncation.
class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> data, std::string origin = "<memory>")
      : data_(std::move(data)), origin_(std::move(origin)) {}

  std::uint32_t u32();
  std::uint64_t u64();
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32();
  double f64();
  void expect_magic(std::string_view m);

  std::size_t position() const { return pos_; }
  std::size_t size() const { return data_.size(); }
  std::span<const std::uint8_t> prefix(std::size_t n) const {
    return std::span<const std::uint8_t>(data_.data(), n);
  }
  const std::string& origin() const { return origin_; }

 private:
  void need(std::size_t n);
  std::vector<std::uint8_t> data_;
  std::string origin_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

/// Hex rendering used for hashes inside text artifacts.
std::string hex64(std::uint64_t v);

}  // namespace primroute
