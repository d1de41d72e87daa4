#pragma once

// Little-endian binary encoding helpers shared by the MVID, MEMB and MDEN
// formats, plus atomic file replacement.
//
// Every format has the same frame:
//   8-byte magic ("XXXX" family tag + "0001" version)
//   header fields (u32 little-endian unless noted)
//   u64 FNV-1a hash of all preceding bytes (magic included)
//   raw payload
// A header hash mismatch is reported separately from magic/version errors so
// single-byte header damage is always detected.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "minv/error.hpp"

namespace minv::io {

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Writer {
 public:
  void magic(std::string_view m) { bytes_.insert(bytes_.end(), m.begin(), m.end()); }

  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }

  /// Appends the FNV-1a hash of everything written so far.
  void header_hash() { u64(fnv1a64(bytes_)); }

  const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }

 private:
  template <typename U>
  void put(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::string what)
      : bytes_(bytes), what_(std::move(what)) {}

  /// Checks the 4-byte family tag and 4-byte version separately.
  void magic(std::string_view expected) {
    need(8, "magic");
    const std::string_view got(reinterpret_cast<const char*>(bytes_.data()), 8);
    if (got.substr(0, 4) != expected.substr(0, 4))
      throw FormatError(what_ + ": bad magic (expected " + std::string(expected.substr(0, 4)) + ")");
    if (got.substr(4) != expected.substr(4))
      throw FormatError(what_ + ": unsupported version '" + printable(got.substr(4)) +
                        "' (expected " + std::string(expected.substr(4)) + ")");
    pos_ = 8;
  }

  std::uint32_t u32(const char* field) { return get<std::uint32_t>(field); }
  std::uint64_t u64(const char* field) { return get<std::uint64_t>(field); }
  float f32() { return std::bit_cast<float>(get<std::uint32_t>("payload")); }
  double f64() { return std::bit_cast<double>(get<std::uint64_t>("payload")); }

  void header_hash() {
    const std::uint64_t expect = fnv1a64(bytes_.first(pos_));
    if (u64("header hash") != expect) throw FormatError(what_ + ": header checksum mismatch");
  }

  /// Fails unless exactly `n` bytes remain.
  void expect_remaining(std::uint64_t n) const {
    const std::uint64_t left = bytes_.size() - pos_;
    if (left < n)
      throw FormatError(what_ + ": truncated payload (" + std::to_string(left) + " of " +
                        std::to_string(n) + " bytes)");
    if (left > n) throw FormatError(what_ + ": " + std::to_string(left - n) + " trailing bytes");
  }

  void expect_end() const { expect_remaining(0); }

  const std::string& what() const noexcept { return what_; }

 private:
  static std::string printable(std::string_view s) {
    std::string out;
    for (char c : s) out += (c >= 32 && c < 127) ? c : '?';
    return out;
  }

  void need(std::size_t n, const char* field) const {
    if (bytes_.size() - pos_ < n)
      throw FormatError(what_ + ": truncated while reading " + field);
  }

  template <typename U>
  U get(const char* field) {
    need(sizeof(U), field);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }

  std::span<const std::uint8_t> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes to a sibling temporary and renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace minv::io
