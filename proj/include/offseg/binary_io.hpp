#pragma once

// Little-endian binary encoding shared by the dataset and checkpoint
// containers, plus whole-file helpers.

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "offseg/error.hpp"

namespace offseg {

using Bytes = std::vector<std::uint8_t>;

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void f32(float v) { put(std::bit_cast<std::uint32_t>(v), 4); }
  void raw(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  const Bytes& bytes() const { return buf_; }
  Bytes take() { return std::move(buf_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  Bytes buf_;
};

/// Sequential reader; every failure reports the byte offset where it occurred.
class ByteReader {
 public:
  explicit ByteReader(const Bytes& b) : buf_(b) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }

  std::uint8_t u8(const char* what) { return static_cast<std::uint8_t>(get(1, what)); }
  std::uint16_t u16(const char* what) { return static_cast<std::uint16_t>(get(2, what)); }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(get(4, what)); }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }

  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void expect_end() const {
    if (pos_ != buf_.size())
      throw ParseError("trailing " + std::to_string(buf_.size() - pos_) + " bytes after payload at offset " +
                           std::to_string(pos_),
                       pos_);
  }

  [[noreturn]] void fail(const std::string& msg, std::size_t at) const {
    throw ParseError(msg + " at offset " + std::to_string(at), at);
  }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n)
      throw ParseError("truncated file: need " + std::to_string(n) + " bytes for " + what +
                           " at offset " + std::to_string(pos_) + ", " +
                           std::to_string(remaining()) + " available",
                       pos_);
  }

 private:
  std::uint64_t get(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  const Bytes& buf_;
  std::size_t pos_ = 0;
};

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline std::string read_text(const std::filesystem::path& path) {
  Bytes b = read_file(path);
  return std::string(b.begin(), b.end());
}

inline void write_file(const std::filesystem::path& path, const void* data, std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw IoError("write failed for " + path.string());
}

inline void write_file(const std::filesystem::path& path, const Bytes& b) {
  write_file(path, b.data(), b.size());
}

inline void write_text(const std::filesystem::path& path, std::string_view s) {
  write_file(path, s.data(), s.size());
}

/// Sidecar manifest path for a container file: "<path>.json".
inline std::filesystem::path sidecar_path(const std::filesystem::path& p) {
  return std::filesystem::path(p.string() + ".json");
}

}  // namespace offseg
