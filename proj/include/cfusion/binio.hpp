#pragma once

// Little-endian byte buffers and atomic file replacement.

#include "cfusion/errors.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

namespace cfusion::io {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }

  std::size_t size() const noexcept { return bytes_.size(); }
  const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }
  std::vector<std::uint8_t>& bytes() noexcept { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes, std::string context = "file")
      : bytes_(&bytes), context_(std::move(context)) {}

  std::uint8_t u8() {
    need(1);
    return (*bytes_)[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>((*bytes_)[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>((*bytes_)[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_->data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::string str() { return raw(u32()); }

  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_->size() - pos_; }
  void seek(std::size_t pos) {
    if (pos > bytes_->size()) truncated();
    pos_ = pos;
  }

 private:
  void need(std::size_t n) const {
    if (bytes_->size() - pos_ < n) truncated();
  }
  [[noreturn]] void truncated() const {
    throw FormatError(FormatError::Kind::kCorrupt, context_ + ": truncated or corrupt");
  }

  const std::vector<std::uint8_t>* bytes_;
  std::size_t pos_ = 0;
  std::string context_;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline std::string read_text(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

/// Writes to a sibling temporary file, then renames over the target.
inline void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t size) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  write_file_atomic(path, bytes.data(), bytes.size());
}

inline void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, text.data(), text.size());
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace cfusion::io
