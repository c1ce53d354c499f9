#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "sgat/error.hpp"

namespace sgat::binio {

// Little-endian encoders. The project only targets little-endian hosts, so
// memcpy of native integers and IEEE floats is the on-disk layout.
static_assert(sizeof(float) == 4);

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u16(std::uint16_t v) { bytes(&v, 2); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f32s(const std::vector<float>& v) { bytes(v.data(), v.size() * 4); }
  void text(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

/// Bounds-checked cursor over an in-memory file; truncation is a format error.
class Reader {
 public:
  Reader(const std::string& data, std::string what) : data_(data), what_(std::move(what)) {}

  void bytes(void* out, std::size_t n) {
    if (n > data_.size() - pos_) {
      throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_));
    }
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() { return read<std::uint8_t>(); }
  std::uint16_t u16() { return read<std::uint16_t>(); }
  std::uint32_t u32() { return read<std::uint32_t>(); }
  std::uint64_t u64() { return read<std::uint64_t>(); }
  std::vector<float> f32s(std::size_t count) {
    if (count > (data_.size() - pos_) / 4) {
      throw FormatError(what_ + ": truncated payload at byte " + std::to_string(pos_));
    }
    std::vector<float> v(count);
    bytes(v.data(), count * 4);
    return v;
  }
  std::string text() {
    const std::uint32_t n = u32();
    if (n > data_.size() - pos_) {
      throw FormatError(what_ + ": truncated text at byte " + std::to_string(pos_));
    }
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == data_.size(); }
  std::size_t position() const { return pos_; }

 private:
  template <typename T>
  T read() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }

  const std::string& data_;
  std::size_t pos_ = 0;
  std::string what_;
};

std::string read_file(const std::string& path);
/// Writes via a temporary file and rename, so readers never see a partial file.
void write_file(const std::string& path, const std::string& data);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view data);
std::string hex64(std::uint64_t v);

}  // namespace sgat::binio
