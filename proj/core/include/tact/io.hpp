#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace tact {

// Little-endian byte sink for the binary file formats.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void bytes(std::string_view s) { buf_.append(s); }

  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

// Little-endian byte source; failures throw ParseError naming the byte
// offset and the expected vs actual byte counts.
class ByteReader {
 public:
  ByteReader(std::string_view data, std::string name)
      : data_(data), name_(std::move(name)) {}

  std::uint8_t u8() { return take(1)[0]; }
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  std::string_view raw(std::size_t n) {
    const unsigned char* p = take(n);
    return {reinterpret_cast<const char*>(p), n};
  }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  bool at_end() const { return pos_ == data_.size(); }
  void expect_end() const;

 private:
  const unsigned char* take(std::size_t n);

  std::string_view data_;
  std::string name_;
  std::size_t pos_ = 0;
};

std::uint64_t fnv1a64(std::string_view bytes);

std::string read_binary_file(const std::filesystem::path& path);
void write_binary_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace tact
