#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "sdt/tensor.hpp"

namespace sdt {

// Little-endian byte sink.
class ByteWriter {
 public:
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void bytes(std::string_view s);
  // u32 length followed by the UTF-8 bytes.
  void string(std::string_view s);

  const std::vector<std::uint8_t>& buffer() const noexcept { return buf_; }
  std::vector<std::uint8_t>& buffer() noexcept { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}
  explicit ByteReader(const std::vector<std::uint8_t>& buf) : ByteReader(buf.data(), buf.size()) {}

  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  std::string bytes(std::size_t n);
  std::string string();

  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return size_ - pos_; }

 private:
  void need(std::size_t n) const;

  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// name (u32-length-prefixed UTF-8), rank (u32), dims (u64 each), raw f32 LE.
void write_tensor(ByteWriter& out, std::string_view name, const Tensor& t);
NamedTensor read_tensor(ByteReader& in);

// FNV-1a, 64-bit.
std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size, std::uint64_t seed = 0xCBF29CE484222325ULL);

}  // namespace sdt
