#include "sdt/serialize.hpp"

#include <bit>

namespace sdt {

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void ByteWriter::bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

void ByteWriter::string(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s);
}

void ByteReader::need(std::size_t n) const {
  require(n <= size_ - pos_, ErrorCode::kIo,
          "truncated input: need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) + ", have " +
              std::to_string(size_ - pos_));
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

std::string ByteReader::bytes(std::size_t n) {
  need(n);
  std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
  pos_ += n;
  return s;
}

std::string ByteReader::string() { return bytes(u32()); }

void write_tensor(ByteWriter& out, std::string_view name, const Tensor& t) {
  out.string(name);
  out.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) out.u64(d);
  for (float v : t.values()) out.f32(v);
}

NamedTensor read_tensor(ByteReader& in) {
  NamedTensor nt;
  nt.name = in.string();
  const std::uint32_t rank = in.u32();
  require(rank <= 8, ErrorCode::kIo, "tensor '" + nt.name + "' has implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = in.u64();
  const std::size_t n = shape_numel(shape);
  require(n <= in.remaining() / 4, ErrorCode::kIo, "tensor '" + nt.name + "' extends past the end of the input");
  std::vector<float> values(n);
  for (auto& v : values) v = in.f32();
  nt.tensor = Tensor::from_values(std::move(shape), std::move(values));
  return nt;
}

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= data[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace sdt
