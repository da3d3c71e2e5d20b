#pragma once

// Little-endian encode/decode helpers for the binary file formats, plus the
// FNV-1a hash used to fingerprint artifacts in run manifests.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace capskd {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

inline void put_f64(std::string& out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline void put_i32(std::string& out, std::int32_t v) {
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

// Cursor over an in-memory blob; throws std::runtime_error on truncation.
class ByteReader {
 public:
  explicit ByteReader(const std::string& buf) : buf_(buf) {}

  std::uint32_t u32();
  std::uint64_t u64();
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::int32_t i32() { return std::bit_cast<std::int32_t>(u32()); }
  std::string bytes(std::size_t n);
  std::size_t remaining() const { return buf_.size() - pos_; }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& buf_;
  std::size_t pos_ = 0;
};

std::string read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::string& bytes);

std::uint64_t fnv1a64(const std::string& bytes);
std::string fnv1a64_hex(const std::string& bytes);

}  // namespace capskd
