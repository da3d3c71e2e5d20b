#include "capskd/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

#include "capskd/binio.hpp"

namespace capskd {

namespace {
constexpr char kMagic[] = "CAPSCKPT";
constexpr std::uint32_t kVersion = 1;
}  // namespace

std::uint32_t ByteReader::u32() {
  if (pos_ + 4 > buf_.size()) throw std::runtime_error("truncated input");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i]))
         << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  if (pos_ + 8 > buf_.size()) throw std::runtime_error("truncated input");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i]))
         << (8 * i);
  pos_ += 8;
  return v;
}

std::string ByteReader::bytes(std::size_t n) {
  if (pos_ + n > buf_.size()) throw std::runtime_error("truncated input");
  std::string out = buf_.substr(pos_, n);
  pos_ += n;
  return out;
}

std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return bytes;
}

void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string fnv1a64_hex(const std::string& bytes) {
  static const char* digits = "0123456789abcdef";
  std::uint64_t h = fnv1a64(bytes);
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out;
  out.append(kMagic, 8);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  put_u32(out, static_cast<std::uint32_t>(ckpt.meta.size()));
  out.append(ckpt.meta);
  for (const auto& [name, t] : ckpt.tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u64(out, d);
    for (double v : t.values()) put_f64(out, v);
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  ByteReader r(bytes);
  if (r.bytes(8) != std::string(kMagic, 8)) {
    throw std::runtime_error("not a checkpoint file (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  Checkpoint ckpt;
  ckpt.meta = r.bytes(r.u32());
  ckpt.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.bytes(r.u32());
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (std::uint32_t d = 0; d < rank; ++d)
      shape[d] = static_cast<std::size_t>(r.u64());
    const std::size_t n = shape_numel(shape);
    std::vector<double> values(n);
    for (std::size_t j = 0; j < n; ++j) values[j] = r.f64();
    ckpt.tensors.emplace_back(std::move(name),
                              Tensor::from_data(std::move(shape),
                                                std::move(values)));
  }
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  write_file_bytes(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace capskd
