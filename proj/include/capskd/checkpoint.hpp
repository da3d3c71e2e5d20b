#pragma once

// Parameter checkpoint file: all named tensors of one model plus a free-form
// metadata string (JSON in practice, holding the architecture block).
//
// Layout, all integers little-endian:
//   magic "CAPSCKPT" (8 bytes)
//   u32 version (= 1)
//   u32 tensor count
//   u32 metadata length, then metadata bytes
//   per tensor: u32 name length, name bytes, u32 rank, u64 dims[rank],
//               f64 data (row-major)
//
// Save/load round-trips are bit-exact.

#include <string>
#include <utility>
#include <vector>

#include "capskd/tensor.hpp"

namespace capskd {

struct Checkpoint {
  std::string meta;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace capskd
