#pragma once

// Binary tensor container shared by checkpoints, activation dumps, and
// fitted vector fields.
//
// Layout (all little-endian):
//   "ALCK"  magic
//   u32     format version (currently 1)
//   i32 x6  n_layers, d_hidden, d_mlp, n_heads, vocab_size, max_seq_len
//   f64     norm_eps
//   u64     seed
//   u32+u8* label (length-prefixed UTF-8)
//   u32     tensor count
//   per tensor: u32+u8* name, u8 dtype (0 = f64), u32 rank, u64 dims[rank],
//               payload as row-major f64

#include <string>
#include <vector>

#include "core/checkpoint.hpp"

namespace al {

struct NamedTensor {
  std::string name;
  std::vector<uint64_t> dims;
  std::vector<double> data;

  static NamedTensor from_mat(const std::string& name, const Mat& m) {
    return {name, {uint64_t(m.rows), uint64_t(m.cols)}, m.v};
  }
  Mat to_mat() const;
  uint64_t elem_count() const;
};

struct TensorBundle {
  ModelConfig config;
  uint64_t seed = 0;
  std::string label;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
  const NamedTensor& require(const std::string& name) const;
};

void save_bundle(const std::string& path, const TensorBundle& b);
TensorBundle load_bundle(const std::string& path);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Stable content hash of a whole file (used by run manifests).
uint64_t hash_file(const std::string& path);

}  // namespace al
