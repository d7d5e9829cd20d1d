#pragma once

// Model hyperparameters. All-integer except the norm epsilon so checkpoints
// serialize exactly.

#include <cstdint>

#include "core/common.hpp"

namespace al {

struct ModelConfig {
  int32_t n_layers = 12;
  int32_t d_hidden = 128;
  int32_t d_mlp = 512;
  int32_t n_heads = 4;
  int32_t vocab_size = 512;
  int32_t max_seq_len = 128;
  double norm_eps = 1e-6;

  int32_t d_head() const { return d_hidden / n_heads; }

  void validate() const {
    check(n_layers >= 1, "config: n_layers must be >= 1", ErrKind::config);
    check(d_hidden >= 2, "config: d_hidden must be >= 2", ErrKind::config);
    check(n_heads >= 1 && d_hidden % n_heads == 0,
          "config: n_heads must divide d_hidden", ErrKind::config);
    check(d_head() % 2 == 0, "config: head dim must be even for rotary pairs",
          ErrKind::config);
    check(d_mlp >= 1, "config: d_mlp must be >= 1", ErrKind::config);
    check(vocab_size >= 2, "config: vocab_size must be >= 2", ErrKind::config);
    check(max_seq_len >= 2, "config: max_seq_len must be >= 2", ErrKind::config);
    check(norm_eps > 0.0, "config: norm_eps must be positive", ErrKind::config);
  }

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace al
