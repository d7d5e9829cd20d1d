#pragma once

// Model weights and the checkpoint wrapper (weights + provenance).
//
// Layout conventions (all row-major double):
//   embed      V x d        token embeddings
//   per layer:
//     attn_norm   d          rms-norm scale before attention
//     wq,wk,wv    d x d      projections (heads are contiguous column blocks)
//     wo          d x d      output projection
//     mlp_norm    d          rms-norm scale before the MLP
//     w_gate      d x m      gate projection
//     w_up        d x m      up projection
//     w_down      m x d      down projection (row i is neuron i's write vector)
//   final_norm  d            rms-norm scale before the unembedding
//   unembed     d x V

#include <string>
#include <vector>

#include "core/config.hpp"
#include "core/tensor.hpp"

namespace al {

struct LayerWeights {
  Mat attn_norm;  // 1 x d
  Mat wq, wk, wv, wo;
  Mat mlp_norm;  // 1 x d
  Mat w_gate, w_up, w_down;

  bool operator==(const LayerWeights&) const = default;
};

struct Weights {
  Mat embed;
  std::vector<LayerWeights> layers;
  Mat final_norm;  // 1 x d
  Mat unembed;

  static Weights zeros(const ModelConfig& c);

  // Elementwise in-place ops used by optimizers and gradient buffers.
  template <typename F>
  void for_each(F&& f) {
    f(embed);
    for (auto& l : layers) {
      f(l.attn_norm); f(l.wq); f(l.wk); f(l.wv); f(l.wo);
      f(l.mlp_norm); f(l.w_gate); f(l.w_up); f(l.w_down);
    }
    f(final_norm);
    f(unembed);
  }
  template <typename F>
  void for_each(const Weights& o, F&& f) {
    f(embed, o.embed);
    for (size_t i = 0; i < layers.size(); ++i) {
      auto& a = layers[i];
      const auto& b = o.layers[i];
      f(a.attn_norm, b.attn_norm); f(a.wq, b.wq); f(a.wk, b.wk); f(a.wv, b.wv);
      f(a.wo, b.wo); f(a.mlp_norm, b.mlp_norm); f(a.w_gate, b.w_gate);
      f(a.w_up, b.w_up); f(a.w_down, b.w_down);
    }
    f(final_norm, o.final_norm);
    f(unembed, o.unembed);
  }

  void zero_all() { for_each([](Mat& m) { m.zero(); }); }
  size_t param_count() const;
  bool operator==(const Weights&) const = default;
};

struct Checkpoint {
  ModelConfig config;
  Weights w;
  std::string label;
  uint64_t seed = 0;

  bool operator==(const Checkpoint&) const = default;
};

// Seeded random init: embeddings and norms small/unit, projections scaled
// by fan-in, residual-writing matrices (wo, w_down) additionally shrunk by
// sqrt(2*L) to keep the stream near unit scale at depth.
Checkpoint init_checkpoint(const ModelConfig& c, uint64_t seed, const std::string& label);

}  // namespace al
