#pragma once

// Decoder-only transformer: forward pass with optional activation capture
// and interventions, logit lens readout, and autoregressive generation.
//
// Architecture per layer: rms-norm -> causal multi-head attention with
// rotary q/k -> residual add -> rms-norm -> gated MLP
// (keys = silu(x Wg) * (x Wu); out = keys Wd) -> residual add.
// Head: rms-norm (final scale) -> unembedding.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "core/checkpoint.hpp"

namespace al {

enum class Component { mlp, attn };

struct InterventionSpec {
  enum class Kind { capture_only, patch_activation, scale_keys, override_weights };
  Kind kind = Kind::capture_only;
  int layer = -1;

  // patch_activation: replace the component's output rows at `positions`
  // with rows of `payload` (one payload row per listed position).
  Component component = Component::mlp;
  std::vector<int> positions;
  Mat payload;

  // scale_keys: multiply the listed mlp key channels by alpha at every
  // position (alpha = 1 is an exact no-op by IEEE multiply identity).
  std::vector<int> neurons;
  double alpha = 1.0;

  // override_weights: swap in replacement MLP matrices at `layer`.
  std::optional<Mat> w_gate, w_up, w_down;
};

struct ActivationTrace {
  // residual_pre[l] is the residual stream entering layer l (T x d);
  // residual_pre[L] is the final residual before the head norm.
  std::vector<Mat> residual_pre;
  std::vector<Mat> attn_out;  // per layer, T x d, post-intervention
  std::vector<Mat> mlp_out;   // per layer, T x d, post-intervention
  std::vector<Mat> mlp_keys;  // per layer, T x d_mlp, post-intervention
  Mat final_logits;           // T x V
};

struct ForwardOptions {
  bool logits_last_only = false;  // fast path for generation
};

struct ForwardResult {
  Mat logits;  // T x V, or 1 x V when logits_last_only
};

ForwardResult forward(const Checkpoint& ckpt, std::span<const int> tokens,
                      const InterventionSpec* spec = nullptr,
                      ActivationTrace* trace = nullptr,
                      const ForwardOptions& opt = {});

// Keys of one MLP layer for a token sequence (T x d_mlp).
Mat mlp_keys(const Checkpoint& ckpt, std::span<const int> tokens, int layer);

// Project a residual-stream state through the head (final norm + unembed).
// Writes V logits; probs via softmax on top.
void logit_lens_logits(const Checkpoint& ckpt, const double* h, double* logits_out);
std::vector<double> logit_lens_probs(const Checkpoint& ckpt, const double* h);

struct GenerateOptions {
  int max_new = 8;
  double temperature = 0.0;  // 0 = greedy with lowest-index tie break
  uint64_t seed = 0;
  int stop_token = -1;  // emitted token that ends generation (included)
  const InterventionSpec* spec = nullptr;
};

// Returns generated tokens (completion only). Prefill plus incremental
// decode; intervention positions refer to absolute sequence positions and
// must fall inside the prompt.
std::vector<int> generate(const Checkpoint& ckpt, std::span<const int> prompt,
                          const GenerateOptions& opt);

// Activation dump round-trip in the container format.
void save_trace(const std::string& path, const ModelConfig& cfg, const ActivationTrace& t);
ActivationTrace load_trace(const std::string& path, ModelConfig* cfg_out = nullptr);

void rms_norm_row(const double* x, const double* scale, int n, double eps, double* out);

// Precomputed cos/sin of pos * theta_i for rotary rotations. The angles only
// depend on position and pair index, so one table serves every layer and head.
struct RotaryTable {
  int pairs = 0;
  std::vector<double> c, s;  // row-major (n_rows x pairs)
  void build(int n_rows, int first_pos, int d_head);
  const double* cos_row(int r) const { return c.data() + size_t(r) * pairs; }
  const double* sin_row(int r) const { return s.data() + size_t(r) * pairs; }
};

void apply_rotary(Mat& x, int n_heads, const RotaryTable& tab);
void apply_rotary_inverse(Mat& x, int n_heads, const RotaryTable& tab);

// Rotary rotation of q/k head blocks in place; rows are sequence positions
// starting at first_pos.
void apply_rotary(Mat& x, int n_heads, int first_pos = 0);

}  // namespace al
