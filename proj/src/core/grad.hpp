#pragma once

// Reverse-mode gradients for the transformer, plus the SGD-with-momentum
// optimizer used by both training loops.

#include <span>

#include "core/model.hpp"

namespace al {

// Position-wise loss description, aligned with the input tokens: the state
// at position p predicts target[p] (usually tokens[p+1]) with weight[p].
// weight 0 (or target -1) leaves a position unscored. Loss:
//   sum_p weight[p] * (-log softmax(logits_p)[target_p])
// + sum_p kl_weight[p] * KL(pi_p || pi_base,p)        (if kl_base given)
struct LossSpec {
  std::vector<int> target;
  std::vector<double> weight;
  std::vector<double> kl_weight;       // empty = no KL term
  const Checkpoint* kl_base = nullptr; // must be set when kl_weight nonempty
};

// Runs forward with stashed intermediates, backpropagates, accumulates
// parameter gradients into `grad` (callers zero it when starting a batch).
// Returns the total loss.
double backward(const Checkpoint& ckpt, std::span<const int> tokens,
                const LossSpec& loss, Weights& grad);

// Loss only (same definition), for finite-difference checks.
double loss_only(const Checkpoint& ckpt, std::span<const int> tokens, const LossSpec& loss);

struct SgdConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

struct SgdState {
  Weights velocity;
  static SgdState zeros(const ModelConfig& c) { return {Weights::zeros(c)}; }
};

// Global-norm clip, then v = mu*v + g, w -= lr*v.
void sgd_step(Weights& w, Weights& grad, SgdState& st, const SgdConfig& cfg);

double grad_global_norm(const Weights& grad);

}  // namespace al
