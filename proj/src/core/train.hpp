#pragma once

// Pretraining on the contaminated corpus and spurious-reward REINFORCE
// fine-tuning that produces the checkpoint series the probes compare.

#include <functional>

#include "core/grad.hpp"
#include "core/tasks.hpp"

namespace al {

struct TrainConfig {
  int steps = 0;
  int batch_size = 8;
  double learning_rate = 0.05;
  uint64_t seed = 0;
  std::vector<int> checkpoint_steps;  // rlvr snapshots; sorted, within [0, steps]

  // pretrain
  int seq_len = 24;          // window length excluding BOS
  bool align_windows = true; // start windows at rendering boundaries (doc
                             // start or just after a sentinel) so training
                             // contexts match the BOS+question eval framing

  // optimizer
  double momentum = 0.9;
  double clip_norm = 1.0;

  // rlvr
  int max_new = 6;
  double rollout_temperature = 1.0;
  double kl_coeff = 0.0;
  double baseline_ema = 0.9;   // moving-average reward baseline
  double sigma_floor = 0.25;   // advantage normalization floor

  void validate(int total_steps_known = -1) const;
};

struct RewardMode {
  enum class Kind { correct, incorrect, random, format_only };
  Kind kind = Kind::correct;
  uint64_t seed = 0;  // random mode's reward stream
};

RewardMode::Kind reward_kind_from_string(const std::string& s);
std::string to_string(RewardMode::Kind k);

// Extract the answer from a generated completion: decoded characters up to
// (not including) the first sentinel.
std::string extract_answer(const std::vector<int>& completion);

// The fixed wrong answer rewarded by mode=incorrect: (oracle + 1) mod p,
// where p is the question's modulus (100 for the identity family).
std::string incorrect_target(const TaskItem& item);

// True iff the completion matches the answer template: 1-4 digits followed
// by the sentinel.
bool matches_answer_format(const std::vector<int>& completion);

using StepLogger = std::function<void(int step, double value)>;

// Next-token cross-entropy over seeded corpus windows. steps == 0 returns
// the seeded initialization unchanged.
Checkpoint pretrain(const Corpus& corpus, const ModelConfig& mc, const TrainConfig& tc,
                    const StepLogger& log = nullptr);

// Single-sample REINFORCE over eval prompts (eval_contaminated and
// eval_clean splits) with the mode's reward, EMA baseline, normalized
// advantages, and optional KL-to-base. Returns (step, checkpoint) snapshots
// at checkpoint_steps; the step-0 entry is the untouched base.
std::vector<std::pair<int, Checkpoint>> spurious_rlvr(const Checkpoint& base,
                                                      const EvalSet& prompts,
                                                      const RewardMode& mode,
                                                      const TrainConfig& tc,
                                                      const StepLogger& log = nullptr);

}  // namespace al
