#pragma once

// Static analysis battery: perplexity scans, partial-prompt evaluation,
// path patching, counterfactual JSD, and linear probing.

#include <map>

#include "core/dynamics.hpp"
#include "core/model.hpp"
#include "core/tasks.hpp"

namespace al {

// --- shared evaluation helpers -------------------------------------------

// Greedy completion for an item's question; returns the extracted answer
// (characters before the first sentinel). max_new < 0 = answer length + 2.
std::string greedy_answer(const Checkpoint& ckpt, const TaskItem& item,
                          const InterventionSpec* spec = nullptr, int max_new = -1);

std::map<int, bool> correctness_map(const Checkpoint& ckpt,
                                    const std::vector<const TaskItem*>& items,
                                    const InterventionSpec* spec = nullptr);

double accuracy(const Checkpoint& ckpt, const std::vector<const TaskItem*>& items,
                const InterventionSpec* spec = nullptr);

// --- perplexity -----------------------------------------------------------

enum class PplMode { answer_only, full_text };
PplMode ppl_mode_from_string(const std::string& s);
std::string to_string(PplMode m);

// PPL = exp(mean over scored tokens of -log P(token | prefix)); the scored
// region is the answer tokens (answer_only) or prompt+answer (full_text).
// Zero-probability tokens give +infinity, never NaN.
double perplexity(const Checkpoint& ckpt, const std::vector<int>& prompt_tokens,
                  const std::vector<int>& answer_tokens, PplMode mode);

struct PpxRecord {
  int item_id = 0;
  std::string split;
  std::string mode;
  std::string ckpt_label;
  int step = 0;
  double value = 0.0;
};

struct CheckpointRef {
  int step = 0;
  const Checkpoint* ckpt = nullptr;
};

struct ParadoxEntry {
  double answer_first = 0, answer_last = 0, full_first = 0, full_last = 0;
  bool divergence = false;  // answer fell while full-text rose
};

struct ParadoxScan {
  std::vector<PpxRecord> records;  // per item
  struct MeanRow {
    int step;
    std::string label, split, mode;
    double mean_ppl;
    int n_items;
  };
  std::vector<MeanRow> means;                  // per (checkpoint, split, mode)
  std::map<std::string, ParadoxEntry> summary; // per split
};

// Requires >= 2 checkpoints including step 0; refs sorted by step inside.
ParadoxScan paradox_scan(std::vector<CheckpointRef> checkpoints, const EvalSet& eval_set);

// --- ROUGE-L ---------------------------------------------------------------

struct Rouge {
  double f = 0, p = 0, r = 0;
};
// LCS-based F measure; 0 when the candidate is empty; reference must be
// nonempty.
Rouge rouge_l(std::span<const int> candidate, std::span<const int> reference);

// --- partial-prompt evaluation ---------------------------------------------

struct PartialRow {
  double ratio = 0;
  std::string group;  // class label when labeled, else split name
  double mean_rouge = 0;
  double completion_accuracy = 0;
  int n_items = 0;
};

// For each item: prompt = first ceil(ratio*|question|) question tokens,
// greedy completion; ROUGE-L of the completion (sentinel stripped) against
// the answer; accuracy = the full text equals the item's exact rendering.
// max_items > 0 caps the items per group (first by id).
std::vector<PartialRow> partial_prompt_eval(const Checkpoint& ckpt, const EvalSet& eval_set,
                                            const std::vector<double>& ratios,
                                            int max_items_per_group = 0);

// --- path patching ----------------------------------------------------------

struct PatchResult {
  int layer = 0;
  Component component = Component::mlp;
  double recovery_accuracy = 0;  // patched base == tuned answer AND ground truth
  double tuned_match_rate = 0;   // patched base == tuned answer (secondary)
  double tuned_accuracy = 0;
  double base_accuracy = 0;
  int n_items = 0;
};

PatchResult path_patch(const Checkpoint& base, const Checkpoint& tuned, int layer,
                       Component component, const std::vector<const TaskItem*>& items);

// Full sweep over every (layer, component) cell, ordered layer-major with mlp
// before attn. Equivalent to calling path_patch per cell but captures each
// item's donor activations and reference answers once.
std::vector<PatchResult> path_patch_sweep(const Checkpoint& base, const Checkpoint& tuned,
                                          const std::vector<const TaskItem*>& items);

// --- Jensen-Shannon divergence ----------------------------------------------

// Base-2 JSD of two distributions over the same support; inputs must be
// normalized within 1e-6. Bounded by [0, 1].
double jsd(std::span<const double> p, std::span<const double> q);

enum class CfTarget { up_mean, gate_mean, down_random };
CfTarget cf_target_from_string(const std::string& s);
std::string to_string(CfTarget t);

// Replacement matrix: up/gate -> every entry is the source's global scalar
// mean (per-column mean behind the flag); down -> seeded Gaussian rescaled
// to the source's Frobenius norm.
Mat counterfactual_matrix(const Mat& src, CfTarget target, uint64_t seed,
                          bool per_column_mean = false);

struct JsdRecord {
  int layer = 0;
  std::string target;
  double mean_jsd = 0;
  int n_items = 0;
  uint64_t rng_seed = 0;
};

// Mean (over items and answer-predicting positions) of jsd between the
// logit-lens distribution at the intervened layer's output and the
// untouched model's final distribution at the same position.
JsdRecord counterfactual_jsd(const Checkpoint& ckpt, int layer, CfTarget target,
                             const std::vector<const TaskItem*>& items, uint64_t seed,
                             bool per_column_mean = false);

// All layers x targets in one pass (caches untouched final distributions).
std::vector<JsdRecord> counterfactual_jsd_sweep(const Checkpoint& ckpt,
                                                const std::vector<CfTarget>& targets,
                                                const std::vector<const TaskItem*>& items,
                                                uint64_t seed, bool per_column_mean = false);

// --- linear probing -----------------------------------------------------------

// Per-layer AUC of a logistic probe separating class 1 from class 0 states.
// Standardized features, L2 strength lambda, stratified fixed 70/30 split,
// AUC by the rank statistic on the held-out 30%.
std::vector<double> linear_probe(const TrajectorySet& traces, double lambda = 1.0);

// Single-layer variant on raw feature rows (used by tests and the AUC of
// synthetic data): features[i] is item i's vector, labels[i] in {0,1}.
double linear_probe_auc(const std::vector<std::vector<double>>& features,
                        const std::vector<int>& labels, double lambda = 1.0,
                        uint64_t split_seed = 0x70333053u);

}  // namespace al
