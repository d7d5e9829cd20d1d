#pragma once

// Weight-level ablations between checkpoint pairs, neuron identification,
// and key-scaling causal steering.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "core/model.hpp"
#include "core/tasks.hpp"

namespace al {

// --- ablation ---------------------------------------------------------------

// Two families:
//   reset: start from `tuned`; MLP matrices at reset_layers take `base`'s.
//   keep:  start from `base`; MLP matrices at keep_layers take `tuned`'s.
// Both sets may be given (they must be disjoint); layers in neither set get
// the family's starting weights. Touches w_gate/w_up/w_down only.
struct AblationPlan {
  enum class Family { reset, keep };
  std::string name = "custom";
  Family family = Family::reset;
  std::vector<int> reset_layers;  // take base MLP weights
  std::vector<int> keep_layers;   // take tuned MLP weights

  void validate(int n_layers) const;
};

AblationPlan make_plan(const std::string& name, const std::vector<int>& anchor_band,
                       const std::vector<int>& adapter_band);

Checkpoint apply_ablation(const Checkpoint& tuned, const Checkpoint& base,
                          const AblationPlan& plan);

// --- neuron identification ----------------------------------------------------

struct NeuronSelection {
  int layer = 0;
  std::vector<int> indices;    // ascending, |indices| = k
  std::vector<double> scores;  // aligned with indices
  double lambda = 1.0;
  int k = 10;
};

// Relevance score per neuron i at `layer`:
//   s_i = mean_items |k_i at final answer position|
//         * (1 + lambda * mean_items |Top10(v_i) ∩ Tokens(answer)| / |Tokens(answer)|)
// where v_i projects W_down row i through the head and Tokens(answer) is the
// set of distinct answer token ids. Top-k by score, ties favor lower index.
NeuronSelection identify_neurons(const Checkpoint& ckpt, int layer,
                                 const std::vector<const TaskItem*>& items,
                                 double lambda = 1.0, int k = 10);

// Same scoring for every layer using one traced forward per item.
std::vector<NeuronSelection> identify_all_layers(const Checkpoint& ckpt,
                                                 const std::vector<const TaskItem*>& items,
                                                 double lambda = 1.0, int k = 10);

// --- steering -----------------------------------------------------------------

struct SteeringSpec {
  NeuronSelection selection;
  double alpha = 1.0;
};

struct SteerRow {
  std::string group;  // split name, or class label when labels are present
  double accuracy = 0;
  double delta = 0;  // accuracy - unsteered accuracy on the same group
  int n_items = 0;
};

struct SteerOutcome {
  std::vector<SteerRow> rows;
  std::vector<std::pair<int, std::string>> outputs;  // item id -> steered answer
};

// Greedy accuracy per group with keys scaled by alpha at the selection,
// against the unsteered baseline. Groups: each eval split, plus Leakage and
// Stable (within the contaminated split) when class labels are present.
SteerOutcome steer(const Checkpoint& ckpt, const SteeringSpec& spec, const EvalSet& eval_set);

// Mean |k| over items, answer-token positions, and the selected neurons.
double mean_key_activation(const Checkpoint& ckpt, const NeuronSelection& sel,
                           const std::vector<const TaskItem*>& items);
std::vector<double> mean_key_activation(const Checkpoint& ckpt,
                                        const std::vector<NeuronSelection>& sels,
                                        const std::vector<const TaskItem*>& items);

// --- steering grid --------------------------------------------------------------

struct GridRow {
  int layer = 0;
  double alpha = 0;
  std::string split;
  double accuracy = 0;
  double delta = 0;
  int n_items = 0;
};

// One steer run per (layer, alpha) with that layer's own identified neurons.
// alphas must contain 1.0; the alpha=1 rows carry the unsteered baseline
// value itself (no rerun), so that column is exact by construction.
// `selections` (one per layer, ascending) skips the identification pass.
std::vector<GridRow> steering_grid(const Checkpoint& ckpt, const EvalSet& eval_set,
                                   const std::vector<double>& alphas, double lambda = 1.0,
                                   int k = 10,
                                   const std::vector<NeuronSelection>* selections = nullptr);

// Shared grouping used by steer/steering_grid (exposed for the harness):
// every non-pretrain split present, then Leakage/Stable within the
// contaminated split when labels exist. Deterministic order.
std::vector<std::pair<std::string, std::vector<const TaskItem*>>> eval_groups(
    const EvalSet& eval_set);

}  // namespace al
