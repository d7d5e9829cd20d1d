#include "core/surgery.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "core/probes.hpp"

namespace al {

// --- ablation ---------------------------------------------------------------

void AblationPlan::validate(int n_layers) const {
  auto check_set = [&](const std::vector<int>& layers, const char* which) {
    std::set<int> seen;
    for (int l : layers) {
      check(l >= 0 && l < n_layers, std::string("ablation plan: ") + which + " layer out of range");
      check(seen.insert(l).second, std::string("ablation plan: duplicate ") + which + " layer");
    }
  };
  check_set(reset_layers, "reset");
  check_set(keep_layers, "keep");
  for (int l : reset_layers)
    check(std::find(keep_layers.begin(), keep_layers.end(), l) == keep_layers.end(),
          "ablation plan: reset and keep sets overlap");
}

AblationPlan make_plan(const std::string& name, const std::vector<int>& anchor_band,
                       const std::vector<int>& adapter_band) {
  AblationPlan p;
  p.name = name;
  if (name == "anchor_reset") {
    p.family = AblationPlan::Family::reset;
    p.reset_layers = anchor_band;
  } else if (name == "adapter_reset") {
    p.family = AblationPlan::Family::reset;
    p.reset_layers = adapter_band;
  } else if (name == "keep_only_anchor") {
    p.family = AblationPlan::Family::keep;
    p.keep_layers = anchor_band;
  } else if (name == "keep_only_adapter") {
    p.family = AblationPlan::Family::keep;
    p.keep_layers = adapter_band;
  } else if (name == "keep_both") {
    p.family = AblationPlan::Family::keep;
    p.keep_layers = anchor_band;
    for (int l : adapter_band)
      if (std::find(p.keep_layers.begin(), p.keep_layers.end(), l) == p.keep_layers.end())
        p.keep_layers.push_back(l);
    std::sort(p.keep_layers.begin(), p.keep_layers.end());
  } else {
    fail_config("unknown ablation plan name '" + name + "'");
  }
  return p;
}

Checkpoint apply_ablation(const Checkpoint& tuned, const Checkpoint& base,
                          const AblationPlan& plan) {
  check(tuned.config == base.config, "apply_ablation: checkpoint configs differ");
  plan.validate(tuned.config.n_layers);

  Checkpoint out = plan.family == AblationPlan::Family::reset ? tuned : base;
  out.label = tuned.label + "+" + plan.name;
  auto copy_mlp = [&](int l, const Checkpoint& src) {
    out.w.layers[l].w_gate = src.w.layers[l].w_gate;
    out.w.layers[l].w_up = src.w.layers[l].w_up;
    out.w.layers[l].w_down = src.w.layers[l].w_down;
  };
  for (int l : plan.reset_layers) copy_mlp(l, base);
  for (int l : plan.keep_layers) copy_mlp(l, tuned);
  return out;
}

// --- neuron identification ----------------------------------------------------

namespace {

std::vector<int> item_sequence(const TaskItem& it) {
  std::vector<int> seq;
  seq.push_back(tok::BOS);
  for (int t : tok::encode(it.question + it.answer)) seq.push_back(t);
  return seq;
}

// Distinct answer token ids, ascending.
std::vector<int> answer_token_set(const TaskItem& it) {
  std::set<int> s;
  for (int t : tok::encode(it.answer)) s.insert(t);
  return {s.begin(), s.end()};
}

// Ten highest vocabulary entries of neuron i's head-projected write vector,
// per layer. Returned sorted ascending by token id for intersection tests.
std::vector<std::vector<int>> head_top10(const Checkpoint& ckpt, int layer) {
  const ModelConfig& c = ckpt.config;
  const int V = c.vocab_size;
  std::vector<std::vector<int>> tops(c.d_mlp);
  const Mat& w_down = ckpt.w.layers[layer].w_down;
  std::vector<double> logits(V);
  for (int i = 0; i < c.d_mlp; ++i) {
    logit_lens_logits(ckpt, w_down[i], logits.data());
    std::vector<int> order(V);
    for (int t = 0; t < V; ++t) order[t] = t;
    int top = std::min(10, V);
    std::partial_sort(order.begin(), order.begin() + top, order.end(), [&](int a, int b) {
      if (logits[a] != logits[b]) return logits[a] > logits[b];
      return a < b;
    });
    order.resize(top);
    std::sort(order.begin(), order.end());
    tops[i] = std::move(order);
  }
  return tops;
}

std::vector<NeuronSelection> identify_layers(const Checkpoint& ckpt,
                                             const std::vector<int>& layers,
                                             const std::vector<const TaskItem*>& items,
                                             double lambda, int k) {
  const ModelConfig& c = ckpt.config;
  check(!items.empty(), "identify_neurons: empty item list");
  check(lambda >= 0.0 && std::isfinite(lambda), "identify_neurons: lambda must be finite and >= 0");
  check(k >= 1 && k <= c.d_mlp, "identify_neurons: k out of range");
  for (int l : layers) check(l >= 0 && l < c.n_layers, "identify_neurons: layer out of range");

  const int m = c.d_mlp;
  std::vector<std::vector<double>> mean_abs(layers.size(), std::vector<double>(m, 0.0));
  std::vector<std::vector<double>> mean_overlap(layers.size(), std::vector<double>(m, 0.0));
  std::vector<std::vector<std::vector<int>>> tops(layers.size());
  for (size_t li = 0; li < layers.size(); ++li) tops[li] = head_top10(ckpt, layers[li]);

  for (const TaskItem* it : items) {
    std::vector<int> seq = item_sequence(*it);
    ActivationTrace tr;
    forward(ckpt, seq, nullptr, &tr, {/*logits_last_only=*/true});
    const int final_pos = int(seq.size()) - 1;
    std::vector<int> toks = answer_token_set(*it);
    for (size_t li = 0; li < layers.size(); ++li) {
      const double* keys = tr.mlp_keys[layers[li]][final_pos];
      for (int i = 0; i < m; ++i) {
        mean_abs[li][i] += std::fabs(keys[i]);
        int inter = 0;
        for (int t : toks)
          if (std::binary_search(tops[li][i].begin(), tops[li][i].end(), t)) ++inter;
        mean_overlap[li][i] += double(inter) / double(toks.size());
      }
    }
  }

  std::vector<NeuronSelection> out;
  for (size_t li = 0; li < layers.size(); ++li) {
    std::vector<double> score(m);
    for (int i = 0; i < m; ++i) {
      double ma = mean_abs[li][i] / double(items.size());
      double mo = mean_overlap[li][i] / double(items.size());
      score[i] = ma * (1.0 + lambda * mo);
    }
    std::vector<int> order(m);
    for (int i = 0; i < m; ++i) order[i] = i;
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
      if (score[a] != score[b]) return score[a] > score[b];
      return a < b;
    });
    order.resize(k);
    std::sort(order.begin(), order.end());
    NeuronSelection sel;
    sel.layer = layers[li];
    sel.indices = order;
    sel.scores.reserve(k);
    for (int i : order) sel.scores.push_back(score[i]);
    sel.lambda = lambda;
    sel.k = k;
    out.push_back(std::move(sel));
  }
  return out;
}

}  // namespace

NeuronSelection identify_neurons(const Checkpoint& ckpt, int layer,
                                 const std::vector<const TaskItem*>& items, double lambda,
                                 int k) {
  return identify_layers(ckpt, {layer}, items, lambda, k).front();
}

std::vector<NeuronSelection> identify_all_layers(const Checkpoint& ckpt,
                                                 const std::vector<const TaskItem*>& items,
                                                 double lambda, int k) {
  std::vector<int> layers(ckpt.config.n_layers);
  for (int l = 0; l < ckpt.config.n_layers; ++l) layers[l] = l;
  return identify_layers(ckpt, layers, items, lambda, k);
}

// --- steering -----------------------------------------------------------------

std::vector<std::pair<std::string, std::vector<const TaskItem*>>> eval_groups(
    const EvalSet& eval_set) {
  std::vector<std::pair<std::string, std::vector<const TaskItem*>>> groups;
  for (Split s : {Split::eval_contaminated, Split::eval_clean}) {
    auto items = eval_set.in_split(s);
    if (!items.empty()) groups.emplace_back(to_string(s), std::move(items));
  }
  if (!eval_set.class_labels.empty()) {
    for (ClassLabel cl : {ClassLabel::Leakage, ClassLabel::Stable}) {
      std::vector<const TaskItem*> items;
      for (const TaskItem* it : eval_set.in_split(Split::eval_contaminated)) {
        auto f = eval_set.class_labels.find(it->id);
        if (f != eval_set.class_labels.end() && f->second == cl) items.push_back(it);
      }
      if (!items.empty()) groups.emplace_back(to_string(cl), std::move(items));
    }
  }
  check(!groups.empty(), "eval_groups: no eval items");
  return groups;
}

namespace {

InterventionSpec steering_intervention(const ModelConfig& cfg, const NeuronSelection& sel,
                                       double alpha) {
  check(!sel.indices.empty(), "steer: empty neuron selection");
  for (int i : sel.indices)
    check(i >= 0 && i < cfg.d_mlp, "steer: neuron index out of range");
  InterventionSpec spec;
  spec.kind = InterventionSpec::Kind::scale_keys;
  spec.layer = sel.layer;
  spec.neurons = sel.indices;
  spec.alpha = alpha;
  return spec;
}

}  // namespace

SteerOutcome steer(const Checkpoint& ckpt, const SteeringSpec& spec, const EvalSet& eval_set) {
  check(spec.selection.layer >= 0 && spec.selection.layer < ckpt.config.n_layers,
        "steer: layer out of range");
  check(std::isfinite(spec.alpha) && spec.alpha >= 0.0, "steer: alpha must be finite and >= 0");
  InterventionSpec iv = steering_intervention(ckpt.config, spec.selection, spec.alpha);

  SteerOutcome out;
  auto groups = eval_groups(eval_set);
  std::map<int, bool> steered_ok;  // shared across overlapping groups
  std::map<int, bool> base_ok;
  for (auto& [name, items] : groups) {
    int hit = 0, base_hit = 0;
    for (const TaskItem* it : items) {
      auto f = steered_ok.find(it->id);
      if (f == steered_ok.end()) {
        std::string ans = greedy_answer(ckpt, *it, &iv);
        f = steered_ok.emplace(it->id, ans == it->answer).first;
        base_ok.emplace(it->id, greedy_answer(ckpt, *it) == it->answer);
        out.outputs.emplace_back(it->id, std::move(ans));
      }
      if (f->second) ++hit;
      if (base_ok[it->id]) ++base_hit;
    }
    double acc = double(hit) / double(items.size());
    double base_acc = double(base_hit) / double(items.size());
    out.rows.push_back({name, acc, acc - base_acc, int(items.size())});
  }
  std::sort(out.outputs.begin(), out.outputs.end());
  return out;
}

double mean_key_activation(const Checkpoint& ckpt, const NeuronSelection& sel,
                           const std::vector<const TaskItem*>& items) {
  return mean_key_activation(ckpt, std::vector<NeuronSelection>{sel}, items).front();
}

std::vector<double> mean_key_activation(const Checkpoint& ckpt,
                                        const std::vector<NeuronSelection>& sels,
                                        const std::vector<const TaskItem*>& items) {
  check(!sels.empty(), "mean_key_activation: no selections");
  check(!items.empty(), "mean_key_activation: empty item list");
  for (const auto& s : sels) {
    check(!s.indices.empty(), "mean_key_activation: empty selection");
    check(s.layer >= 0 && s.layer < ckpt.config.n_layers,
          "mean_key_activation: layer out of range");
    for (int i : s.indices)
      check(i >= 0 && i < ckpt.config.d_mlp, "mean_key_activation: neuron index out of range");
  }

  std::vector<double> sums(sels.size(), 0.0);
  std::vector<long> counts(sels.size(), 0);
  for (const TaskItem* it : items) {
    std::vector<int> seq = item_sequence(*it);
    ActivationTrace tr;
    forward(ckpt, seq, nullptr, &tr, {/*logits_last_only=*/true});
    // Answer tokens occupy the last |answer| positions of the sequence.
    const int first_ans = int(seq.size()) - int(it->answer.size());
    for (size_t si = 0; si < sels.size(); ++si) {
      const Mat& keys = tr.mlp_keys[sels[si].layer];
      for (int p = first_ans; p < int(seq.size()); ++p)
        for (int i : sels[si].indices) {
          sums[si] += std::fabs(keys[p][i]);
          ++counts[si];
        }
    }
  }
  std::vector<double> out(sels.size());
  for (size_t si = 0; si < sels.size(); ++si)
    out[si] = counts[si] ? sums[si] / double(counts[si]) : 0.0;
  return out;
}

// --- steering grid --------------------------------------------------------------

std::vector<GridRow> steering_grid(const Checkpoint& ckpt, const EvalSet& eval_set,
                                   const std::vector<double>& alphas, double lambda, int k,
                                   const std::vector<NeuronSelection>* selections) {
  check(!alphas.empty(), "steering_grid: empty alpha list");
  bool has_one = false;
  for (double a : alphas) {
    check(std::isfinite(a) && a >= 0.0, "steering_grid: alpha must be finite and >= 0");
    if (a == 1.0) has_one = true;
  }
  check(has_one, "steering_grid: alphas must include 1.0");

  auto groups = eval_groups(eval_set);

  std::vector<NeuronSelection> sels;
  if (selections) {
    check(int(selections->size()) == ckpt.config.n_layers,
          "steering_grid: need one selection per layer");
    for (int l = 0; l < ckpt.config.n_layers; ++l)
      check((*selections)[l].layer == l, "steering_grid: selections out of order");
    sels = *selections;
  } else {
    // Selections per layer from the contaminated split (falls back to the
    // first group when that split is absent).
    const std::vector<const TaskItem*>* sel_items = &groups.front().second;
    for (auto& [name, items] : groups)
      if (name == to_string(Split::eval_contaminated)) sel_items = &items;
    sels = identify_all_layers(ckpt, *sel_items, lambda, k);
  }

  // Unsteered baseline accuracy per group, reused verbatim for alpha = 1.
  std::map<int, bool> base_ok;
  std::map<std::string, double> baseline;
  for (auto& [name, items] : groups) {
    int hit = 0;
    for (const TaskItem* it : items) {
      auto f = base_ok.find(it->id);
      if (f == base_ok.end())
        f = base_ok.emplace(it->id, greedy_answer(ckpt, *it) == it->answer).first;
      if (f->second) ++hit;
    }
    baseline[name] = double(hit) / double(items.size());
  }

  std::vector<GridRow> rows;
  for (const NeuronSelection& sel : sels) {
    for (double a : alphas) {
      if (a == 1.0) {
        for (auto& [name, items] : groups)
          rows.push_back({sel.layer, a, name, baseline[name], 0.0, int(items.size())});
        continue;
      }
      InterventionSpec iv = steering_intervention(ckpt.config, sel, a);
      std::map<int, bool> ok;
      for (auto& [name, items] : groups) {
        int hit = 0;
        for (const TaskItem* it : items) {
          auto f = ok.find(it->id);
          if (f == ok.end())
            f = ok.emplace(it->id, greedy_answer(ckpt, *it, &iv) == it->answer).first;
          if (f->second) ++hit;
        }
        double acc = double(hit) / double(items.size());
        rows.push_back({sel.layer, a, name, acc, acc - baseline[name], int(items.size())});
      }
    }
  }
  return rows;
}

}  // namespace al
