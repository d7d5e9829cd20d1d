#include "core/probes.hpp"

#include <algorithm>
#include <cmath>

namespace al {

// --- shared evaluation helpers -------------------------------------------

std::string greedy_answer(const Checkpoint& ckpt, const TaskItem& item,
                          const InterventionSpec* spec, int max_new) {
  std::vector<int> prompt;
  prompt.push_back(tok::BOS);
  for (int t : tok::encode(item.question)) prompt.push_back(t);
  GenerateOptions go;
  go.max_new = max_new >= 0 ? max_new : int(item.answer.size()) + 2;
  go.temperature = 0.0;
  go.stop_token = tok::SENTINEL;
  go.spec = spec;
  std::vector<int> completion = generate(ckpt, prompt, go);
  std::string out;
  for (int t : completion) {
    if (t == tok::SENTINEL) break;
    out.push_back(tok::decode_char_lossy(t));
  }
  return out;
}

std::map<int, bool> correctness_map(const Checkpoint& ckpt,
                                    const std::vector<const TaskItem*>& items,
                                    const InterventionSpec* spec) {
  std::map<int, bool> out;
  for (const TaskItem* it : items)
    out[it->id] = greedy_answer(ckpt, *it, spec) == it->answer;
  return out;
}

double accuracy(const Checkpoint& ckpt, const std::vector<const TaskItem*>& items,
                const InterventionSpec* spec) {
  check(!items.empty(), "accuracy: empty item list");
  int hits = 0;
  for (const TaskItem* it : items)
    if (greedy_answer(ckpt, *it, spec) == it->answer) ++hits;
  return double(hits) / double(items.size());
}

// --- perplexity -----------------------------------------------------------

PplMode ppl_mode_from_string(const std::string& s) {
  if (s == "answer_only") return PplMode::answer_only;
  if (s == "full_text") return PplMode::full_text;
  fail_config("unknown perplexity mode '" + s + "'");
}

std::string to_string(PplMode m) {
  return m == PplMode::answer_only ? "answer_only" : "full_text";
}

double perplexity(const Checkpoint& ckpt, const std::vector<int>& prompt_tokens,
                  const std::vector<int>& answer_tokens, PplMode mode) {
  check(!answer_tokens.empty(), "perplexity: empty scored region");
  std::vector<int> seq;
  seq.reserve(prompt_tokens.size() + answer_tokens.size() + 1);
  seq.push_back(tok::BOS);
  seq.insert(seq.end(), prompt_tokens.begin(), prompt_tokens.end());
  seq.insert(seq.end(), answer_tokens.begin(), answer_tokens.end());

  ForwardResult res = forward(ckpt, seq);
  // Position p predicts seq[p+1]; answer tokens sit at indices
  // [1+|prompt|, |seq|), so their predictor positions start at |prompt|.
  int first = mode == PplMode::answer_only ? int(prompt_tokens.size()) : 0;
  int last = int(seq.size()) - 1;  // exclusive
  const int V = ckpt.config.vocab_size;
  double nll_sum = 0.0;
  int n = 0;
  for (int p = first; p < last; ++p) {
    double lse = logsumexp(res.logits[p], V);
    double lp = res.logits[p][seq[p + 1]] - lse;
    nll_sum -= lp;
    ++n;
  }
  check(n > 0, "perplexity: empty scored region");
  double v = std::exp(nll_sum / n);
  return std::isnan(v) ? std::numeric_limits<double>::infinity() : v;
}

ParadoxScan paradox_scan(std::vector<CheckpointRef> checkpoints, const EvalSet& eval_set) {
  check(checkpoints.size() >= 2, "paradox_scan: needs at least 2 checkpoints");
  std::sort(checkpoints.begin(), checkpoints.end(),
            [](const CheckpointRef& a, const CheckpointRef& b) { return a.step < b.step; });
  check(checkpoints.front().step == 0, "paradox_scan: step-0 checkpoint required");

  const Split splits[] = {Split::eval_contaminated, Split::eval_clean};
  const PplMode modes[] = {PplMode::answer_only, PplMode::full_text};

  ParadoxScan out;
  std::map<std::string, std::map<std::string, std::vector<double>>> series;  // split -> mode -> per-ckpt mean

  for (const CheckpointRef& cr : checkpoints) {
    check(cr.ckpt != nullptr, "paradox_scan: null checkpoint");
    for (Split sp : splits) {
      auto items = eval_set.in_split(sp);
      check(!items.empty(), "paradox_scan: empty split " + to_string(sp));
      for (PplMode mode : modes) {
        // Split-level PPL is the geometric mean of item PPLs — the exp of
        // the mean per-item NLL, i.e. the split treated as one corpus. An
        // arithmetic mean would let a single diverged item dominate.
        double log_sum = 0.0;
        for (const TaskItem* it : items) {
          double v = perplexity(*cr.ckpt, tok::encode(it->question),
                                tok::encode(it->answer), mode);
          out.records.push_back({it->id, to_string(sp), to_string(mode),
                                 cr.ckpt->label, cr.step, v});
          log_sum += std::log(v);
        }
        double mean = std::exp(log_sum / double(items.size()));
        out.means.push_back({cr.step, cr.ckpt->label, to_string(sp), to_string(mode),
                             mean, int(items.size())});
        series[to_string(sp)][to_string(mode)].push_back(mean);
      }
    }
  }

  for (auto& [sp, by_mode] : series) {
    const auto& ans = by_mode["answer_only"];
    const auto& full = by_mode["full_text"];
    ParadoxEntry e;
    e.answer_first = ans.front();
    e.answer_last = ans.back();
    e.full_first = full.front();
    e.full_last = full.back();
    e.divergence = (e.answer_last < e.answer_first) && (e.full_last > e.full_first);
    out.summary[sp] = e;
  }
  return out;
}

// --- ROUGE-L ---------------------------------------------------------------

Rouge rouge_l(std::span<const int> candidate, std::span<const int> reference) {
  check(!reference.empty(), "rouge_l: empty reference");
  if (candidate.empty()) return {0.0, 0.0, 0.0};
  const size_t n = candidate.size(), m = reference.size();
  std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
  for (size_t i = 1; i <= n; ++i) {
    for (size_t j = 1; j <= m; ++j)
      cur[j] = candidate[i - 1] == reference[j - 1] ? prev[j - 1] + 1
                                                    : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  int lcs = prev[m];
  if (lcs == 0) return {0.0, 0.0, 0.0};
  double p = double(lcs) / double(n), r = double(lcs) / double(m);
  return {2.0 * p * r / (p + r), p, r};
}

// --- partial-prompt evaluation ---------------------------------------------

std::vector<PartialRow> partial_prompt_eval(const Checkpoint& ckpt, const EvalSet& eval_set,
                                            const std::vector<double>& ratios,
                                            int max_items_per_group) {
  check(!ratios.empty(), "partial_prompt_eval: empty ratio list");
  for (size_t i = 0; i < ratios.size(); ++i) {
    check(ratios[i] > 0.0 && ratios[i] <= 1.0, "partial_prompt_eval: ratio outside (0,1]");
    if (i) check(ratios[i] >= ratios[i - 1], "partial_prompt_eval: ratios must be sorted");
  }

  // Group by class label when present, else by split.
  std::map<std::string, std::vector<const TaskItem*>> groups;
  for (const auto& it : eval_set.items) {
    if (it.split == Split::pretrain_only) continue;
    auto lbl = eval_set.class_labels.find(it.id);
    std::string g = lbl != eval_set.class_labels.end() ? to_string(lbl->second)
                                                       : to_string(it.split);
    auto& v = groups[g];
    if (max_items_per_group <= 0 || int(v.size()) < max_items_per_group) v.push_back(&it);
  }

  std::vector<PartialRow> rows;
  for (double ratio : ratios) {
    for (const auto& [group, items] : groups) {
      double rouge_sum = 0.0;
      int acc = 0;
      for (const TaskItem* it : items) {
        std::vector<int> q = tok::encode(it->question);
        int keep = int(std::ceil(ratio * double(q.size())));
        check(keep >= 1, "partial_prompt_eval: ratio produced an empty prompt");
        std::vector<int> prompt;
        prompt.push_back(tok::BOS);
        prompt.insert(prompt.end(), q.begin(), q.begin() + keep);

        GenerateOptions go;
        go.max_new = int(q.size()) - keep + int(it->answer.size()) + 3;
        go.temperature = 0.0;
        go.stop_token = tok::SENTINEL;
        std::vector<int> completion = generate(ckpt, prompt, go);

        std::vector<int> cand(completion);
        if (!cand.empty() && cand.back() == tok::SENTINEL) cand.pop_back();
        std::vector<int> ref = tok::encode(it->answer);
        rouge_sum += rouge_l(cand, ref).f;

        std::string full_text = it->question.substr(0, keep) + tok::decode_lossy(completion);
        if (full_text == it->rendering()) ++acc;
      }
      rows.push_back({ratio, group, items.empty() ? 0.0 : rouge_sum / items.size(),
                      items.empty() ? 0.0 : double(acc) / items.size(), int(items.size())});
    }
  }
  return rows;
}

// --- path patching ----------------------------------------------------------

namespace {

struct PatchTally {
  int hits_truth = 0, hits_tuned = 0;
};

// Runs the donor capture and both reference answers once for `item`, then the
// patched generation for each requested (layer, component) cell.
void patch_one_item(const Checkpoint& base, const Checkpoint& tuned, const TaskItem& item,
                    const std::vector<std::pair<int, Component>>& cells,
                    std::vector<PatchTally>& tallies, int& tuned_correct, int& base_correct) {
  std::vector<int> prompt;
  prompt.push_back(tok::BOS);
  for (int t : tok::encode(item.question)) prompt.push_back(t);

  ActivationTrace tr;
  forward(tuned, prompt, nullptr, &tr);

  std::string tuned_ans = greedy_answer(tuned, item);
  std::string base_ans = greedy_answer(base, item);
  if (tuned_ans == item.answer) ++tuned_correct;
  if (base_ans == item.answer) ++base_correct;

  InterventionSpec spec;
  spec.kind = InterventionSpec::Kind::patch_activation;
  spec.positions.resize(prompt.size());
  for (size_t p = 0; p < prompt.size(); ++p) spec.positions[p] = int(p);

  for (size_t cidx = 0; cidx < cells.size(); ++cidx) {
    auto [layer, component] = cells[cidx];
    spec.layer = layer;
    spec.component = component;
    spec.payload = component == Component::mlp ? tr.mlp_out[layer] : tr.attn_out[layer];
    std::string patched = greedy_answer(base, item, &spec);
    if (patched == tuned_ans) {
      ++tallies[cidx].hits_tuned;
      if (patched == item.answer) ++tallies[cidx].hits_truth;
    }
  }
}

std::vector<PatchResult> patch_cells(const Checkpoint& base, const Checkpoint& tuned,
                                     const std::vector<std::pair<int, Component>>& cells,
                                     const std::vector<const TaskItem*>& items) {
  check(base.config == tuned.config, "path_patch: checkpoint configs differ");
  check(!items.empty(), "path_patch: empty item list");
  for (auto& [layer, component] : cells)
    check(layer >= 0 && layer < base.config.n_layers, "path_patch: layer out of range");

  std::vector<PatchTally> tallies(cells.size());
  int tuned_correct = 0, base_correct = 0;
  for (const TaskItem* it : items)
    patch_one_item(base, tuned, *it, cells, tallies, tuned_correct, base_correct);

  double n = double(items.size());
  std::vector<PatchResult> out;
  out.reserve(cells.size());
  for (size_t cidx = 0; cidx < cells.size(); ++cidx)
    out.push_back({cells[cidx].first, cells[cidx].second, tallies[cidx].hits_truth / n,
                   tallies[cidx].hits_tuned / n, tuned_correct / n, base_correct / n,
                   int(items.size())});
  return out;
}

}  // namespace

PatchResult path_patch(const Checkpoint& base, const Checkpoint& tuned, int layer,
                       Component component, const std::vector<const TaskItem*>& items) {
  return patch_cells(base, tuned, {{layer, component}}, items)[0];
}

std::vector<PatchResult> path_patch_sweep(const Checkpoint& base, const Checkpoint& tuned,
                                          const std::vector<const TaskItem*>& items) {
  std::vector<std::pair<int, Component>> cells;
  for (int l = 0; l < base.config.n_layers; ++l) {
    cells.emplace_back(l, Component::mlp);
    cells.emplace_back(l, Component::attn);
  }
  return patch_cells(base, tuned, cells, items);
}

// --- Jensen-Shannon divergence ----------------------------------------------

double jsd(std::span<const double> p, std::span<const double> q) {
  check(p.size() == q.size() && !p.empty(), "jsd: length mismatch");
  double sp = 0.0, sq = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    check(p[i] >= 0.0 && q[i] >= 0.0, "jsd: negative probability");
    sp += p[i];
    sq += q[i];
  }
  check(std::fabs(sp - 1.0) <= 1e-6 && std::fabs(sq - 1.0) <= 1e-6,
        "jsd: inputs not normalized within 1e-6");
  double acc = 0.0;
  const double inv_log2 = 1.0 / std::log(2.0);
  for (size_t i = 0; i < p.size(); ++i) {
    double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) acc += 0.5 * p[i] * std::log(p[i] / m) * inv_log2;
    if (q[i] > 0.0) acc += 0.5 * q[i] * std::log(q[i] / m) * inv_log2;
  }
  return std::clamp(acc, 0.0, 1.0);
}

CfTarget cf_target_from_string(const std::string& s) {
  if (s == "up_mean") return CfTarget::up_mean;
  if (s == "gate_mean") return CfTarget::gate_mean;
  if (s == "down_random") return CfTarget::down_random;
  fail_config("unknown counterfactual target '" + s + "'");
}

std::string to_string(CfTarget t) {
  switch (t) {
    case CfTarget::up_mean: return "up_mean";
    case CfTarget::gate_mean: return "gate_mean";
    case CfTarget::down_random: return "down_random";
  }
  fail_invalid("bad counterfactual target");
}

Mat counterfactual_matrix(const Mat& src, CfTarget target, uint64_t seed,
                          bool per_column_mean) {
  Mat out(src.rows, src.cols);
  if (target == CfTarget::down_random) {
    double norm_src = frobenius_norm(src.data(), src.size());
    check(std::isfinite(norm_src), "counterfactual: non-finite Frobenius norm");
    Rng rng(derive_seed(seed, "cf_down_random"));
    for (auto& x : out.v) x = rng.gaussian();
    double norm_init = frobenius_norm(out.data(), out.size());
    double s = norm_init > 0.0 ? norm_src / norm_init : 0.0;
    for (auto& x : out.v) x *= s;
    return out;
  }
  if (per_column_mean) {
    for (int j = 0; j < src.cols; ++j) {
      double m = 0.0;
      for (int i = 0; i < src.rows; ++i) m += src[i][j];
      m /= src.rows;
      for (int i = 0; i < src.rows; ++i) out[i][j] = m;
    }
  } else {
    double m = 0.0;
    for (double x : src.v) m += x;
    check(std::isfinite(m), "counterfactual: non-finite matrix mean");
    m /= double(src.size());
    std::fill(out.v.begin(), out.v.end(), m);
  }
  return out;
}

namespace {

// Sequence and answer-predicting positions for a teacher-forced item.
struct ItemSeq {
  std::vector<int> seq;
  int first_pred = 0;  // first position predicting an answer token
  int n_pred = 0;
};

ItemSeq item_sequence(const TaskItem& it) {
  ItemSeq s;
  s.seq.push_back(tok::BOS);
  for (int t : tok::encode(it.question + it.answer)) s.seq.push_back(t);
  s.first_pred = int(it.question.size());  // BOS shifts question to 1..|q|
  s.n_pred = int(it.answer.size());
  return s;
}

// Reference softmax rows at answer-predicting positions for each item.
std::vector<Mat> untouched_finals(const Checkpoint& ckpt, const std::vector<ItemSeq>& seqs) {
  const int V = ckpt.config.vocab_size;
  std::vector<Mat> finals(seqs.size());
  for (size_t i = 0; i < seqs.size(); ++i) {
    ForwardResult res = forward(ckpt, seqs[i].seq);
    Mat probs(seqs[i].n_pred, V);
    for (int p = 0; p < seqs[i].n_pred; ++p) {
      std::copy_n(res.logits[seqs[i].first_pred + p], V, probs[p]);
      softmax_row(probs[p], V);
    }
    finals[i] = std::move(probs);
  }
  return finals;
}

JsdRecord cf_jsd_one(const Checkpoint& ckpt, int layer, CfTarget target,
                     const std::vector<ItemSeq>& seqs, const std::vector<Mat>& finals,
                     uint64_t seed, bool per_column_mean) {
  const int V = ckpt.config.vocab_size;
  const Mat& src = target == CfTarget::up_mean     ? ckpt.w.layers[layer].w_up
                   : target == CfTarget::gate_mean ? ckpt.w.layers[layer].w_gate
                                                   : ckpt.w.layers[layer].w_down;
  InterventionSpec spec;
  spec.kind = InterventionSpec::Kind::override_weights;
  spec.layer = layer;
  Mat replacement = counterfactual_matrix(src, target, seed + uint64_t(layer), per_column_mean);
  if (target == CfTarget::up_mean)
    spec.w_up = std::move(replacement);
  else if (target == CfTarget::gate_mean)
    spec.w_gate = std::move(replacement);
  else
    spec.w_down = std::move(replacement);

  double sum = 0.0;
  int n_terms = 0;
  for (size_t i = 0; i < seqs.size(); ++i) {
    ActivationTrace tr;
    forward(ckpt, seqs[i].seq, &spec, &tr);
    const Mat& res_out = tr.residual_pre[layer + 1];
    for (int p = 0; p < seqs[i].n_pred; ++p) {
      std::vector<double> lens = logit_lens_probs(ckpt, res_out[seqs[i].first_pred + p]);
      sum += jsd(lens, std::span<const double>(finals[i][p], size_t(V)));
      ++n_terms;
    }
  }
  return {layer, to_string(target), sum / n_terms, int(seqs.size()), seed};
}

}  // namespace

std::vector<JsdRecord> counterfactual_jsd_sweep(const Checkpoint& ckpt,
                                                const std::vector<CfTarget>& targets,
                                                const std::vector<const TaskItem*>& items,
                                                uint64_t seed, bool per_column_mean) {
  check(!items.empty(), "counterfactual_jsd: empty item list");
  check(!targets.empty(), "counterfactual_jsd: empty target list");
  std::vector<ItemSeq> seqs(items.size());
  for (size_t i = 0; i < items.size(); ++i) seqs[i] = item_sequence(*items[i]);
  std::vector<Mat> finals = untouched_finals(ckpt, seqs);

  std::vector<JsdRecord> records;
  for (int layer = 0; layer < ckpt.config.n_layers; ++layer)
    for (CfTarget target : targets)
      records.push_back(cf_jsd_one(ckpt, layer, target, seqs, finals, seed, per_column_mean));
  return records;
}

JsdRecord counterfactual_jsd(const Checkpoint& ckpt, int layer, CfTarget target,
                             const std::vector<const TaskItem*>& items, uint64_t seed,
                             bool per_column_mean) {
  check(layer >= 0 && layer < ckpt.config.n_layers, "counterfactual_jsd: layer out of range");
  check(!items.empty(), "counterfactual_jsd: empty item list");
  std::vector<ItemSeq> seqs(items.size());
  for (size_t i = 0; i < items.size(); ++i) seqs[i] = item_sequence(*items[i]);
  std::vector<Mat> finals = untouched_finals(ckpt, seqs);
  return cf_jsd_one(ckpt, layer, target, seqs, finals, seed, per_column_mean);
}

// --- linear probing -----------------------------------------------------------

namespace {

// Logistic regression via full-batch gradient descent; returns test AUC.
double logistic_auc(const std::vector<const std::vector<double>*>& X,
                    const std::vector<int>& y, double lambda, uint64_t split_seed) {
  const int n = int(X.size());
  const int d = int(X[0]->size());
  int n_pos = 0;
  for (int v : y) n_pos += v;
  check(n_pos >= 2 && n - n_pos >= 2, "linear_probe: needs >= 2 items per class");

  // Stratified fixed 70/30 split.
  std::vector<int> pos_idx, neg_idx;
  for (int i = 0; i < n; ++i) (y[i] ? pos_idx : neg_idx).push_back(i);
  Rng rng(derive_seed(split_seed, "probe_split"));
  rng.shuffle(pos_idx);
  rng.shuffle(neg_idx);
  std::vector<int> train, test;
  auto cut = [&](std::vector<int>& idx) {
    int k = std::max(1, int(0.7 * double(idx.size())));
    if (k == int(idx.size())) k = int(idx.size()) - 1;  // keep >=1 in test
    for (int i = 0; i < int(idx.size()); ++i) (i < k ? train : test).push_back(idx[i]);
  };
  cut(pos_idx);
  cut(neg_idx);

  // Standardize with training statistics.
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (int i : train)
    for (int j = 0; j < d; ++j) mean[j] += (*X[i])[j];
  for (double& m : mean) m /= double(train.size());
  for (int i : train)
    for (int j = 0; j < d; ++j) {
      double c = (*X[i])[j] - mean[j];
      sd[j] += c * c;
    }
  for (double& s : sd) {
    s = std::sqrt(s / double(train.size()));
    if (s < 1e-12) s = 1.0;  // constant feature -> zero after centering
  }
  auto feat = [&](int i, int j) { return ((*X[i])[j] - mean[j]) / sd[j]; };

  // Objective: sum_i log(1+exp(-y z)) + lambda/2 ||w||^2, plain GD.
  std::vector<double> w(d, 0.0);
  double b = 0.0;
  double lr = 1.0 / (0.25 * double(train.size()) + lambda);
  for (int epoch = 0; epoch < 400; ++epoch) {
    std::vector<double> gw(d, 0.0);
    double gb = 0.0;
    for (int i : train) {
      double z = b;
      for (int j = 0; j < d; ++j) z += w[j] * feat(i, j);
      double yy = y[i] ? 1.0 : -1.0;
      double g = -yy / (1.0 + std::exp(yy * z));
      for (int j = 0; j < d; ++j) gw[j] += g * feat(i, j);
      gb += g;
    }
    for (int j = 0; j < d; ++j) gw[j] += lambda * w[j];
    for (int j = 0; j < d; ++j) w[j] -= lr * gw[j];
    b -= lr * gb;
  }

  // Rank-statistic AUC with midranks on the held-out split.
  struct Scored {
    double s;
    int y;
  };
  std::vector<Scored> sc;
  for (int i : test) {
    double z = b;
    for (int j = 0; j < d; ++j) z += w[j] * feat(i, j);
    sc.push_back({z, y[i]});
  }
  std::sort(sc.begin(), sc.end(), [](const Scored& a, const Scored& b2) { return a.s < b2.s; });
  double rank_sum_pos = 0.0;
  size_t i = 0;
  int n1 = 0, n0 = 0;
  while (i < sc.size()) {
    size_t j = i;
    while (j < sc.size() && sc[j].s == sc[i].s) ++j;
    double midrank = 0.5 * double(i + 1 + j);  // average of ranks i+1..j
    for (size_t k2 = i; k2 < j; ++k2)
      if (sc[k2].y) rank_sum_pos += midrank;
    i = j;
  }
  for (const auto& s : sc) (s.y ? n1 : n0)++;
  check(n1 > 0 && n0 > 0, "linear_probe: held-out split lost a class");
  return (rank_sum_pos - 0.5 * double(n1) * double(n1 + 1)) / (double(n1) * double(n0));
}

}  // namespace

double linear_probe_auc(const std::vector<std::vector<double>>& features,
                        const std::vector<int>& labels, double lambda, uint64_t split_seed) {
  check(features.size() == labels.size() && !features.empty(),
        "linear_probe: features/labels mismatch");
  std::vector<const std::vector<double>*> X;
  X.reserve(features.size());
  for (const auto& f : features) X.push_back(&f);
  return logistic_auc(X, labels, lambda, split_seed);
}

std::vector<double> linear_probe(const TrajectorySet& traces, double lambda) {
  check(!traces.items.empty(), "linear_probe: empty trajectory set");
  std::vector<double> aucs(traces.n_states);
  std::vector<int> labels;
  for (const auto& tj : traces.items) labels.push_back(tj.cls);
  for (int l = 0; l < traces.n_states; ++l) {
    std::vector<const std::vector<double>*> X;
    X.reserve(traces.items.size());
    for (const auto& tj : traces.items) X.push_back(&tj.states[l]);
    aucs[l] = logistic_auc(X, labels, lambda, 0x70333053u);
  }
  return aucs;
}

}  // namespace al
