// Probe battery contracts: perplexity against independent recomputation,
// paradox-scan bookkeeping and divergence flags, partial-prompt scoring on a
// model with known behavior, patching identities, counterfactual matrices,
// and the linear-probe AUC on constructed data.

#include <doctest.h>

#include <cmath>
#include <vector>

#include "core/probes.hpp"
#include "core/train.hpp"

using namespace al;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_hidden = 16;
  c.d_mlp = 32;
  c.n_heads = 2;
  c.vocab_size = 24;
  c.max_seq_len = 48;
  return c;
}

// Model trained to reproduce "(7)=7;" exactly (greedy from BOS); cached
// across cases.
const Checkpoint& memorized_model() {
  static Checkpoint ck = [] {
    Corpus corpus;
    corpus.documents = {"(7)=7;"};
    TrainConfig tc;
    tc.steps = 200;
    tc.batch_size = 4;
    tc.seq_len = 8;
    tc.learning_rate = 0.05;
    tc.seed = 17;
    return pretrain(corpus, tiny_config(), tc);
  }();
  return ck;
}

Checkpoint uniform_model() {
  Checkpoint ck;
  ck.config = tiny_config();
  ck.w = Weights::zeros(ck.config);
  ck.label = "uniform";
  return ck;
}

// Context-free model biased toward '7': every token embeds to the same
// vector, attention and MLP weights are zero (the residual never moves), and
// the unembedding boosts one token. Output probabilities follow analytically:
// p('7') = e^z / (e^z + V - 1) with z = 1.5 / sqrt(1/16 + eps).
Checkpoint seven_biased_model() {
  Checkpoint ck = uniform_model();
  ck.label = "seven-biased";
  for (int t = 0; t < ck.config.vocab_size; ++t) ck.w.embed[t][0] = 1.0;
  for (int i = 0; i < ck.config.d_hidden; ++i) ck.w.final_norm[0][i] = 1.0;
  ck.w.unembed[0][tok::encode_char('7')] = 1.5;
  return ck;
}

double seven_probability(const ModelConfig& c) {
  double n0 = 1.0 / std::sqrt(1.0 / double(c.d_hidden) + c.norm_eps);
  double z = 1.5 * n0;
  return std::exp(z) / (std::exp(z) + double(c.vocab_size - 1));
}

TaskItem memorized_item() {
  TaskItem t;
  t.id = 1;
  t.question = "(7)=";
  t.answer = "7";
  t.split = Split::eval_contaminated;
  t.contaminated = true;
  return t;
}

TaskItem clean_item() {
  TaskItem t;
  t.id = 2;
  t.question = "(3)=";
  t.answer = "3";
  t.split = Split::eval_clean;
  return t;
}

EvalSet two_item_set() {
  EvalSet s;
  s.items = {memorized_item(), clean_item()};
  return s;
}

}  // namespace

TEST_CASE("greedy_answer and accuracy read out the memorized rendering") {
  const Checkpoint& ck = memorized_model();
  TaskItem mem = memorized_item();
  CHECK(greedy_answer(ck, mem) == "7");

  TaskItem clean = clean_item();
  std::vector<const TaskItem*> both = {&mem, &clean};
  auto cmap = correctness_map(ck, both);
  CHECK(cmap.at(1) == true);
  double acc = accuracy(ck, both);
  CHECK(acc == doctest::Approx(cmap.at(2) ? 1.0 : 0.5));

  CHECK_THROWS_AS(accuracy(ck, {}), Error);
}

TEST_CASE("perplexity of the uniform model is exactly the vocabulary size") {
  Checkpoint ck = uniform_model();
  std::vector<int> prompt = tok::encode("(7)=");
  std::vector<int> answer = tok::encode("7");
  double v = double(ck.config.vocab_size);
  CHECK(perplexity(ck, prompt, answer, PplMode::answer_only) == doctest::Approx(v).epsilon(1e-12));
  CHECK(perplexity(ck, prompt, answer, PplMode::full_text) == doctest::Approx(v).epsilon(1e-12));
}

TEST_CASE("perplexity matches a direct forward-pass recomputation") {
  Checkpoint ck = init_checkpoint(tiny_config(), 33, "ppl");
  std::vector<int> prompt = tok::encode("(12*7+45)%83=");
  std::vector<int> answer = tok::encode("46");

  std::vector<int> seq;
  seq.push_back(tok::BOS);
  seq.insert(seq.end(), prompt.begin(), prompt.end());
  seq.insert(seq.end(), answer.begin(), answer.end());
  auto fr = forward(ck, seq);
  const int V = ck.config.vocab_size;

  auto mean_nll = [&](int first) {
    double s = 0.0;
    int n = 0;
    for (int p = first; p + 1 < int(seq.size()); ++p) {
      s += logsumexp(fr.logits[p], V) - fr.logits[p][seq[p + 1]];
      ++n;
    }
    return std::exp(s / n);
  };
  CHECK(perplexity(ck, prompt, answer, PplMode::answer_only) ==
        doctest::Approx(mean_nll(int(prompt.size()))).epsilon(1e-12));
  CHECK(perplexity(ck, prompt, answer, PplMode::full_text) ==
        doctest::Approx(mean_nll(0)).epsilon(1e-12));

  CHECK_THROWS_AS(perplexity(ck, prompt, {}, PplMode::answer_only), Error);
}

TEST_CASE("paradox_scan flags the split where answers improve while text degrades") {
  Checkpoint base = uniform_model();
  Checkpoint tuned = seven_biased_model();
  EvalSet s = two_item_set();

  // Passing the refs unsorted exercises the internal sort.
  auto scan = paradox_scan({{150, &tuned}, {0, &base}}, s);

  // 2 checkpoints x 2 splits x 2 modes, one item per split.
  CHECK(scan.records.size() == 8);
  CHECK(scan.means.size() == 8);
  for (const auto& row : scan.means)
    if (row.step == 0) CHECK(row.mean_ppl == doctest::Approx(24.0).epsilon(1e-12));

  // Contaminated "(7)=7": the answer token '7' got likelier (answer PPL is
  // exactly 1/p7) while '(', ')', '=' were suppressed enough that the
  // full-text mean rose above uniform — the divergence signature.
  double p7 = seven_probability(tuned.config);
  const ParadoxEntry& cont = scan.summary.at("eval_contaminated");
  CHECK(cont.answer_first == doctest::Approx(24.0).epsilon(1e-12));
  CHECK(cont.answer_last == doctest::Approx(1.0 / p7).epsilon(1e-9));
  CHECK(cont.full_last > cont.full_first);
  CHECK(cont.divergence);

  // Clean "(3)=3": its answer token was suppressed too, so no divergence.
  double p_other = (1.0 - p7) / double(tuned.config.vocab_size - 1);
  const ParadoxEntry& clean = scan.summary.at("eval_clean");
  CHECK(clean.answer_last == doctest::Approx(1.0 / p_other).epsilon(1e-9));
  CHECK(clean.answer_last > clean.answer_first);
  CHECK(!clean.divergence);

  // Reversed roles: answer PPL rises, so the flag must clear.
  auto rev = paradox_scan({{0, &tuned}, {150, &base}}, s);
  CHECK(!rev.summary.at("eval_contaminated").divergence);
}

TEST_CASE("paradox_scan validates its checkpoint list") {
  Checkpoint base = uniform_model();
  EvalSet s = two_item_set();
  CHECK_THROWS_AS(paradox_scan({{0, &base}}, s), Error);
  CHECK_THROWS_AS(paradox_scan({{5, &base}, {10, &base}}, s), Error);
  CHECK_THROWS_AS(paradox_scan({{0, &base}, {10, nullptr}}, s), Error);

  EvalSet no_clean;
  no_clean.items = {memorized_item()};
  CHECK_THROWS_AS(paradox_scan({{0, &base}, {10, &base}}, no_clean), Error);
}

TEST_CASE("partial prompts on the memorized model score as derived by hand") {
  const Checkpoint& ck = memorized_model();
  EvalSet s = two_item_set();

  auto rows = partial_prompt_eval(ck, s, {0.5, 1.0});
  REQUIRE(rows.size() == 4);  // 2 ratios x 2 split groups

  auto find_row = [&](double ratio, const std::string& group) -> const PartialRow& {
    for (const auto& r : rows)
      if (r.ratio == ratio && r.group == group) return r;
    REQUIRE(false);
    return rows[0];
  };

  // ratio 0.5 keeps "(7"; the model finishes ")=7;". ROUGE-L of ")=7" vs
  // "7": lcs=1, p=1/3, r=1 -> f=0.5. The stitched text equals the rendering.
  const PartialRow& half = find_row(0.5, "eval_contaminated");
  CHECK(half.mean_rouge == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(half.completion_accuracy == doctest::Approx(1.0));
  CHECK(half.n_items == 1);

  // ratio 1.0 keeps the whole question; completion "7;" scores f=1.
  const PartialRow& full = find_row(1.0, "eval_contaminated");
  CHECK(full.mean_rouge == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(full.completion_accuracy == doctest::Approx(1.0));

  CHECK(find_row(0.5, "eval_clean").n_items == 1);
}

TEST_CASE("partial prompts group by class label when labels are present") {
  const Checkpoint& ck = memorized_model();
  EvalSet s = two_item_set();
  s.class_labels[1] = ClassLabel::Leakage;
  s.class_labels[2] = ClassLabel::Stable;

  auto rows = partial_prompt_eval(ck, s, {1.0});
  REQUIRE(rows.size() == 2);
  bool saw_leak = false, saw_stable = false;
  for (const auto& r : rows) {
    if (r.group == "Leakage") saw_leak = true;
    if (r.group == "Stable") saw_stable = true;
  }
  CHECK(saw_leak);
  CHECK(saw_stable);
}

TEST_CASE("partial prompts respect the per-group item cap and ratio guards") {
  const Checkpoint& ck = memorized_model();
  EvalSet s = two_item_set();
  TaskItem extra = memorized_item();
  extra.id = 3;
  s.items.push_back(extra);

  auto rows = partial_prompt_eval(ck, s, {1.0}, 1);
  for (const auto& r : rows) CHECK(r.n_items == 1);

  CHECK_THROWS_AS(partial_prompt_eval(ck, s, {}), Error);
  CHECK_THROWS_AS(partial_prompt_eval(ck, s, {0.0}), Error);
  CHECK_THROWS_AS(partial_prompt_eval(ck, s, {1.5}), Error);
  CHECK_THROWS_AS(partial_prompt_eval(ck, s, {0.8, 0.4}), Error);
}

TEST_CASE("patching a model with its own activations changes nothing") {
  const Checkpoint& ck = memorized_model();
  TaskItem mem = memorized_item();
  TaskItem clean = clean_item();
  std::vector<const TaskItem*> items = {&mem, &clean};

  for (int layer = 0; layer < ck.config.n_layers; ++layer)
    for (Component comp : {Component::mlp, Component::attn}) {
      PatchResult r = path_patch(ck, ck, layer, comp, items);
      CHECK(r.tuned_match_rate == doctest::Approx(1.0));
      CHECK(r.recovery_accuracy == doctest::Approx(r.base_accuracy));
      CHECK(r.tuned_accuracy == doctest::Approx(r.base_accuracy));
      CHECK(r.n_items == 2);
    }
}

TEST_CASE("the patch sweep equals cell-by-cell patching") {
  Checkpoint base = init_checkpoint(tiny_config(), 77, "base");
  const Checkpoint& tuned = memorized_model();
  TaskItem mem = memorized_item();
  TaskItem clean = clean_item();
  std::vector<const TaskItem*> items = {&mem, &clean};

  auto sweep = path_patch_sweep(base, tuned, items);
  REQUIRE(sweep.size() == size_t(2 * base.config.n_layers));

  size_t idx = 0;
  for (int l = 0; l < base.config.n_layers; ++l)
    for (Component comp : {Component::mlp, Component::attn}) {
      PatchResult one = path_patch(base, tuned, l, comp, items);
      CHECK(sweep[idx].layer == l);
      CHECK(sweep[idx].component == comp);
      CHECK(sweep[idx].recovery_accuracy == one.recovery_accuracy);
      CHECK(sweep[idx].tuned_match_rate == one.tuned_match_rate);
      CHECK(sweep[idx].tuned_accuracy == one.tuned_accuracy);
      CHECK(sweep[idx].base_accuracy == one.base_accuracy);
      ++idx;
    }
}

TEST_CASE("path_patch validates layers, items, and configs") {
  const Checkpoint& ck = memorized_model();
  TaskItem mem = memorized_item();
  std::vector<const TaskItem*> items = {&mem};

  CHECK_THROWS_AS(path_patch(ck, ck, -1, Component::mlp, items), Error);
  CHECK_THROWS_AS(path_patch(ck, ck, ck.config.n_layers, Component::mlp, items), Error);
  CHECK_THROWS_AS(path_patch(ck, ck, 0, Component::mlp, {}), Error);

  ModelConfig narrow = tiny_config();
  narrow.n_layers = 3;
  Checkpoint other = init_checkpoint(narrow, 1, "x");
  CHECK_THROWS_AS(path_patch(ck, other, 0, Component::mlp, items), Error);
}

TEST_CASE("counterfactual matrices implement their replacement rules") {
  Mat src(2, 3);
  src[0][0] = 1; src[0][1] = 2; src[0][2] = 3;
  src[1][0] = 4; src[1][1] = 5; src[1][2] = 6;

  Mat gm = counterfactual_matrix(src, CfTarget::up_mean, 0);
  for (double x : gm.v) CHECK(x == doctest::Approx(3.5).epsilon(1e-15));

  Mat cm = counterfactual_matrix(src, CfTarget::gate_mean, 0, /*per_column_mean=*/true);
  CHECK(cm[0][0] == doctest::Approx(2.5).epsilon(1e-15));
  CHECK(cm[1][0] == doctest::Approx(2.5).epsilon(1e-15));
  CHECK(cm[0][1] == doctest::Approx(3.5).epsilon(1e-15));
  CHECK(cm[0][2] == doctest::Approx(4.5).epsilon(1e-15));

  Mat dr = counterfactual_matrix(src, CfTarget::down_random, 7);
  CHECK(dr.rows == 2);
  CHECK(dr.cols == 3);
  CHECK(frobenius_norm(dr.data(), dr.size()) ==
        doctest::Approx(frobenius_norm(src.data(), src.size())).epsilon(1e-12));
  Mat dr2 = counterfactual_matrix(src, CfTarget::down_random, 7);
  CHECK(dr == dr2);
  Mat dr3 = counterfactual_matrix(src, CfTarget::down_random, 8);
  CHECK(!(dr == dr3));

  Mat zeros(2, 3);
  Mat dz = counterfactual_matrix(zeros, CfTarget::down_random, 7);
  for (double x : dz.v) CHECK(x == 0.0);
}

TEST_CASE("counterfactual JSD is bounded, deterministic, and cache-consistent") {
  const Checkpoint& ck = memorized_model();
  TaskItem mem = memorized_item();
  TaskItem clean = clean_item();
  std::vector<const TaskItem*> items = {&mem, &clean};
  std::vector<CfTarget> targets = {CfTarget::up_mean, CfTarget::gate_mean,
                                   CfTarget::down_random};

  auto sweep = counterfactual_jsd_sweep(ck, targets, items, 42);
  REQUIRE(sweep.size() == size_t(ck.config.n_layers * 3));

  size_t idx = 0;
  for (int l = 0; l < ck.config.n_layers; ++l)
    for (CfTarget t : targets) {
      const JsdRecord& r = sweep[idx++];
      CHECK(r.layer == l);
      CHECK(r.target == to_string(t));
      CHECK(r.mean_jsd >= 0.0);
      CHECK(r.mean_jsd <= 1.0);
      CHECK(r.n_items == 2);
      JsdRecord one = counterfactual_jsd(ck, l, t, items, 42);
      CHECK(one.mean_jsd == r.mean_jsd);
    }

  // Mean-replacement targets ignore the seed; the random target must not.
  JsdRecord a = counterfactual_jsd(ck, 0, CfTarget::up_mean, items, 1);
  JsdRecord b = counterfactual_jsd(ck, 0, CfTarget::up_mean, items, 2);
  CHECK(a.mean_jsd == b.mean_jsd);

  CHECK_THROWS_AS(counterfactual_jsd(ck, -1, CfTarget::up_mean, items, 0), Error);
  CHECK_THROWS_AS(counterfactual_jsd(ck, ck.config.n_layers, CfTarget::up_mean, items, 0), Error);
  CHECK_THROWS_AS(counterfactual_jsd(ck, 0, CfTarget::up_mean, {}, 0), Error);
}

TEST_CASE("cf target names round-trip") {
  for (auto t : {CfTarget::up_mean, CfTarget::gate_mean, CfTarget::down_random})
    CHECK(cf_target_from_string(to_string(t)) == t);
  CHECK_THROWS_AS(cf_target_from_string("sideways"), Error);
  CHECK(ppl_mode_from_string("answer_only") == PplMode::answer_only);
  CHECK(ppl_mode_from_string("full_text") == PplMode::full_text);
  CHECK_THROWS_AS(ppl_mode_from_string("half"), Error);
}

TEST_CASE("linear probe AUC is 1 on separable data and 0.5 on constant data") {
  std::vector<std::vector<double>> feats;
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) {
    feats.push_back({double(i)});
    labels.push_back(i >= 20 ? 1 : 0);
  }
  CHECK(linear_probe_auc(feats, labels) == doctest::Approx(1.0));

  std::vector<std::vector<double>> same(40, {3.25, -1.0});
  CHECK(linear_probe_auc(same, labels) == doctest::Approx(0.5));
}

TEST_CASE("linear probe AUC separates noisy gaussian classes") {
  Rng rng(404);
  std::vector<std::vector<double>> feats;
  std::vector<int> labels;
  for (int i = 0; i < 30; ++i) {
    int y = i % 2;
    double mu = y ? 2.0 : -2.0;
    feats.push_back({mu + rng.gaussian(), mu + rng.gaussian(), rng.gaussian()});
    labels.push_back(y);
  }
  CHECK(linear_probe_auc(feats, labels) > 0.9);
}

TEST_CASE("linear probe validates labels") {
  std::vector<std::vector<double>> feats = {{1.0}, {2.0}, {3.0}, {4.0}};
  CHECK_THROWS_AS(linear_probe_auc(feats, {1, 1, 1}), Error);
  CHECK_THROWS_AS(linear_probe_auc(feats, {1, 1, 1, 1}), Error);
  CHECK_THROWS_AS(linear_probe_auc({}, {}), Error);
}

TEST_CASE("per-layer probe finds the planted separating state") {
  TrajectorySet ts;
  ts.d = 4;
  ts.n_states = 3;
  for (int i = 0; i < 16; ++i) {
    Trajectory tj;
    tj.item_id = i;
    tj.cls = i % 2;
    tj.states.resize(3);
    tj.states[0] = {1.0, 1.0, 1.0, 1.0};          // identical for both classes
    tj.states[1] = {0.5, -0.5, 0.5, -0.5};        // identical for both classes
    tj.states[2] = {tj.cls ? 5.0 : -5.0, 0, 0, 0};  // fully separated
    ts.items.push_back(tj);
  }
  auto aucs = linear_probe(ts);
  REQUIRE(aucs.size() == 3);
  CHECK(aucs[0] == doctest::Approx(0.5));
  CHECK(aucs[1] == doctest::Approx(0.5));
  CHECK(aucs[2] == doctest::Approx(1.0));
}

TEST_CASE("extract_trajectories reads the residual stream at the last answer token") {
  const Checkpoint& ck = memorized_model();
  TaskItem mem = memorized_item();
  TaskItem clean = clean_item();
  TaskItem dropped = clean_item();
  dropped.id = 3;

  std::map<int, ClassLabel> labels = {{1, ClassLabel::Leakage},
                                      {2, ClassLabel::Stable},
                                      {3, ClassLabel::WrongBoth}};
  auto ts = extract_trajectories(ck, {&mem, &clean, &dropped}, labels);
  CHECK(ts.d == ck.config.d_hidden);
  CHECK(ts.n_states == ck.config.n_layers + 1);
  REQUIRE(ts.items.size() == 2);  // WrongBoth items are not trajectories
  CHECK(ts.items[0].item_id == 1);
  CHECK(ts.items[0].cls == 1);
  CHECK(ts.items[1].cls == 0);

  // Recompute the reference states directly from a traced forward pass.
  std::vector<int> seq;
  seq.push_back(tok::BOS);
  for (int t : tok::encode(mem.question + mem.answer)) seq.push_back(t);
  ActivationTrace tr;
  forward(ck, seq, nullptr, &tr);
  int pos = int(seq.size()) - 1;
  for (int l = 0; l <= ck.config.n_layers; ++l)
    for (int i = 0; i < ts.d; ++i)
      CHECK(ts.items[0].states[l][i] == tr.residual_pre[l][pos][i]);

  std::map<int, ClassLabel> missing = {{1, ClassLabel::Leakage}};
  CHECK_THROWS_AS(extract_trajectories(ck, {&mem, &clean}, missing), Error);
}
