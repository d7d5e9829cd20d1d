// Transformer forward contracts: residual accounting, lens/head agreement,
// identity interventions, steering locality, generation semantics, rotary
// tables, and trace round-trips.

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "core/model.hpp"
#include "core/probes.hpp"
#include "core/tasks.hpp"

using namespace al;

namespace {

ModelConfig tiny_config(int layers = 3) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_hidden = 16;
  c.d_mlp = 32;
  c.n_heads = 2;
  c.vocab_size = 24;
  c.max_seq_len = 32;
  return c;
}

std::vector<int> arbitrary_tokens(int n, uint64_t seed, int vocab) {
  Rng r(seed);
  std::vector<int> t(static_cast<size_t>(n), 0);
  t[0] = tok::BOS;
  for (int i = 1; i < n; ++i) t[i] = int(r.below(uint64_t(vocab)));
  return t;
}

bool same_mat(const Mat& a, const Mat& b) { return a == b; }

double max_abs(const Mat& a, const Mat& b) {
  REQUIRE(a.same_shape(b));
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
  return m;
}

}  // namespace

// ------------------------------------------------------------ basics -------

TEST_CASE("forward is deterministic and shapes follow the config") {
  Checkpoint ck = init_checkpoint(tiny_config(), 7, "t");
  auto toks = arbitrary_tokens(10, 3, 24);
  ForwardResult a = forward(ck, toks);
  ForwardResult b = forward(ck, toks);
  CHECK(same_mat(a.logits, b.logits));
  CHECK(a.logits.rows == 10);
  CHECK(a.logits.cols == 24);
  ForwardResult last = forward(ck, toks, nullptr, nullptr, {true});
  CHECK(last.logits.rows == 1);
  for (int j = 0; j < 24; ++j) CHECK(last.logits.at(0, j) == a.logits.at(9, j));
}

TEST_CASE("an all-zero checkpoint produces uniform logits") {
  ModelConfig mc = tiny_config();
  Checkpoint ck;
  ck.config = mc;
  ck.w = Weights::zeros(mc);
  auto toks = arbitrary_tokens(5, 1, 24);
  ForwardResult r = forward(ck, toks);
  for (int p = 0; p < r.logits.rows; ++p)
    for (int j = 0; j < r.logits.cols; ++j) CHECK(r.logits.at(p, j) == r.logits.at(p, 0));
}

TEST_CASE("forward rejects sequences past max_seq_len and bad tokens") {
  Checkpoint ck = init_checkpoint(tiny_config(), 7, "t");
  auto toks = arbitrary_tokens(33, 3, 24);
  CHECK_THROWS_AS((void)forward(ck, toks), Error);
  std::vector<int> bad{tok::BOS, 24};  // vocab is 24, ids 0..23
  CHECK_THROWS_AS((void)forward(ck, bad), Error);
  std::vector<int> neg{tok::BOS, -2};
  CHECK_THROWS_AS((void)forward(ck, neg), Error);
  std::vector<int> empty;
  CHECK_THROWS_AS((void)forward(ck, empty), Error);
}

// ------------------------------------------------- residual accounting -----

TEST_CASE("residual stream obeys pre + attn + mlp = next, and the trace is complete") {
  Checkpoint ck = init_checkpoint(tiny_config(4), 11, "t");
  auto toks = arbitrary_tokens(9, 5, 24);
  ActivationTrace tr;
  ForwardResult r = forward(ck, toks, nullptr, &tr);
  const int L = 4;
  REQUIRE(int(tr.residual_pre.size()) == L + 1);
  REQUIRE(int(tr.attn_out.size()) == L);
  REQUIRE(int(tr.mlp_out.size()) == L);
  REQUIRE(int(tr.mlp_keys.size()) == L);
  for (int l = 0; l < L; ++l) {
    Mat expect = tr.residual_pre[l];
    for (int p = 0; p < expect.rows; ++p)
      for (int j = 0; j < expect.cols; ++j) {
        expect.at(p, j) += tr.attn_out[l].at(p, j);
        expect.at(p, j) += tr.mlp_out[l].at(p, j);
      }
    CHECK(max_abs(expect, tr.residual_pre[l + 1]) < 1e-12);
  }
  CHECK(same_mat(tr.final_logits, r.logits));
}

TEST_CASE("logit lens on the final residual equals the head output") {
  Checkpoint ck = init_checkpoint(tiny_config(), 13, "t");
  auto toks = arbitrary_tokens(8, 9, 24);
  ActivationTrace tr;
  ForwardResult r = forward(ck, toks, nullptr, &tr);
  std::vector<double> lens(24);
  for (int p = 0; p < 8; ++p) {
    logit_lens_logits(ck, tr.residual_pre[3][p], lens.data());
    for (int j = 0; j < 24; ++j) CHECK(lens[j] == r.logits.at(p, j));
    // distributional agreement, the acceptance form
    std::vector<double> a(lens), b(r.logits[p], r.logits[p] + 24);
    softmax_row(a.data(), 24);
    softmax_row(b.data(), 24);
    CHECK(jsd(a, b) <= 1e-9);
  }
}

TEST_CASE("trace captures full logits even on the last-only fast path") {
  Checkpoint ck = init_checkpoint(tiny_config(), 17, "t");
  auto toks = arbitrary_tokens(7, 2, 24);
  ActivationTrace tr;
  ForwardResult last = forward(ck, toks, nullptr, &tr, {true});
  ForwardResult full = forward(ck, toks);
  CHECK(last.logits.rows == 1);
  CHECK(same_mat(tr.final_logits, full.logits));
}

// -------------------------------------------------- identity interventions -

TEST_CASE("identity interventions leave logits bitwise unchanged") {
  for (uint64_t seed : {1ull, 2ull, 3ull, 4ull}) {
    Checkpoint ck = init_checkpoint(tiny_config(), seed, "t");
    auto toks = arbitrary_tokens(11, seed + 50, 24);
    ActivationTrace clean_tr;
    ForwardResult clean = forward(ck, toks, nullptr, &clean_tr);

    InterventionSpec cap;
    cap.kind = InterventionSpec::Kind::capture_only;
    CHECK(same_mat(forward(ck, toks, &cap).logits, clean.logits));

    InterventionSpec scale;
    scale.kind = InterventionSpec::Kind::scale_keys;
    scale.layer = 1;
    scale.alpha = 1.0;
    for (int i = 0; i < 32; ++i) scale.neurons.push_back(i);
    CHECK(same_mat(forward(ck, toks, &scale).logits, clean.logits));

    InterventionSpec patch;
    patch.kind = InterventionSpec::Kind::patch_activation;
    patch.layer = 2;
    patch.component = Component::mlp;
    patch.positions = {3, 7};
    patch.payload = Mat(2, 16);
    for (int j = 0; j < 16; ++j) {
      patch.payload.at(0, j) = clean_tr.mlp_out[2].at(3, j);
      patch.payload.at(1, j) = clean_tr.mlp_out[2].at(7, j);
    }
    CHECK(same_mat(forward(ck, toks, &patch).logits, clean.logits));

    InterventionSpec ow;
    ow.kind = InterventionSpec::Kind::override_weights;
    ow.layer = 0;
    ow.w_gate = ck.w.layers[0].w_gate;
    ow.w_up = ck.w.layers[0].w_up;
    ow.w_down = ck.w.layers[0].w_down;
    CHECK(same_mat(forward(ck, toks, &ow).logits, clean.logits));
  }
}

TEST_CASE("patching the attention component replaces exactly those rows") {
  Checkpoint ck = init_checkpoint(tiny_config(), 23, "t");
  auto toks = arbitrary_tokens(6, 4, 24);
  InterventionSpec patch;
  patch.kind = InterventionSpec::Kind::patch_activation;
  patch.layer = 1;
  patch.component = Component::attn;
  patch.positions = {2};
  patch.payload = Mat(1, 16);
  for (auto& x : patch.payload.v) x = 0.25;
  ActivationTrace tr;
  (void)forward(ck, toks, &patch, &tr);
  for (int j = 0; j < 16; ++j) CHECK(tr.attn_out[1].at(2, j) == 0.25);
  // other rows unaffected by construction: compare against clean trace
  ActivationTrace cl;
  (void)forward(ck, toks, nullptr, &cl);
  for (int p = 0; p < 6; ++p) {
    if (p == 2) continue;
    for (int j = 0; j < 16; ++j) CHECK(tr.attn_out[1].at(p, j) == cl.attn_out[1].at(p, j));
  }
}

TEST_CASE("intervention validation rejects malformed specs") {
  Checkpoint ck = init_checkpoint(tiny_config(), 29, "t");
  auto toks = arbitrary_tokens(6, 4, 24);

  InterventionSpec bad_layer;
  bad_layer.kind = InterventionSpec::Kind::scale_keys;
  bad_layer.layer = 99;
  bad_layer.neurons = {0};
  bad_layer.alpha = 2.0;
  CHECK_THROWS_AS((void)forward(ck, toks, &bad_layer), Error);

  InterventionSpec bad_neuron;
  bad_neuron.kind = InterventionSpec::Kind::scale_keys;
  bad_neuron.layer = 0;
  bad_neuron.neurons = {32};  // d_mlp is 32, ids 0..31
  bad_neuron.alpha = 2.0;
  CHECK_THROWS_AS((void)forward(ck, toks, &bad_neuron), Error);

  InterventionSpec bad_pos;
  bad_pos.kind = InterventionSpec::Kind::patch_activation;
  bad_pos.layer = 0;
  bad_pos.positions = {6};  // sequence length is 6, positions 0..5
  bad_pos.payload = Mat(1, 16);
  CHECK_THROWS_AS((void)forward(ck, toks, &bad_pos), Error);

  InterventionSpec bad_payload;
  bad_payload.kind = InterventionSpec::Kind::patch_activation;
  bad_payload.layer = 0;
  bad_payload.positions = {1, 2};
  bad_payload.payload = Mat(1, 16);  // two positions need two rows
  CHECK_THROWS_AS((void)forward(ck, toks, &bad_payload), Error);

  InterventionSpec bad_shape;
  bad_shape.kind = InterventionSpec::Kind::override_weights;
  bad_shape.layer = 0;
  bad_shape.w_gate = Mat(4, 4);
  CHECK_THROWS_AS((void)forward(ck, toks, &bad_shape), Error);
}

// ------------------------------------------------------ steering locality --

TEST_CASE("scale_keys touches only the selected neurons at the selected layer") {
  Checkpoint ck = init_checkpoint(tiny_config(4), 31, "t");
  auto toks = arbitrary_tokens(8, 6, 24);
  ActivationTrace clean;
  (void)forward(ck, toks, nullptr, &clean);

  InterventionSpec spec;
  spec.kind = InterventionSpec::Kind::scale_keys;
  spec.layer = 2;
  spec.neurons = {5, 17};
  spec.alpha = 3.0;
  ActivationTrace steered;
  (void)forward(ck, toks, &spec, &steered);

  // everything strictly upstream of layer 2's MLP is bitwise unchanged
  for (int l = 0; l <= 2; ++l) CHECK(same_mat(steered.residual_pre[l], clean.residual_pre[l]));
  for (int l = 0; l <= 2; ++l) CHECK(same_mat(steered.attn_out[l], clean.attn_out[l]));
  for (int l = 0; l < 2; ++l) CHECK(same_mat(steered.mlp_keys[l], clean.mlp_keys[l]));

  // at layer 2, selected key columns scale by alpha; others are untouched
  for (int p = 0; p < 8; ++p)
    for (int j = 0; j < 32; ++j) {
      double want = clean.mlp_keys[2].at(p, j);
      if (j == 5 || j == 17) want *= 3.0;
      CHECK(steered.mlp_keys[2].at(p, j) == want);
    }
}

// ---------------------------------------------------------- generation -----

namespace {

// Reference generation: the straightforward algorithm that re-runs a full
// forward pass over the whole sequence every step.
std::vector<int> ref_generate(const Checkpoint& ckpt, std::span<const int> prompt,
                              const GenerateOptions& opt) {
  const ModelConfig& c = ckpt.config;
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> out;
  Rng rng(opt.seed);
  for (int step = 0; step < opt.max_new; ++step) {
    if (int(seq.size()) >= c.max_seq_len) break;
    ForwardResult r = forward(ckpt, seq, opt.spec, nullptr, {true});
    double* logits = r.logits[0];
    int tk;
    if (opt.temperature == 0.0) {
      tk = 0;
      for (int i = 1; i < c.vocab_size; ++i)
        if (logits[i] > logits[tk]) tk = i;
    } else {
      for (int i = 0; i < c.vocab_size; ++i) logits[i] /= opt.temperature;
      softmax_row(logits, c.vocab_size);
      double u = rng.uniform();
      double acc = 0.0;
      tk = c.vocab_size - 1;
      for (int i = 0; i < c.vocab_size; ++i) {
        acc += logits[i];
        if (u < acc) {
          tk = i;
          break;
        }
      }
    }
    seq.push_back(tk);
    out.push_back(tk);
    if (tk == opt.stop_token) break;
  }
  return out;
}

}  // namespace

TEST_CASE("generate matches the full-reforward reference on every path") {
  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    ModelConfig mc = tiny_config();
    Checkpoint ck = init_checkpoint(mc, seed, "g");
    Rng prng(seed * 77 + 1);
    std::vector<int> prompt{tok::BOS};
    int plen = 2 + int(prng.below(10));
    while (int(prompt.size()) < plen) prompt.push_back(int(prng.below(24)));

    InterventionSpec scale;
    scale.kind = InterventionSpec::Kind::scale_keys;
    scale.layer = 1;
    scale.neurons = {0, 5, 11};
    scale.alpha = 2.5;

    InterventionSpec patch;
    patch.kind = InterventionSpec::Kind::patch_activation;
    patch.layer = 2;
    patch.component = Component::mlp;
    patch.positions = {0};
    patch.payload = Mat(1, mc.d_hidden);
    for (auto& x : patch.payload.v) x = prng.gaussian();

    for (const InterventionSpec* spec :
         {static_cast<const InterventionSpec*>(nullptr),
          static_cast<const InterventionSpec*>(&scale),
          static_cast<const InterventionSpec*>(&patch)})
      for (double temp : {0.0, 0.7, 1.0})
        for (int max_new : {0, 1, 5, 40}) {
          GenerateOptions go;
          go.max_new = max_new;
          go.temperature = temp;
          go.seed = seed * 13 + uint64_t(max_new);
          go.stop_token = tok::SENTINEL;
          go.spec = spec;
          CAPTURE(seed);
          CAPTURE(temp);
          CAPTURE(max_new);
          CHECK(generate(ck, prompt, go) == ref_generate(ck, prompt, go));
        }
  }
}

TEST_CASE("generation is deterministic at temperature 0 and under a fixed seed") {
  Checkpoint ck = init_checkpoint(tiny_config(), 37, "g");
  std::vector<int> prompt{tok::BOS, 2, 3, 4};
  GenerateOptions greedy;
  greedy.max_new = 8;
  CHECK(generate(ck, prompt, greedy) == generate(ck, prompt, greedy));
  GenerateOptions sampled;
  sampled.max_new = 8;
  sampled.temperature = 0.7;
  sampled.seed = 12345;
  CHECK(generate(ck, prompt, sampled) == generate(ck, prompt, sampled));
}

TEST_CASE("generate respects max_new, stop token, and context window") {
  Checkpoint ck = init_checkpoint(tiny_config(), 41, "g");
  std::vector<int> prompt{tok::BOS, 2};

  GenerateOptions none;
  none.max_new = 0;
  CHECK(generate(ck, prompt, none).empty());

  GenerateOptions five;
  five.max_new = 5;
  five.stop_token = -1;
  CHECK(generate(ck, prompt, five).size() == 5);

  // context window: prompt of max_seq_len generates nothing
  auto full = arbitrary_tokens(32, 8, 24);
  GenerateOptions go;
  go.max_new = 4;
  CHECK(generate(ck, full, go).empty());

  // a stop token ends the completion and is included
  GenerateOptions stop;
  stop.max_new = 30;
  std::vector<int> c1 = generate(ck, prompt, stop);
  stop.stop_token = c1.size() > 1 ? c1[1] : c1[0];
  std::vector<int> c2 = generate(ck, prompt, stop);
  CHECK(c2.size() <= c1.size());
  if (!c2.empty() && c2.size() < 30) CHECK(c2.back() == stop.stop_token);
}

TEST_CASE("greedy tie-break picks the lowest index on a uniform model") {
  ModelConfig mc = tiny_config();
  Checkpoint ck;
  ck.config = mc;
  ck.w = Weights::zeros(mc);  // uniform logits -> everything ties
  std::vector<int> prompt{tok::BOS};
  GenerateOptions go;
  go.max_new = 3;
  auto out = generate(ck, prompt, go);
  REQUIRE(out.size() == 3);
  for (int t : out) CHECK(t == 0);
}

// -------------------------------------------------------------- rotary -----

TEST_CASE("rotary table matches the wrapper and position zero is identity") {
  Rng r(55);
  Mat a(6, 16);
  for (auto& x : a.v) x = r.gaussian();
  Mat b = a;

  RotaryTable tab;
  tab.build(6, 0, 8);  // 2 heads of d_head 8
  apply_rotary(a, 2, tab);
  apply_rotary(b, 2, 0);
  CHECK(same_mat(a, b));

  // row 0 (position 0) is unrotated
  Mat c(1, 16);
  for (auto& x : c.v) x = 1.5;
  Mat c0 = c;
  RotaryTable t0;
  t0.build(1, 0, 8);
  apply_rotary(c, 2, t0);
  CHECK(same_mat(c, c0));
}

TEST_CASE("rotary inverse undoes rotary within float tolerance") {
  Rng r(66);
  Mat a(7, 16);
  for (auto& x : a.v) x = r.gaussian();
  Mat orig = a;
  RotaryTable tab;
  tab.build(7, 0, 8);
  apply_rotary(a, 2, tab);
  apply_rotary_inverse(a, 2, tab);
  CHECK(max_abs(a, orig) < 1e-13);
}

TEST_CASE("rotary at an offset equals the tail of a longer table") {
  Rng r(77);
  Mat a(3, 16);
  for (auto& x : a.v) x = r.gaussian();
  Mat b = a;
  RotaryTable off;
  off.build(3, 4, 8);  // positions 4,5,6
  apply_rotary(a, 2, off);
  Mat big(7, 16);
  for (int p = 0; p < 3; ++p)
    for (int j = 0; j < 16; ++j) big.at(p + 4, j) = b.at(p, j);
  RotaryTable full;
  full.build(7, 0, 8);
  apply_rotary(big, 2, full);
  for (int p = 0; p < 3; ++p)
    for (int j = 0; j < 16; ++j) CHECK(a.at(p, j) == big.at(p + 4, j));
}

// ---------------------------------------------------------- mlp_keys -------

TEST_CASE("mlp_keys accessor equals the traced keys bitwise") {
  Checkpoint ck = init_checkpoint(tiny_config(), 43, "t");
  auto toks = arbitrary_tokens(9, 12, 24);
  ActivationTrace tr;
  (void)forward(ck, toks, nullptr, &tr);
  for (int l = 0; l < 3; ++l) CHECK(same_mat(mlp_keys(ck, toks, l), tr.mlp_keys[l]));
}

// ------------------------------------------------------------- traces ------

TEST_CASE("activation trace round-trips through the container format") {
  namespace fs = std::filesystem;
  Checkpoint ck = init_checkpoint(tiny_config(), 47, "t");
  auto toks = arbitrary_tokens(5, 20, 24);
  ActivationTrace tr;
  (void)forward(ck, toks, nullptr, &tr);

  fs::path dir = fs::temp_directory_path() / "al-trace-rt";
  fs::create_directories(dir);
  std::string path = (dir / "t.alck").string();
  save_trace(path, ck.config, tr);
  ModelConfig cfg2;
  ActivationTrace rt = load_trace(path, &cfg2);
  CHECK(cfg2 == ck.config);
  REQUIRE(rt.residual_pre.size() == tr.residual_pre.size());
  for (size_t i = 0; i < tr.residual_pre.size(); ++i)
    CHECK(same_mat(rt.residual_pre[i], tr.residual_pre[i]));
  for (size_t i = 0; i < tr.mlp_keys.size(); ++i) CHECK(same_mat(rt.mlp_keys[i], tr.mlp_keys[i]));
  CHECK(same_mat(rt.final_logits, tr.final_logits));
  std::error_code ec;
  fs::remove_all(dir, ec);
}
