// Training contracts: analytic gradients against central differences, loss
// definitions cross-checked against the forward pass, optimizer arithmetic,
// pretraining window/batching behavior, and the REINFORCE loop's reward,
// baseline, determinism, and snapshot semantics.

#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "core/train.hpp"

using namespace al;

namespace {

ModelConfig grad_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_hidden = 8;
  c.d_mlp = 16;
  c.n_heads = 2;
  c.vocab_size = 12;
  c.max_seq_len = 8;
  return c;
}

ModelConfig rollout_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_hidden = 16;
  c.d_mlp = 32;
  c.n_heads = 2;
  c.vocab_size = 24;
  c.max_seq_len = 48;
  return c;
}

std::vector<Mat*> collect(Weights& w) {
  std::vector<Mat*> mats;
  w.for_each([&](Mat& m) { mats.push_back(&m); });
  return mats;
}

// Central-difference check of every parameter against backward()'s output.
void check_all_gradients(const Checkpoint& base, const std::vector<int>& toks,
                         const LossSpec& ls) {
  Checkpoint c = base;
  Weights g = Weights::zeros(c.config);
  backward(c, toks, ls, g);

  auto wm = collect(c.w);
  auto gm = collect(g);
  REQUIRE(wm.size() == gm.size());

  // eps balances central-difference truncation (grows as eps^2; the norm
  // denominators make a few entries sharply curved) against cancellation in
  // lp - lm (shrinks as 1/eps); 1e-6 keeps both below ~1e-7 here.
  const double eps = 1e-6;
  for (size_t mi = 0; mi < wm.size(); ++mi) {
    REQUIRE(wm[mi]->size() == gm[mi]->size());
    for (size_t i = 0; i < wm[mi]->size(); ++i) {
      double save = wm[mi]->v[i];
      wm[mi]->v[i] = save + eps;
      double lp = loss_only(c, toks, ls);
      wm[mi]->v[i] = save - eps;
      double lm = loss_only(c, toks, ls);
      wm[mi]->v[i] = save;
      double fd = (lp - lm) / (2.0 * eps);
      double an = gm[mi]->v[i];
      double tol = 5e-7 * std::max({1.0, std::abs(fd), std::abs(an)});
      CHECK(std::abs(fd - an) <= tol);
    }
  }
}

EvalSet rollout_prompts() {
  EvalSet s;
  TaskItem a;
  a.id = 0;
  a.question = "(12*7+45)%83=";
  a.answer = "46";
  a.split = Split::eval_contaminated;
  a.contaminated = true;
  TaskItem b;
  b.id = 1;
  b.question = "(9*9+1)%41=";
  b.answer = "0";
  b.split = Split::eval_clean;
  s.items = {a, b};
  return s;
}

double weight_distance(const Weights& a, const Weights& b) {
  double acc = 0.0;
  const_cast<Weights&>(a).for_each(b, [&](Mat& x, const Mat& y) {
    for (size_t i = 0; i < x.size(); ++i) {
      double d = x.v[i] - y.v[i];
      acc += d * d;
    }
  });
  return std::sqrt(acc);
}

}  // namespace

TEST_CASE("backward matches central differences on every parameter") {
  Checkpoint c = init_checkpoint(grad_config(), 7, "gradcheck");
  std::vector<int> toks = {1, 3, 5, 2, 7, 4};
  LossSpec ls;
  ls.target = {3, 5, -1, 7, 11, 9};
  ls.weight = {1.0, 0.5, 0.0, 0.7, 0.0, 0.3};
  check_all_gradients(c, toks, ls);
}

TEST_CASE("backward matches central differences with a KL term") {
  Checkpoint c = init_checkpoint(grad_config(), 7, "gradcheck");
  Checkpoint anchor = init_checkpoint(grad_config(), 99, "anchor");
  std::vector<int> toks = {1, 3, 5, 2, 7, 4};
  LossSpec ls;
  ls.target = {3, 5, -1, 7, 11, 9};
  ls.weight = {1.0, 0.5, 0.0, 0.7, 0.0, 0.3};
  ls.kl_weight = {0.2, 0.0, 0.4, 0.1, 0.3, 0.0};
  ls.kl_base = &anchor;
  check_all_gradients(c, toks, ls);
}

TEST_CASE("loss_only equals backward's return value") {
  Checkpoint c = init_checkpoint(grad_config(), 21, "loss");
  std::vector<int> toks = {1, 9, 2, 6};
  LossSpec ls;
  ls.target = {9, 2, 6, 3};
  ls.weight = {0.25, 1.0, 0.5, 0.125};
  Weights g = Weights::zeros(c.config);
  double lb = backward(c, toks, ls, g);
  double lo = loss_only(c, toks, ls);
  CHECK(lb == doctest::Approx(lo).epsilon(1e-14));
}

TEST_CASE("single-position loss equals cross entropy computed from forward logits") {
  Checkpoint c = init_checkpoint(grad_config(), 5, "xent");
  std::vector<int> toks = {1, 4, 8, 2, 6};
  const int pos = 2, target = 10;
  const double w = 0.6;
  LossSpec ls;
  ls.target.assign(toks.size(), -1);
  ls.weight.assign(toks.size(), 0.0);
  ls.target[pos] = target;
  ls.weight[pos] = w;

  auto fr = forward(c, toks);
  const double* row = fr.logits[pos];
  double expected = w * (logsumexp(row, c.config.vocab_size) - row[target]);
  CHECK(loss_only(c, toks, ls) == doctest::Approx(expected).epsilon(1e-13));
}

TEST_CASE("all-zero weights give zero loss and zero gradients") {
  Checkpoint c = init_checkpoint(grad_config(), 11, "zero");
  std::vector<int> toks = {1, 2, 3, 4};
  LossSpec ls;
  ls.target.assign(4, -1);
  ls.weight.assign(4, 0.0);
  Weights g = Weights::zeros(c.config);
  CHECK(backward(c, toks, ls, g) == 0.0);
  double gn = grad_global_norm(g);
  CHECK(gn == 0.0);
}

TEST_CASE("KL term vanishes against the same policy and is positive otherwise") {
  Checkpoint c = init_checkpoint(grad_config(), 13, "kl");
  Checkpoint other = init_checkpoint(grad_config(), 14, "kl-other");
  std::vector<int> toks = {1, 5, 9, 3};
  LossSpec ls;
  ls.target.assign(4, -1);
  ls.weight.assign(4, 0.0);
  ls.kl_weight = {1.0, 1.0, 1.0, 1.0};

  ls.kl_base = &c;  // KL(pi || pi) = 0
  CHECK(std::abs(loss_only(c, toks, ls)) < 1e-12);

  ls.kl_base = &other;
  CHECK(loss_only(c, toks, ls) > 0.0);
}

TEST_CASE("sgd_step applies momentum and learning rate as documented") {
  ModelConfig cfg = grad_config();
  Weights w = Weights::zeros(cfg);
  SgdState st = SgdState::zeros(cfg);
  SgdConfig sc{0.05, 0.9, 10.0};

  w.embed.v[0] = 1.0;
  Weights g = Weights::zeros(cfg);
  g.embed.v[0] = 2.0;
  sgd_step(w, g, st, sc);  // v = 2, w = 1 - 0.05*2
  CHECK(w.embed.v[0] == doctest::Approx(0.9).epsilon(1e-15));

  g.zero_all();
  g.embed.v[0] = 2.0;
  sgd_step(w, g, st, sc);  // v = 0.9*2 + 2 = 3.8, w = 0.9 - 0.19
  CHECK(w.embed.v[0] == doctest::Approx(0.71).epsilon(1e-15));
}

TEST_CASE("sgd_step rescales gradients above the clip norm") {
  ModelConfig cfg = grad_config();
  Weights w = Weights::zeros(cfg);
  SgdState st = SgdState::zeros(cfg);
  SgdConfig sc{0.05, 0.0, 1.0};  // norm-2 gradient must shrink to norm 1

  Weights g = Weights::zeros(cfg);
  g.embed.v[0] = 2.0;
  sgd_step(w, g, st, sc);
  CHECK(w.embed.v[0] == doctest::Approx(-0.05).epsilon(1e-15));
}

TEST_CASE("grad_global_norm is the root of the summed squares") {
  Weights g = Weights::zeros(grad_config());
  g.embed.v[0] = 3.0;
  g.unembed.v[5] = 4.0;
  CHECK(grad_global_norm(g) == doctest::Approx(5.0).epsilon(1e-15));
}

TEST_CASE("pretrain with zero steps returns the seeded initialization") {
  Corpus corpus;
  corpus.documents = {"(1)=1;(2)=2;"};
  ModelConfig mc = rollout_config();
  TrainConfig tc;
  tc.steps = 0;
  tc.seed = 31;
  Checkpoint got = pretrain(corpus, mc, tc);
  Checkpoint want = init_checkpoint(mc, derive_seed(31, "pretrain_init"), "pretrained");
  CHECK(got == want);
}

TEST_CASE("pretrain is deterministic in the seed") {
  Corpus corpus;
  corpus.documents = {"(1)=1;(2)=2;(3)=3;", "(4)=4;(5)=5;"};
  ModelConfig mc = rollout_config();
  TrainConfig tc;
  tc.steps = 10;
  tc.batch_size = 4;
  tc.seq_len = 8;
  tc.seed = 5;
  Checkpoint a = pretrain(corpus, mc, tc);
  Checkpoint b = pretrain(corpus, mc, tc);
  CHECK(a == b);
  tc.seed = 6;
  Checkpoint c = pretrain(corpus, mc, tc);
  CHECK(!(a.w == c.w));
}

TEST_CASE("pretrain memorizes a single repeated document") {
  Corpus corpus;
  corpus.documents = {"(7)=7;"};
  ModelConfig mc = rollout_config();
  TrainConfig tc;
  tc.steps = 200;
  tc.batch_size = 4;
  tc.seq_len = 8;
  tc.learning_rate = 0.05;
  tc.seed = 17;

  std::vector<double> losses;
  Checkpoint ck = pretrain(corpus, mc, tc, [&](int, double l) { losses.push_back(l); });
  REQUIRE(losses.size() == 200);
  for (double l : losses) CHECK(std::isfinite(l));
  CHECK(losses.back() < 0.05);
  CHECK(losses.back() < losses.front());

  GenerateOptions go;
  go.max_new = 6;
  go.temperature = 0.0;
  go.stop_token = tok::SENTINEL;
  std::vector<int> prompt = {tok::BOS};
  CHECK(generate(ck, prompt, go) == tok::encode("(7)=7;"));
}

TEST_CASE("aligned windows anchor document starts to the BOS framing") {
  Corpus corpus;
  corpus.documents = {"(1)=1;(2)=2;(3)=3;", "(4)=4;(5)=5;(6)=6;"};
  ModelConfig mc = rollout_config();
  TrainConfig tc;
  tc.steps = 150;
  tc.batch_size = 4;
  tc.seq_len = 6;
  tc.learning_rate = 0.05;
  tc.seed = 23;

  tc.align_windows = true;
  Checkpoint aligned = pretrain(corpus, mc, tc);
  tc.align_windows = false;
  Checkpoint free_run = pretrain(corpus, mc, tc);

  auto p_open_paren = [&](const Checkpoint& ck) {
    std::vector<int> bos = {tok::BOS};
    auto fr = forward(ck, bos);
    std::vector<double> probs(fr.logits[0], fr.logits[0] + mc.vocab_size);
    softmax_row(probs.data(), mc.vocab_size);
    return probs[size_t(tok::encode_char('('))];
  };
  // Aligned batches only ever see '(' right after BOS; free-running windows
  // start anywhere, so the BOS successor stays diffuse.
  CHECK(p_open_paren(aligned) > 0.9);
  CHECK(p_open_paren(aligned) > p_open_paren(free_run));
}

TEST_CASE("pretrain validates its inputs") {
  ModelConfig mc = rollout_config();
  TrainConfig tc;
  tc.steps = 1;

  Corpus empty;
  CHECK_THROWS_AS(pretrain(empty, mc, tc), Error);

  Corpus corpus;
  corpus.documents = {"(1)=1;"};
  tc.seq_len = mc.max_seq_len;  // BOS + window no longer fits
  CHECK_THROWS_AS(pretrain(corpus, mc, tc), Error);

  tc.seq_len = 8;
  tc.checkpoint_steps = {5};  // snapshots are a fine-tuning concept
  CHECK_THROWS_AS(pretrain(corpus, mc, tc), Error);
}

TEST_CASE("train config validation rejects out-of-range fields") {
  auto bad = [](auto&& tweak) {
    TrainConfig tc;
    tc.steps = 10;
    tweak(tc);
    bool threw = false;
    try {
      tc.validate();
    } catch (const Error& e) {
      threw = true;
      CHECK(e.kind == ErrKind::config);
    }
    CHECK(threw);
  };
  bad([](TrainConfig& t) { t.steps = -1; });
  bad([](TrainConfig& t) { t.batch_size = 0; });
  bad([](TrainConfig& t) { t.learning_rate = 0.0; });
  bad([](TrainConfig& t) { t.momentum = 1.0; });
  bad([](TrainConfig& t) { t.seq_len = 1; });
  bad([](TrainConfig& t) { t.max_new = 0; });
  bad([](TrainConfig& t) { t.rollout_temperature = -0.5; });
  bad([](TrainConfig& t) { t.kl_coeff = -1.0; });
  bad([](TrainConfig& t) { t.baseline_ema = 1.0; });
  bad([](TrainConfig& t) { t.sigma_floor = 0.0; });
  bad([](TrainConfig& t) { t.checkpoint_steps = {8, 3}; });
  bad([](TrainConfig& t) { t.checkpoint_steps = {3, 3}; });
  bad([](TrainConfig& t) { t.checkpoint_steps = {-1}; });
  bad([](TrainConfig& t) { t.checkpoint_steps = {11}; });
}

TEST_CASE("rlvr with zero steps returns only the untouched base") {
  Checkpoint base = init_checkpoint(rollout_config(), 3, "base");
  TrainConfig tc;
  tc.steps = 0;
  RewardMode mode;
  mode.kind = RewardMode::Kind::random;
  auto series = spurious_rlvr(base, rollout_prompts(), mode, tc);
  REQUIRE(series.size() == 1);
  CHECK(series[0].first == 0);
  CHECK(series[0].second == base);
}

TEST_CASE("rlvr requires eval prompts and oracle answers") {
  Checkpoint base = init_checkpoint(rollout_config(), 3, "base");
  TrainConfig tc;
  tc.steps = 2;
  RewardMode mode;
  mode.kind = RewardMode::Kind::incorrect;

  EvalSet no_eval;
  TaskItem t;
  t.question = "(1)=";
  t.answer = "1";
  t.split = Split::pretrain_only;
  no_eval.items = {t};
  CHECK_THROWS_AS(spurious_rlvr(base, no_eval, mode, tc), Error);

  EvalSet blank = rollout_prompts();
  blank.items[0].answer.clear();
  CHECK_THROWS_AS(spurious_rlvr(base, blank, mode, tc), Error);
}

TEST_CASE("rlvr without any rewarded rollouts leaves the base untouched") {
  // Five-digit oracle answers cannot be emitted within max_new = 4 tokens, so
  // every reward is exactly 0, the first-batch baseline stays 0, and every
  // advantage is exactly 0 — no update may be applied.
  Checkpoint base = init_checkpoint(rollout_config(), 41, "base");
  TrainConfig tc;
  tc.steps = 40;
  tc.seed = 11;
  tc.max_new = 4;
  tc.checkpoint_steps = {40};
  RewardMode mode;
  mode.kind = RewardMode::Kind::correct;

  EvalSet prompts = rollout_prompts();
  prompts.items[0].answer = "99999";
  prompts.items[1].answer = "88888";

  std::vector<double> rewards;
  auto series = spurious_rlvr(base, prompts, mode, tc,
                              [&](int, double r) { rewards.push_back(r); });
  REQUIRE(rewards.size() == 40);
  for (double r : rewards) CHECK(r == 0.0);
  REQUIRE(series.size() == 2);
  CHECK(series.back().second.w == base.w);
}

TEST_CASE("rlvr snapshots are a prefix-stable function of the seed") {
  Checkpoint base = init_checkpoint(rollout_config(), 29, "base");
  RewardMode mode;
  mode.kind = RewardMode::Kind::random;
  mode.seed = 7;

  TrainConfig short_run;
  short_run.steps = 10;
  short_run.seed = 19;
  short_run.checkpoint_steps = {5, 10};
  auto a = spurious_rlvr(base, rollout_prompts(), mode, short_run);

  TrainConfig long_run = short_run;
  long_run.steps = 20;
  long_run.checkpoint_steps = {5, 10, 20};
  auto b = spurious_rlvr(base, rollout_prompts(), mode, long_run);

  REQUIRE(a.size() == 3);   // 0, 5, 10
  REQUIRE(b.size() == 4);   // 0, 5, 10, 20
  CHECK(a[0].second == b[0].second);
  CHECK(a[1].second == b[1].second);
  CHECK(a[2].second == b[2].second);
  CHECK(!(b[3].second.w == b[2].second.w));
}

TEST_CASE("rlvr random rewards are a fair coin") {
  Checkpoint base = init_checkpoint(rollout_config(), 2, "base");
  TrainConfig tc;
  tc.steps = 100;
  tc.seed = 3;
  tc.learning_rate = 0.001;  // keep the policy sane while sampling rewards
  RewardMode mode;
  mode.kind = RewardMode::Kind::random;
  mode.seed = 12;

  double sum = 0.0;
  spurious_rlvr(base, rollout_prompts(), mode, tc, [&](int, double r) { sum += r; });
  double mean = sum / 100.0;  // 800 draws; 4 sigma is about 0.07
  CHECK(mean > 0.42);
  CHECK(mean < 0.58);
}

TEST_CASE("KL anchoring keeps the tuned weights nearer the base") {
  Checkpoint base = init_checkpoint(rollout_config(), 37, "base");
  TrainConfig tc;
  tc.steps = 30;
  tc.seed = 13;
  tc.learning_rate = 0.02;
  tc.checkpoint_steps = {30};
  RewardMode mode;
  mode.kind = RewardMode::Kind::random;
  mode.seed = 5;

  auto free_run = spurious_rlvr(base, rollout_prompts(), mode, tc);
  tc.kl_coeff = 5.0;
  auto anchored = spurious_rlvr(base, rollout_prompts(), mode, tc);

  double d_free = weight_distance(free_run.back().second.w, base.w);
  double d_anchor = weight_distance(anchored.back().second.w, base.w);
  CHECK(d_anchor < d_free);
  CHECK(d_free > 0.0);
}

TEST_CASE("extract_answer stops at the sentinel and maps junk ids to '?'") {
  std::vector<int> c = tok::encode("46;");
  CHECK(extract_answer(c) == "46");
  CHECK(extract_answer(tok::encode("46")) == "46");
  CHECK(extract_answer({tok::SENTINEL}) == "");
  CHECK(extract_answer({}) == "");
  std::vector<int> junk = {tok::encode_char('4'), tok::PAD, tok::BOS, 23, tok::SENTINEL,
                           tok::encode_char('9')};
  CHECK(extract_answer(junk) == "4???");
}

TEST_CASE("incorrect_target increments the oracle answer modulo the task modulus") {
  TaskItem t;
  t.question = "(12*7+45)%83=";
  t.answer = "46";
  CHECK(incorrect_target(t) == "47");

  t.question = "(9*9+1)%41=";
  t.answer = "40";
  CHECK(incorrect_target(t) == "0");  // wraps at the modulus

  t.question = "(7)=";
  t.answer = "7";
  CHECK(incorrect_target(t) == "8");  // identity family wraps at 100

  t.question = "(99)=";
  t.answer = "99";
  CHECK(incorrect_target(t) == "0");
}

TEST_CASE("matches_answer_format accepts 1-4 digits closed by the sentinel") {
  CHECK(matches_answer_format(tok::encode("4;")));
  CHECK(matches_answer_format(tok::encode("46;")));
  CHECK(matches_answer_format(tok::encode("4646;")));
  CHECK(!matches_answer_format(tok::encode("46464;")));
  CHECK(!matches_answer_format(tok::encode(";")));
  CHECK(!matches_answer_format(tok::encode("46")));
  CHECK(!matches_answer_format(tok::encode("4;6")));
  CHECK(!matches_answer_format(tok::encode("(6;")));
  CHECK(!matches_answer_format({}));
}

TEST_CASE("reward mode names round-trip") {
  for (auto k : {RewardMode::Kind::correct, RewardMode::Kind::incorrect,
                 RewardMode::Kind::random, RewardMode::Kind::format_only})
    CHECK(reward_kind_from_string(to_string(k)) == k);
  CHECK_THROWS_AS(reward_kind_from_string("sometimes"), Error);
}
