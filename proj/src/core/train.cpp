#include "core/train.hpp"

#include <algorithm>
#include <cmath>

namespace al {

void TrainConfig::validate(int total_steps_known) const {
  check(steps >= 0, "train config: steps must be >= 0", ErrKind::config);
  check(batch_size >= 1, "train config: batch_size must be >= 1", ErrKind::config);
  check(learning_rate > 0.0 && std::isfinite(learning_rate),
        "train config: learning_rate must be positive", ErrKind::config);
  check(momentum >= 0.0 && momentum < 1.0, "train config: momentum outside [0,1)", ErrKind::config);
  check(seq_len >= 2, "train config: seq_len must be >= 2", ErrKind::config);
  check(max_new >= 1, "train config: max_new must be >= 1", ErrKind::config);
  check(rollout_temperature >= 0.0, "train config: negative temperature", ErrKind::config);
  check(kl_coeff >= 0.0, "train config: negative kl_coeff", ErrKind::config);
  check(baseline_ema >= 0.0 && baseline_ema < 1.0, "train config: baseline_ema outside [0,1)", ErrKind::config);
  check(sigma_floor > 0.0, "train config: sigma_floor must be positive", ErrKind::config);
  int limit = total_steps_known >= 0 ? total_steps_known : steps;
  int prev = -1;
  for (int s : checkpoint_steps) {
    check(s >= 0 && s <= limit, "train config: checkpoint step outside [0, steps]", ErrKind::config);
    check(s > prev, "train config: checkpoint_steps must be sorted strictly", ErrKind::config);
    prev = s;
  }
}

RewardMode::Kind reward_kind_from_string(const std::string& s) {
  if (s == "correct") return RewardMode::Kind::correct;
  if (s == "incorrect") return RewardMode::Kind::incorrect;
  if (s == "random") return RewardMode::Kind::random;
  if (s == "format_only") return RewardMode::Kind::format_only;
  fail_config("unknown reward mode '" + s + "'");
}

std::string to_string(RewardMode::Kind k) {
  switch (k) {
    case RewardMode::Kind::correct: return "correct";
    case RewardMode::Kind::incorrect: return "incorrect";
    case RewardMode::Kind::random: return "random";
    case RewardMode::Kind::format_only: return "format_only";
  }
  fail_invalid("bad reward kind");
}

std::string extract_answer(const std::vector<int>& completion) {
  std::string out;
  for (int t : completion) {
    if (t == tok::SENTINEL) break;
    out.push_back(tok::decode_char_lossy(t));
  }
  return out;
}

std::string incorrect_target(const TaskItem& item) {
  // Parse the modulus back out of the question; identity family wraps at 100.
  size_t pct = item.question.rfind('%');
  long p = 100;
  if (pct != std::string::npos)
    p = std::stol(item.question.substr(pct + 1, item.question.size() - pct - 2));
  long v = std::stol(item.answer);
  return std::to_string((v + 1) % p);
}

bool matches_answer_format(const std::vector<int>& completion) {
  if (completion.empty()) return false;
  size_t i = 0;
  while (i < completion.size() && completion[i] >= 2 && completion[i] <= 11) ++i;
  return i >= 1 && i <= 4 && i < completion.size() && completion[i] == tok::SENTINEL &&
         i + 1 == completion.size();
}

Checkpoint pretrain(const Corpus& corpus, const ModelConfig& mc, const TrainConfig& tc,
                    const StepLogger& log) {
  mc.validate();
  tc.validate(0);
  check(!corpus.documents.empty(), "pretrain: corpus is empty", ErrKind::config);
  check(tc.seq_len + 1 <= mc.max_seq_len, "pretrain: seq_len + BOS exceeds max_seq_len",
        ErrKind::config);

  Checkpoint ckpt = init_checkpoint(mc, derive_seed(tc.seed, "pretrain_init"), "pretrained");
  if (tc.steps == 0) return ckpt;

  std::vector<std::vector<int>> docs;
  docs.reserve(corpus.documents.size());
  for (const auto& d : corpus.documents) docs.push_back(tok::encode(d));

  // Candidate window starts per document: every position for free-running
  // windows, or rendering boundaries (start / after-sentinel) when aligned.
  std::vector<std::vector<int>> starts(docs.size());
  for (size_t di = 0; di < docs.size(); ++di) {
    const auto& d = docs[di];
    if (tc.align_windows) {
      starts[di].push_back(0);
      for (int p = 0; p + 2 < int(d.size()); ++p)
        if (d[p] == tok::SENTINEL) starts[di].push_back(p + 1);
    } else {
      int last = std::max(0, int(d.size()) - tc.seq_len);
      for (int p = 0; p <= last; ++p) starts[di].push_back(p);
    }
  }

  Rng rng(derive_seed(tc.seed, "pretrain_batches"));
  Weights grad = Weights::zeros(mc);
  SgdState opt = SgdState::zeros(mc);
  SgdConfig sgd{tc.learning_rate, tc.momentum, tc.clip_norm};

  for (int step = 1; step <= tc.steps; ++step) {
    grad.zero_all();
    double step_loss = 0.0;
    int scored_total = 0;

    // Pass 1: choose windows and count scored positions so every token in
    // the batch carries weight 1/total (batch-mean cross entropy).
    struct Window { int doc, start, len; };
    std::vector<Window> windows(tc.batch_size);
    for (auto& w : windows) {
      w.doc = int(rng.below(docs.size()));
      int dlen = int(docs[w.doc].size());
      w.start = starts[w.doc][rng.below(starts[w.doc].size())];
      w.len = std::min(tc.seq_len, dlen - w.start);
      scored_total += w.len;
    }

    for (const auto& w : windows) {
      std::vector<int> seq(size_t(w.len) + 1);
      seq[0] = tok::BOS;
      std::copy_n(docs[w.doc].begin() + w.start, w.len, seq.begin() + 1);
      LossSpec ls;
      ls.target.assign(seq.size(), -1);
      ls.weight.assign(seq.size(), 0.0);
      for (int p = 0; p + 1 < int(seq.size()); ++p) {
        ls.target[p] = seq[p + 1];
        ls.weight[p] = 1.0 / scored_total;
      }
      step_loss += backward(ckpt, seq, ls, grad);
    }

    if (!std::isfinite(step_loss)) fail_stage("pretrain: loss diverged at step " + std::to_string(step));
    sgd_step(ckpt.w, grad, opt, sgd);
    if (log) log(step, step_loss);
  }
  return ckpt;
}

std::vector<std::pair<int, Checkpoint>> spurious_rlvr(const Checkpoint& base,
                                                      const EvalSet& prompts,
                                                      const RewardMode& mode,
                                                      const TrainConfig& tc,
                                                      const StepLogger& log) {
  base.config.validate();
  tc.validate();

  std::vector<const TaskItem*> pool;
  for (const auto& it : prompts.items)
    if (it.split == Split::eval_contaminated || it.split == Split::eval_clean)
      pool.push_back(&it);
  check(!pool.empty(), "rlvr: no eval_contaminated or eval_clean prompts", ErrKind::config);
  if (mode.kind == RewardMode::Kind::correct || mode.kind == RewardMode::Kind::incorrect)
    for (const TaskItem* it : pool)
      check(!it->answer.empty(), "rlvr: reward mode needs oracle answers on every prompt",
            ErrKind::config);

  std::vector<std::pair<int, Checkpoint>> series;
  auto snap = [&](int step, const Checkpoint& c) {
    if (std::find(tc.checkpoint_steps.begin(), tc.checkpoint_steps.end(), step) !=
        tc.checkpoint_steps.end()) {
      series.emplace_back(step, c);
      series.back().second.label = "rlvr-step-" + std::to_string(step);
    }
  };
  series.emplace_back(0, base);  // step-0 entry is always the untouched base
  Checkpoint ckpt = base;
  ckpt.label = "rlvr";
  if (tc.steps == 0) return series;

  Rng rng(derive_seed(tc.seed, "rlvr_batches"));
  Rng reward_rng(derive_seed(mode.seed, "reward_random"));
  Weights grad = Weights::zeros(base.config);
  SgdState opt = SgdState::zeros(base.config);
  SgdConfig sgd{tc.learning_rate, tc.momentum, tc.clip_norm};

  double baseline = 0.0, sigma = 1.0;
  bool baseline_init = false;

  struct Rollout {
    std::vector<int> seq;      // BOS + question + completion
    int q_len = 0;             // question tokens
    int c_len = 0;             // completion tokens
    double reward = 0.0;
  };

  for (int step = 1; step <= tc.steps; ++step) {
    std::vector<Rollout> batch(tc.batch_size);
    double reward_sum = 0.0;
    for (auto& ro : batch) {
      const TaskItem* item = pool[rng.below(pool.size())];
      std::vector<int> prompt;
      prompt.push_back(tok::BOS);
      for (int t : tok::encode(item->question)) prompt.push_back(t);
      GenerateOptions go;
      go.max_new = tc.max_new;
      go.temperature = tc.rollout_temperature;
      go.seed = rng.next();
      go.stop_token = tok::SENTINEL;
      std::vector<int> completion = generate(ckpt, prompt, go);
      if (completion.empty()) completion.push_back(tok::SENTINEL);  // degenerate, keeps math defined

      std::string extracted = extract_answer(completion);
      double r = 0.0;
      switch (mode.kind) {
        case RewardMode::Kind::correct: r = (extracted == item->answer) ? 1.0 : 0.0; break;
        case RewardMode::Kind::incorrect: r = (extracted == incorrect_target(*item)) ? 1.0 : 0.0; break;
        case RewardMode::Kind::random: r = (reward_rng.uniform() < 0.5) ? 1.0 : 0.0; break;
        case RewardMode::Kind::format_only: r = matches_answer_format(completion) ? 1.0 : 0.0; break;
      }
      ro.seq = prompt;
      ro.seq.insert(ro.seq.end(), completion.begin(), completion.end());
      ro.q_len = int(prompt.size()) - 1;
      ro.c_len = int(completion.size());
      ro.reward = r;
      reward_sum += r;
    }
    double mean_r = reward_sum / tc.batch_size;

    // Advantages against the pre-update moving baseline, normalized by a
    // floored running deviation estimate.
    double b = baseline_init ? baseline : mean_r;
    double denom = std::max(sigma, tc.sigma_floor);
    grad.zero_all();
    for (const auto& ro : batch) {
      double adv = (ro.reward - b) / denom;
      if (adv == 0.0 && tc.kl_coeff == 0.0) continue;
      LossSpec ls;
      ls.target.assign(ro.seq.size(), -1);
      ls.weight.assign(ro.seq.size(), 0.0);
      int first = ro.q_len;  // position predicting the first completion token
      for (int p = first; p < first + ro.c_len; ++p) {
        ls.target[p] = ro.seq[p + 1];
        ls.weight[p] = adv / (double(ro.c_len) * tc.batch_size);
      }
      if (tc.kl_coeff > 0.0) {
        ls.kl_weight.assign(ro.seq.size(), 0.0);
        for (int p = first; p < first + ro.c_len; ++p)
          ls.kl_weight[p] = tc.kl_coeff / (double(ro.c_len) * tc.batch_size);
        ls.kl_base = &base;
      }
      backward(ckpt, ro.seq, ls, grad);
    }
    double gn = grad_global_norm(grad);
    if (!std::isfinite(gn)) fail_stage("rlvr: non-finite gradient at step " + std::to_string(step));
    sgd_step(ckpt.w, grad, opt, sgd);

    // Update the moving statistics after the step.
    double dev = 0.0;
    for (const auto& ro : batch) dev += (ro.reward - mean_r) * (ro.reward - mean_r);
    dev = std::sqrt(dev / tc.batch_size);
    if (!baseline_init) {
      baseline = mean_r;
      sigma = std::max(dev, tc.sigma_floor);
      baseline_init = true;
    } else {
      baseline = tc.baseline_ema * baseline + (1.0 - tc.baseline_ema) * mean_r;
      sigma = tc.baseline_ema * sigma + (1.0 - tc.baseline_ema) * dev;
    }

    if (log) log(step, mean_r);
    snap(step, ckpt);
  }
  return series;
}

}  // namespace al
