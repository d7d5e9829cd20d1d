#include "core/model.hpp"

#include <algorithm>
#include <cmath>

#include "core/container.hpp"

namespace al {

namespace {

void validate_tokens(const ModelConfig& c, std::span<const int> tokens) {
  check(!tokens.empty(), "forward: empty token sequence");
  check(int(tokens.size()) <= c.max_seq_len, "forward: sequence exceeds max_seq_len");
  for (int t : tokens)
    check(t >= 0 && t < c.vocab_size, "forward: token id out of range");
}

void validate_spec(const ModelConfig& c, const InterventionSpec& s, int T) {
  using K = InterventionSpec::Kind;
  if (s.kind == K::capture_only) return;
  check(s.layer >= 0 && s.layer < c.n_layers, "intervention: layer out of range");
  if (s.kind == K::patch_activation) {
    check(s.payload.cols == c.d_hidden, "intervention: payload width != d_hidden");
    check(int(s.positions.size()) == s.payload.rows,
          "intervention: positions/payload row mismatch");
    for (int p : s.positions)
      check(p >= 0 && p < T, "intervention: patch position out of range");
  } else if (s.kind == K::scale_keys) {
    check(std::isfinite(s.alpha) && s.alpha >= 0.0, "intervention: alpha must be finite and >= 0");
    check(!s.neurons.empty(), "intervention: empty neuron list");
    for (int n : s.neurons)
      check(n >= 0 && n < c.d_mlp, "intervention: neuron index out of range");
  } else if (s.kind == K::override_weights) {
    check(s.w_gate || s.w_up || s.w_down, "intervention: no override matrices given");
    if (s.w_gate)
      check(s.w_gate->rows == c.d_hidden && s.w_gate->cols == c.d_mlp,
            "intervention: w_gate override shape mismatch");
    if (s.w_up)
      check(s.w_up->rows == c.d_hidden && s.w_up->cols == c.d_mlp,
            "intervention: w_up override shape mismatch");
    if (s.w_down)
      check(s.w_down->rows == c.d_mlp && s.w_down->cols == c.d_hidden,
            "intervention: w_down override shape mismatch");
  }
}

}  // namespace

void rms_norm_row(const double* x, const double* scale, int n, double eps, double* out) {
  double ss = 0.0;
  for (int i = 0; i < n; ++i) ss += x[i] * x[i];
  double inv = 1.0 / std::sqrt(ss / n + eps);
  for (int i = 0; i < n; ++i) out[i] = x[i] * inv * scale[i];
}

// For head-local pair (2i, 2i+1) at position p:
// angle = p * base^(-2i/d_head), standard rotary convention.
void RotaryTable::build(int n_rows, int first_pos, int d_head) {
  pairs = d_head / 2;
  c.resize(size_t(n_rows) * pairs);
  s.resize(size_t(n_rows) * pairs);
  std::vector<double> theta(pairs);
  for (int i = 0; i < pairs; ++i) theta[i] = std::pow(10000.0, -2.0 * i / d_head);
  for (int r = 0; r < n_rows; ++r) {
    double pos = double(first_pos + r);
    for (int i = 0; i < pairs; ++i) {
      double a = pos * theta[i];
      c[size_t(r) * pairs + i] = std::cos(a);
      s[size_t(r) * pairs + i] = std::sin(a);
    }
  }
}

void apply_rotary(Mat& x, int n_heads, const RotaryTable& tab) {
  int d = x.cols, dh = d / n_heads;
  for (int r = 0; r < x.rows; ++r) {
    const double* cr = tab.cos_row(r);
    const double* sr = tab.sin_row(r);
    double* row = x[r];
    for (int h = 0; h < n_heads; ++h) {
      double* blk = row + h * dh;
      for (int i = 0; i < dh / 2; ++i) {
        double c = cr[i], s = sr[i];
        double a = blk[2 * i], b = blk[2 * i + 1];
        blk[2 * i] = a * c - b * s;
        blk[2 * i + 1] = a * s + b * c;
      }
    }
  }
}

void apply_rotary_inverse(Mat& x, int n_heads, const RotaryTable& tab) {
  int d = x.cols, dh = d / n_heads;
  for (int r = 0; r < x.rows; ++r) {
    const double* cr = tab.cos_row(r);
    const double* sr = tab.sin_row(r);
    double* row = x[r];
    for (int h = 0; h < n_heads; ++h) {
      double* blk = row + h * dh;
      for (int i = 0; i < dh / 2; ++i) {
        double c = cr[i], s = sr[i];
        double a = blk[2 * i], b = blk[2 * i + 1];
        blk[2 * i] = a * c + b * s;
        blk[2 * i + 1] = -a * s + b * c;
      }
    }
  }
}

void apply_rotary(Mat& x, int n_heads, int first_pos) {
  RotaryTable tab;
  tab.build(x.rows, first_pos, x.cols / n_heads);
  apply_rotary(x, n_heads, tab);
}

namespace {

// Per-layer attention cache for incremental decoding: rows [0, len) hold
// post-rotary keys and values for already-processed positions.
struct KvStash {
  std::vector<Mat> k, v;
  int len = 0;
};

}  // namespace

static ForwardResult forward_impl(const Checkpoint& ckpt, std::span<const int> tokens,
                                  const InterventionSpec* spec, ActivationTrace* trace,
                                  const ForwardOptions& opt, KvStash* kv) {
  const ModelConfig& c = ckpt.config;
  c.validate();
  validate_tokens(c, tokens);
  const int T = int(tokens.size());
  if (spec) validate_spec(c, *spec, T);
  using K = InterventionSpec::Kind;

  const int d = c.d_hidden, m = c.d_mlp, H = c.n_heads, dh = c.d_head();
  const double eps = c.norm_eps;
  const double att_scale = 1.0 / std::sqrt(double(dh));

  if (trace) {
    trace->residual_pre.assign(c.n_layers + 1, Mat());
    trace->attn_out.assign(c.n_layers, Mat());
    trace->mlp_out.assign(c.n_layers, Mat());
    trace->mlp_keys.assign(c.n_layers, Mat());
  }

  Mat x(T, d);
  for (int p = 0; p < T; ++p)
    std::copy_n(ckpt.w.embed[tokens[p]], d, x[p]);

  Mat xn(T, d), q(T, d), k(T, d), v(T, d), mix(T, d), attn(T, d);
  Mat g(T, m), u(T, m), keys(T, m), mlp(T, d);
  std::vector<double> scores;
  RotaryTable rot;
  rot.build(T, 0, dh);

  for (int l = 0; l < c.n_layers; ++l) {
    const LayerWeights& lw = ckpt.w.layers[l];
    const bool here = spec && spec->layer == l;

    if (trace) trace->residual_pre[l] = x;

    // --- attention ---
    for (int r = 0; r < T; ++r) rms_norm_row(x[r], lw.attn_norm[0], d, eps, xn[r]);
    matmul(xn.data(), T, d, lw.wq.data(), d, q.data());
    matmul(xn.data(), T, d, lw.wk.data(), d, k.data());
    matmul(xn.data(), T, d, lw.wv.data(), d, v.data());
    apply_rotary(q, H, rot);
    apply_rotary(k, H, rot);
    if (kv)
      for (int r = 0; r < T; ++r) {
        std::copy_n(k[r], d, kv->k[l][r]);
        std::copy_n(v[r], d, kv->v[l][r]);
      }

    scores.assign(size_t(T), 0.0);
    for (int h = 0; h < H; ++h) {
      int off = h * dh;
      for (int r = 0; r < T; ++r) {
        double* sc = scores.data();
        for (int cpos = 0; cpos <= r; ++cpos)
          sc[cpos] = dot(q[r] + off, k[cpos] + off, dh) * att_scale;
        softmax_row(sc, r + 1);
        double* out = mix[r] + off;
        std::fill(out, out + dh, 0.0);
        for (int cpos = 0; cpos <= r; ++cpos) axpy(sc[cpos], v[cpos] + off, out, dh);
      }
    }
    matmul(mix.data(), T, d, lw.wo.data(), d, attn.data());

    if (here && spec->kind == K::patch_activation && spec->component == Component::attn)
      for (size_t i = 0; i < spec->positions.size(); ++i)
        std::copy_n(spec->payload[int(i)], d, attn[spec->positions[i]]);
    if (trace) trace->attn_out[l] = attn;

    for (size_t i = 0; i < x.size(); ++i) x.v[i] += attn.v[i];

    // --- gated MLP ---
    for (int r = 0; r < T; ++r) rms_norm_row(x[r], lw.mlp_norm[0], d, eps, xn[r]);
    const Mat& wg = (here && spec->kind == K::override_weights && spec->w_gate) ? *spec->w_gate : lw.w_gate;
    const Mat& wu = (here && spec->kind == K::override_weights && spec->w_up) ? *spec->w_up : lw.w_up;
    const Mat& wd = (here && spec->kind == K::override_weights && spec->w_down) ? *spec->w_down : lw.w_down;
    matmul(xn.data(), T, d, wg.data(), m, g.data());
    matmul(xn.data(), T, d, wu.data(), m, u.data());
    for (size_t i = 0; i < keys.size(); ++i) {
      double z = g.v[i];
      keys.v[i] = z / (1.0 + std::exp(-z)) * u.v[i];
    }
    if (here && spec->kind == K::scale_keys)
      for (int r = 0; r < T; ++r)
        for (int n : spec->neurons) keys[r][n] *= spec->alpha;
    if (trace) trace->mlp_keys[l] = keys;

    matmul(keys.data(), T, m, wd.data(), d, mlp.data());
    if (here && spec->kind == K::patch_activation && spec->component == Component::mlp)
      for (size_t i = 0; i < spec->positions.size(); ++i)
        std::copy_n(spec->payload[int(i)], d, mlp[spec->positions[i]]);
    if (trace) trace->mlp_out[l] = mlp;

    for (size_t i = 0; i < x.size(); ++i) x.v[i] += mlp.v[i];
  }

  if (trace) trace->residual_pre[c.n_layers] = x;
  if (kv) kv->len = T;

  ForwardResult res;
  const int out_rows = opt.logits_last_only ? 1 : T;
  res.logits = Mat(out_rows, c.vocab_size);
  for (int r = 0; r < out_rows; ++r) {
    int src = opt.logits_last_only ? T - 1 : r;
    logit_lens_logits(ckpt, x[src], res.logits[r]);
  }
  if (trace) {
    if (opt.logits_last_only) {
      trace->final_logits = Mat(T, c.vocab_size);
      for (int r = 0; r < T; ++r) logit_lens_logits(ckpt, x[r], trace->final_logits[r]);
    } else {
      trace->final_logits = res.logits;
    }
  }
  return res;
}

ForwardResult forward(const Checkpoint& ckpt, std::span<const int> tokens,
                      const InterventionSpec* spec, ActivationTrace* trace,
                      const ForwardOptions& opt) {
  return forward_impl(ckpt, tokens, spec, trace, opt, nullptr);
}

namespace {

// Processes the token at absolute position `pos` against the cache and writes
// next-token logits. Row-for-row this matches what a full forward over the
// grown sequence computes, so cached decoding is bit-identical to re-running.
void decode_step(const Checkpoint& ckpt, const InterventionSpec* spec, const RotaryTable& rot,
                 KvStash& kv, int pos, int token, double* logits_out) {
  const ModelConfig& c = ckpt.config;
  const int d = c.d_hidden, m = c.d_mlp, H = c.n_heads, dh = c.d_head();
  const double eps = c.norm_eps;
  const double att_scale = 1.0 / std::sqrt(double(dh));
  using K = InterventionSpec::Kind;

  std::vector<double> x(ckpt.w.embed[token], ckpt.w.embed[token] + d);
  std::vector<double> xn(d), q(d), mix(d), attn(d), g(m), u(m), keys(m), mlp(d);
  std::vector<double> scores(size_t(pos) + 1);

  for (int l = 0; l < c.n_layers; ++l) {
    const LayerWeights& lw = ckpt.w.layers[l];
    const bool here = spec && spec->layer == l;

    rms_norm_row(x.data(), lw.attn_norm[0], d, eps, xn.data());
    double* krow = kv.k[l][pos];
    double* vrow = kv.v[l][pos];
    matmul(xn.data(), 1, d, lw.wq.data(), d, q.data());
    matmul(xn.data(), 1, d, lw.wk.data(), d, krow);
    matmul(xn.data(), 1, d, lw.wv.data(), d, vrow);
    {
      const double* cr = rot.cos_row(pos);
      const double* sr = rot.sin_row(pos);
      for (int h = 0; h < H; ++h) {
        double* qb = q.data() + h * dh;
        double* kb = krow + h * dh;
        for (int i = 0; i < dh / 2; ++i) {
          double co = cr[i], si = sr[i];
          double a = qb[2 * i], b = qb[2 * i + 1];
          qb[2 * i] = a * co - b * si;
          qb[2 * i + 1] = a * si + b * co;
          a = kb[2 * i]; b = kb[2 * i + 1];
          kb[2 * i] = a * co - b * si;
          kb[2 * i + 1] = a * si + b * co;
        }
      }
    }
    for (int h = 0; h < H; ++h) {
      int off = h * dh;
      for (int cp = 0; cp <= pos; ++cp)
        scores[cp] = dot(q.data() + off, kv.k[l][cp] + off, dh) * att_scale;
      softmax_row(scores.data(), pos + 1);
      double* out = mix.data() + off;
      std::fill(out, out + dh, 0.0);
      for (int cp = 0; cp <= pos; ++cp) axpy(scores[cp], kv.v[l][cp] + off, out, dh);
    }
    matmul(mix.data(), 1, d, lw.wo.data(), d, attn.data());
    if (here && spec->kind == K::patch_activation && spec->component == Component::attn)
      for (size_t i = 0; i < spec->positions.size(); ++i)
        if (spec->positions[i] == pos) std::copy_n(spec->payload[int(i)], d, attn.data());
    for (int i = 0; i < d; ++i) x[i] += attn[i];

    rms_norm_row(x.data(), lw.mlp_norm[0], d, eps, xn.data());
    const Mat& wg =
        (here && spec->kind == K::override_weights && spec->w_gate) ? *spec->w_gate : lw.w_gate;
    const Mat& wu =
        (here && spec->kind == K::override_weights && spec->w_up) ? *spec->w_up : lw.w_up;
    const Mat& wd =
        (here && spec->kind == K::override_weights && spec->w_down) ? *spec->w_down : lw.w_down;
    matmul(xn.data(), 1, d, wg.data(), m, g.data());
    matmul(xn.data(), 1, d, wu.data(), m, u.data());
    for (int i = 0; i < m; ++i) {
      double z = g[i];
      keys[i] = z / (1.0 + std::exp(-z)) * u[i];
    }
    if (here && spec->kind == K::scale_keys)
      for (int n : spec->neurons) keys[n] *= spec->alpha;
    matmul(keys.data(), 1, m, wd.data(), d, mlp.data());
    if (here && spec->kind == K::patch_activation && spec->component == Component::mlp)
      for (size_t i = 0; i < spec->positions.size(); ++i)
        if (spec->positions[i] == pos) std::copy_n(spec->payload[int(i)], d, mlp.data());
    for (int i = 0; i < d; ++i) x[i] += mlp[i];
  }
  kv.len = pos + 1;
  logit_lens_logits(ckpt, x.data(), logits_out);
}

}  // namespace

Mat mlp_keys(const Checkpoint& ckpt, std::span<const int> tokens, int layer) {
  check(layer >= 0 && layer < ckpt.config.n_layers, "mlp_keys: layer out of range");
  ActivationTrace tr;
  forward(ckpt, tokens, nullptr, &tr);
  return std::move(tr.mlp_keys[layer]);
}

void logit_lens_logits(const Checkpoint& ckpt, const double* h, double* logits_out) {
  const ModelConfig& c = ckpt.config;
  std::vector<double> normed(c.d_hidden);
  rms_norm_row(h, ckpt.w.final_norm[0], c.d_hidden, c.norm_eps, normed.data());
  matmul(normed.data(), 1, c.d_hidden, ckpt.w.unembed.data(), c.vocab_size, logits_out);
}

std::vector<double> logit_lens_probs(const Checkpoint& ckpt, const double* h) {
  std::vector<double> p(ckpt.config.vocab_size);
  logit_lens_logits(ckpt, h, p.data());
  softmax_row(p.data(), int(p.size()));
  return p;
}

std::vector<int> generate(const Checkpoint& ckpt, std::span<const int> prompt,
                          const GenerateOptions& opt) {
  check(!prompt.empty(), "generate: empty prompt");
  check(opt.max_new >= 0, "generate: negative max_new");
  check(opt.temperature >= 0.0 && std::isfinite(opt.temperature),
        "generate: bad temperature");
  const ModelConfig& c = ckpt.config;
  validate_tokens(c, prompt);

  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> out;
  Rng rng(opt.seed);
  if (opt.max_new == 0 || int(seq.size()) >= c.max_seq_len) return out;

  // Prefill the attention cache over the prompt, then decode one position at
  // a time; each step reproduces exactly what a full re-forward would compute.
  const int cap = std::min(c.max_seq_len, int(prompt.size()) + opt.max_new);
  KvStash kv;
  kv.k.assign(size_t(c.n_layers), Mat(cap, c.d_hidden));
  kv.v.assign(size_t(c.n_layers), Mat(cap, c.d_hidden));
  RotaryTable rot;
  rot.build(cap, 0, c.d_head());
  ForwardResult prefill =
      forward_impl(ckpt, seq, opt.spec, nullptr, {/*logits_last_only=*/true}, &kv);
  std::vector<double> step_logits(c.vocab_size);

  for (int step = 0; step < opt.max_new; ++step) {
    if (int(seq.size()) >= c.max_seq_len) break;
    double* logits;
    if (step == 0) {
      logits = prefill.logits[0];
    } else {
      decode_step(ckpt, opt.spec, rot, kv, int(seq.size()) - 1, seq.back(), step_logits.data());
      logits = step_logits.data();
    }
    int tok;
    if (opt.temperature == 0.0) {
      tok = 0;
      for (int i = 1; i < c.vocab_size; ++i)
        if (logits[i] > logits[tok]) tok = i;
    } else {
      for (int i = 0; i < c.vocab_size; ++i) logits[i] /= opt.temperature;
      softmax_row(logits, c.vocab_size);
      double u = rng.uniform();
      double acc = 0.0;
      tok = c.vocab_size - 1;
      for (int i = 0; i < c.vocab_size; ++i) {
        acc += logits[i];
        if (u < acc) { tok = i; break; }
      }
    }
    seq.push_back(tok);
    out.push_back(tok);
    if (tok == opt.stop_token) break;
  }
  return out;
}

void save_trace(const std::string& path, const ModelConfig& cfg, const ActivationTrace& t) {
  TensorBundle b;
  b.config = cfg;
  b.label = "activation-trace";
  for (size_t l = 0; l < t.residual_pre.size(); ++l)
    b.tensors.push_back(NamedTensor::from_mat("residual_pre." + std::to_string(l), t.residual_pre[l]));
  for (size_t l = 0; l < t.attn_out.size(); ++l)
    b.tensors.push_back(NamedTensor::from_mat("attn_out." + std::to_string(l), t.attn_out[l]));
  for (size_t l = 0; l < t.mlp_out.size(); ++l)
    b.tensors.push_back(NamedTensor::from_mat("mlp_out." + std::to_string(l), t.mlp_out[l]));
  for (size_t l = 0; l < t.mlp_keys.size(); ++l)
    b.tensors.push_back(NamedTensor::from_mat("mlp_keys." + std::to_string(l), t.mlp_keys[l]));
  b.tensors.push_back(NamedTensor::from_mat("final_logits", t.final_logits));
  save_bundle(path, b);
}

ActivationTrace load_trace(const std::string& path, ModelConfig* cfg_out) {
  TensorBundle b = load_bundle(path);
  if (cfg_out) *cfg_out = b.config;
  ActivationTrace t;
  const int L = b.config.n_layers;
  t.residual_pre.resize(L + 1);
  t.attn_out.resize(L);
  t.mlp_out.resize(L);
  t.mlp_keys.resize(L);
  for (int l = 0; l <= L; ++l)
    t.residual_pre[l] = b.require("residual_pre." + std::to_string(l)).to_mat();
  for (int l = 0; l < L; ++l) {
    t.attn_out[l] = b.require("attn_out." + std::to_string(l)).to_mat();
    t.mlp_out[l] = b.require("mlp_out." + std::to_string(l)).to_mat();
    t.mlp_keys[l] = b.require("mlp_keys." + std::to_string(l)).to_mat();
  }
  t.final_logits = b.require("final_logits").to_mat();
  return t;
}

// --- checkpoint init ----------------------------------------------------

Weights Weights::zeros(const ModelConfig& c) {
  Weights w;
  w.embed = Mat(c.vocab_size, c.d_hidden);
  w.layers.resize(c.n_layers);
  for (auto& l : w.layers) {
    l.attn_norm = Mat(1, c.d_hidden);
    l.wq = Mat(c.d_hidden, c.d_hidden);
    l.wk = Mat(c.d_hidden, c.d_hidden);
    l.wv = Mat(c.d_hidden, c.d_hidden);
    l.wo = Mat(c.d_hidden, c.d_hidden);
    l.mlp_norm = Mat(1, c.d_hidden);
    l.w_gate = Mat(c.d_hidden, c.d_mlp);
    l.w_up = Mat(c.d_hidden, c.d_mlp);
    l.w_down = Mat(c.d_mlp, c.d_hidden);
  }
  w.final_norm = Mat(1, c.d_hidden);
  w.unembed = Mat(c.d_hidden, c.vocab_size);
  return w;
}

size_t Weights::param_count() const {
  size_t n = 0;
  const_cast<Weights*>(this)->for_each([&n](Mat& m) { n += m.size(); });
  return n;
}

Checkpoint init_checkpoint(const ModelConfig& c, uint64_t seed, const std::string& label) {
  c.validate();
  Checkpoint ckpt;
  ckpt.config = c;
  ckpt.seed = seed;
  ckpt.label = label;
  ckpt.w = Weights::zeros(c);
  Rng rng(derive_seed(seed, "init"));

  auto fill = [&rng](Mat& m, double std) {
    for (auto& x : m.v) x = rng.gaussian() * std;
  };
  auto ones = [](Mat& m) { std::fill(m.v.begin(), m.v.end(), 1.0); };

  double res_shrink = 1.0 / std::sqrt(2.0 * c.n_layers);
  fill(ckpt.w.embed, 0.02);
  for (auto& l : ckpt.w.layers) {
    ones(l.attn_norm);
    fill(l.wq, 1.0 / std::sqrt(double(c.d_hidden)));
    fill(l.wk, 1.0 / std::sqrt(double(c.d_hidden)));
    fill(l.wv, 1.0 / std::sqrt(double(c.d_hidden)));
    fill(l.wo, res_shrink / std::sqrt(double(c.d_hidden)));
    ones(l.mlp_norm);
    fill(l.w_gate, 1.0 / std::sqrt(double(c.d_hidden)));
    fill(l.w_up, 1.0 / std::sqrt(double(c.d_hidden)));
    fill(l.w_down, res_shrink / std::sqrt(double(c.d_mlp)));
  }
  ones(ckpt.w.final_norm);
  fill(ckpt.w.unembed, 1.0 / std::sqrt(double(c.d_hidden)));
  return ckpt;
}

}  // namespace al
