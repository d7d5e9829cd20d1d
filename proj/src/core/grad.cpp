#include "core/grad.hpp"

#include <algorithm>
#include <cmath>

namespace al {

namespace {

struct LayerStash {
  Mat x_in;           // residual entering the layer
  Mat xn_attn;        // normed input to attention
  Mat q, k, v;        // post-rotary projections
  std::vector<Mat> probs;  // per head, T x T (row r valid up to col r)
  Mat mix;            // concatenated head outputs
  Mat x_mid;          // residual after attention add
  Mat xn_mlp;         // normed input to MLP
  Mat g, u, keys;     // gate pre-activation, up, gated keys
};

// d/dx of rms-norm given upstream row gradient g; accumulates scale grads.
void rms_backward_row(const double* x, const double* scale, int n, double eps,
                      const double* gy, double* gx_out, double* gscale_acc) {
  double ss = 0.0;
  for (int i = 0; i < n; ++i) ss += x[i] * x[i];
  double inv = 1.0 / std::sqrt(ss / n + eps);
  double t = 0.0;
  for (int i = 0; i < n; ++i) t += gy[i] * scale[i] * x[i];
  double corr = t * inv * inv / n;
  for (int i = 0; i < n; ++i) {
    gx_out[i] = inv * (gy[i] * scale[i] - x[i] * corr);
    gscale_acc[i] += gy[i] * x[i] * inv;
  }
}

double silu(double z) { return z / (1.0 + std::exp(-z)); }
double silu_grad(double z) {
  double s = 1.0 / (1.0 + std::exp(-z));
  return s * (1.0 + z * (1.0 - s));
}

void validate_loss(const LossSpec& ls, size_t T) {
  check(ls.target.size() == T && ls.weight.size() == T,
        "loss spec must align with token sequence");
  if (!ls.kl_weight.empty()) {
    check(ls.kl_weight.size() == T, "kl_weight must align with token sequence");
    check(ls.kl_base != nullptr, "kl_weight given without a base checkpoint");
  }
  for (size_t p = 0; p < T; ++p)
    if (ls.weight[p] != 0.0)
      check(ls.target[p] >= 0, "scored position lacks a target token");
}

// Loss value and dL/dlogits for one position's logits row.
double loss_row(const double* logits, int V, int target, double w,
                double klw, const double* base_logits, double* dlogits) {
  double total = 0.0;
  std::vector<double> p(logits, logits + V);
  double lse = logsumexp(p.data(), V);
  softmax_row(p.data(), V);
  if (dlogits)
    for (int i = 0; i < V; ++i) dlogits[i] = 0.0;

  if (w != 0.0) {
    total += w * (lse - logits[target]);
    if (dlogits) {
      for (int i = 0; i < V; ++i) dlogits[i] += w * p[i];
      dlogits[target] -= w;
    }
  }
  if (klw != 0.0) {
    double lse_b = logsumexp(base_logits, V);
    double kl = 0.0;
    std::vector<double> diff(V);
    for (int i = 0; i < V; ++i) {
      diff[i] = (logits[i] - lse) - (base_logits[i] - lse_b);
      kl += p[i] * diff[i];
    }
    total += klw * kl;
    if (dlogits)
      for (int i = 0; i < V; ++i) dlogits[i] += klw * p[i] * (diff[i] - kl);
  }
  return total;
}

}  // namespace

double loss_only(const Checkpoint& ckpt, std::span<const int> tokens, const LossSpec& ls) {
  validate_loss(ls, tokens.size());
  ForwardResult res = forward(ckpt, tokens);
  Mat base_logits;
  if (!ls.kl_weight.empty()) base_logits = forward(*ls.kl_base, tokens).logits;
  double total = 0.0;
  const int V = ckpt.config.vocab_size;
  for (size_t p = 0; p < tokens.size(); ++p) {
    double klw = ls.kl_weight.empty() ? 0.0 : ls.kl_weight[p];
    if (ls.weight[p] == 0.0 && klw == 0.0) continue;
    total += loss_row(res.logits[int(p)], V, ls.target[p], ls.weight[p], klw,
                      base_logits.rows ? base_logits[int(p)] : nullptr, nullptr);
  }
  return total;
}

double backward(const Checkpoint& ckpt, std::span<const int> tokens,
                const LossSpec& ls, Weights& grad) {
  const ModelConfig& c = ckpt.config;
  c.validate();
  check(!tokens.empty() && int(tokens.size()) <= c.max_seq_len, "backward: bad sequence length");
  validate_loss(ls, tokens.size());
  check(grad.layers.size() == size_t(c.n_layers), "backward: grad buffer shape mismatch");

  const int T = int(tokens.size());
  const int d = c.d_hidden, m = c.d_mlp, H = c.n_heads, dh = c.d_head(), V = c.vocab_size;
  const double eps = c.norm_eps;
  const double att_scale = 1.0 / std::sqrt(double(dh));

  // ---- forward with stash ----
  std::vector<LayerStash> stash(c.n_layers);
  Mat x(T, d);
  for (int p = 0; p < T; ++p) std::copy_n(ckpt.w.embed[tokens[p]], d, x[p]);
  RotaryTable rot;
  rot.build(T, 0, dh);

  for (int l = 0; l < c.n_layers; ++l) {
    const LayerWeights& lw = ckpt.w.layers[l];
    LayerStash& st = stash[l];
    st.x_in = x;
    st.xn_attn = Mat(T, d);
    for (int r = 0; r < T; ++r) rms_norm_row(x[r], lw.attn_norm[0], d, eps, st.xn_attn[r]);
    st.q = Mat(T, d); st.k = Mat(T, d); st.v = Mat(T, d);
    matmul(st.xn_attn.data(), T, d, lw.wq.data(), d, st.q.data());
    matmul(st.xn_attn.data(), T, d, lw.wk.data(), d, st.k.data());
    matmul(st.xn_attn.data(), T, d, lw.wv.data(), d, st.v.data());
    apply_rotary(st.q, H, rot);
    apply_rotary(st.k, H, rot);
    st.probs.assign(H, Mat(T, T));
    st.mix = Mat(T, d);
    for (int h = 0; h < H; ++h) {
      int off = h * dh;
      Mat& pr = st.probs[h];
      for (int r = 0; r < T; ++r) {
        double* sc = pr[r];
        for (int cp = 0; cp <= r; ++cp)
          sc[cp] = dot(st.q[r] + off, st.k[cp] + off, dh) * att_scale;
        softmax_row(sc, r + 1);
        double* out = st.mix[r] + off;
        for (int cp = 0; cp <= r; ++cp) axpy(sc[cp], st.v[cp] + off, out, dh);
      }
    }
    Mat attn(T, d);
    matmul(st.mix.data(), T, d, lw.wo.data(), d, attn.data());
    for (size_t i = 0; i < x.size(); ++i) x.v[i] += attn.v[i];
    st.x_mid = x;

    st.xn_mlp = Mat(T, d);
    for (int r = 0; r < T; ++r) rms_norm_row(x[r], lw.mlp_norm[0], d, eps, st.xn_mlp[r]);
    st.g = Mat(T, m); st.u = Mat(T, m); st.keys = Mat(T, m);
    matmul(st.xn_mlp.data(), T, d, lw.w_gate.data(), m, st.g.data());
    matmul(st.xn_mlp.data(), T, d, lw.w_up.data(), m, st.u.data());
    for (size_t i = 0; i < st.keys.size(); ++i) st.keys.v[i] = silu(st.g.v[i]) * st.u.v[i];
    Mat mlp(T, d);
    matmul(st.keys.data(), T, m, lw.w_down.data(), d, mlp.data());
    for (size_t i = 0; i < x.size(); ++i) x.v[i] += mlp.v[i];
  }

  Mat xn_fin(T, d);
  for (int r = 0; r < T; ++r) rms_norm_row(x[r], ckpt.w.final_norm[0], d, eps, xn_fin[r]);
  Mat logits(T, V);
  matmul(xn_fin.data(), T, d, ckpt.w.unembed.data(), V, logits.data());

  Mat base_logits;
  if (!ls.kl_weight.empty()) base_logits = forward(*ls.kl_base, tokens).logits;

  // ---- loss and dlogits ----
  double total = 0.0;
  Mat dlogits(T, V);
  for (int p = 0; p < T; ++p) {
    double klw = ls.kl_weight.empty() ? 0.0 : ls.kl_weight[p];
    if (ls.weight[p] == 0.0 && klw == 0.0) continue;
    total += loss_row(logits[p], V, ls.target[p], ls.weight[p], klw,
                      base_logits.rows ? base_logits[p] : nullptr, dlogits[p]);
  }

  // ---- backward ----
  Mat dx(T, d);
  {
    Mat d_xn(T, d);
    matmul_nt(dlogits.data(), T, V, ckpt.w.unembed.data(), d, d_xn.data());
    matmul_tn_acc(xn_fin.data(), T, d, dlogits.data(), V, grad.unembed.data());
    for (int r = 0; r < T; ++r)
      rms_backward_row(x[r], ckpt.w.final_norm[0], d, eps, d_xn[r], dx[r], grad.final_norm[0]);
  }

  Mat d_keys(T, m), d_g(T, m), d_u(T, m), d_xn(T, d), d_q(T, d), d_k(T, d), d_v(T, d), d_mix(T, d), tmp(T, d);
  for (int l = c.n_layers - 1; l >= 0; --l) {
    const LayerWeights& lw = ckpt.w.layers[l];
    LayerWeights& gw = grad.layers[l];
    LayerStash& st = stash[l];

    // MLP branch: dx covers both the residual passthrough and the branch.
    matmul_nt(dx.data(), T, d, lw.w_down.data(), m, d_keys.data());
    matmul_tn_acc(st.keys.data(), T, m, dx.data(), d, gw.w_down.data());
    for (size_t i = 0; i < d_keys.size(); ++i) {
      double z = st.g.v[i];
      d_g.v[i] = d_keys.v[i] * st.u.v[i] * silu_grad(z);
      d_u.v[i] = d_keys.v[i] * silu(z);
    }
    matmul_nt(d_g.data(), T, m, lw.w_gate.data(), d, d_xn.data());
    matmul_nt(d_u.data(), T, m, lw.w_up.data(), d, tmp.data());
    for (size_t i = 0; i < d_xn.size(); ++i) d_xn.v[i] += tmp.v[i];
    matmul_tn_acc(st.xn_mlp.data(), T, d, d_g.data(), m, gw.w_gate.data());
    matmul_tn_acc(st.xn_mlp.data(), T, d, d_u.data(), m, gw.w_up.data());
    for (int r = 0; r < T; ++r) {
      rms_backward_row(st.x_mid[r], lw.mlp_norm[0], d, eps, d_xn[r], tmp[r], gw.mlp_norm[0]);
      axpy(1.0, tmp[r], dx[r], d);
    }

    // Attention branch.
    matmul_nt(dx.data(), T, d, lw.wo.data(), d, d_mix.data());
    matmul_tn_acc(st.mix.data(), T, d, dx.data(), d, gw.wo.data());
    d_q.zero(); d_k.zero(); d_v.zero();
    std::vector<double> d_sc(T), d_scores(T);
    for (int h = 0; h < H; ++h) {
      int off = h * dh;
      const Mat& pr = st.probs[h];
      for (int r = 0; r < T; ++r) {
        const double* dm = d_mix[r] + off;
        for (int cp = 0; cp <= r; ++cp) d_sc[cp] = dot(dm, st.v[cp] + off, dh);
        // softmax jacobian
        double inner = 0.0;
        for (int cp = 0; cp <= r; ++cp) inner += d_sc[cp] * pr[r][cp];
        for (int cp = 0; cp <= r; ++cp) d_scores[cp] = pr[r][cp] * (d_sc[cp] - inner);
        for (int cp = 0; cp <= r; ++cp) {
          axpy(d_scores[cp] * att_scale, st.k[cp] + off, d_q[r] + off, dh);
          axpy(d_scores[cp] * att_scale, st.q[r] + off, d_k[cp] + off, dh);
          axpy(pr[r][cp], dm, d_v[cp] + off, dh);
        }
      }
    }
    apply_rotary_inverse(d_q, H, rot);
    apply_rotary_inverse(d_k, H, rot);
    matmul_nt(d_q.data(), T, d, lw.wq.data(), d, d_xn.data());
    matmul_nt(d_k.data(), T, d, lw.wk.data(), d, tmp.data());
    for (size_t i = 0; i < d_xn.size(); ++i) d_xn.v[i] += tmp.v[i];
    matmul_nt(d_v.data(), T, d, lw.wv.data(), d, tmp.data());
    for (size_t i = 0; i < d_xn.size(); ++i) d_xn.v[i] += tmp.v[i];
    matmul_tn_acc(st.xn_attn.data(), T, d, d_q.data(), d, gw.wq.data());
    matmul_tn_acc(st.xn_attn.data(), T, d, d_k.data(), d, gw.wk.data());
    matmul_tn_acc(st.xn_attn.data(), T, d, d_v.data(), d, gw.wv.data());
    for (int r = 0; r < T; ++r) {
      rms_backward_row(st.x_in[r], lw.attn_norm[0], d, eps, d_xn[r], tmp[r], gw.attn_norm[0]);
      axpy(1.0, tmp[r], dx[r], d);
    }
  }

  for (int p = 0; p < T; ++p) axpy(1.0, dx[p], grad.embed[tokens[p]], d);
  return total;
}

double grad_global_norm(const Weights& grad) {
  double ss = 0.0;
  const_cast<Weights&>(grad).for_each([&ss](Mat& mref) {
    for (double x : mref.v) ss += x * x;
  });
  return std::sqrt(ss);
}

void sgd_step(Weights& w, Weights& grad, SgdState& st, const SgdConfig& cfg) {
  check(cfg.lr > 0.0 && std::isfinite(cfg.lr), "sgd: bad learning rate");
  check(cfg.momentum >= 0.0 && cfg.momentum < 1.0, "sgd: momentum outside [0,1)");
  if (cfg.clip_norm > 0.0) {
    double n = grad_global_norm(grad);
    if (n > cfg.clip_norm) {
      double s = cfg.clip_norm / n;
      grad.for_each([s](Mat& mref) {
        for (double& x : mref.v) x *= s;
      });
    }
  }
  st.velocity.for_each(grad, [&cfg](Mat& vel, const Mat& g) {
    for (size_t i = 0; i < vel.size(); ++i)
      vel.v[i] = cfg.momentum * vel.v[i] + g.v[i];
  });
  w.for_each(st.velocity, [&cfg](Mat& ww, const Mat& vel) {
    for (size_t i = 0; i < ww.size(); ++i) ww.v[i] -= cfg.lr * vel.v[i];
  });
}

}  // namespace al
