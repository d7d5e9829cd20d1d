#include "core/dynamics.hpp"

#include <algorithm>
#include <cmath>

#include "core/container.hpp"

namespace al {

TrajectorySet extract_trajectories(const Checkpoint& ckpt,
                                   const std::vector<const TaskItem*>& items,
                                   const std::map<int, ClassLabel>& labels) {
  TrajectorySet out;
  out.d = ckpt.config.d_hidden;
  out.n_states = ckpt.config.n_layers + 1;
  for (const TaskItem* it : items) {
    auto lbl = labels.find(it->id);
    check(lbl != labels.end(), "extract_trajectories: item lacks a class label");
    if (lbl->second != ClassLabel::Leakage && lbl->second != ClassLabel::Stable) continue;
    std::vector<int> seq;
    seq.push_back(tok::BOS);
    for (int t : tok::encode(it->question + it->answer)) seq.push_back(t);
    ActivationTrace tr;
    forward(ckpt, seq, nullptr, &tr);
    int pos = int(seq.size()) - 1;  // last answer token
    Trajectory tj;
    tj.item_id = it->id;
    tj.cls = lbl->second == ClassLabel::Leakage ? 1 : 0;
    tj.states.reserve(out.n_states);
    for (int l = 0; l < out.n_states; ++l) {
      const Mat& res = tr.residual_pre[l];
      tj.states.emplace_back(res[pos], res[pos] + out.d);
    }
    out.items.push_back(std::move(tj));
  }
  return out;
}

void VectorField::eval(const double* h, double t, double* out) const {
  std::vector<double> hidden(width);
  for (int j = 0; j < width; ++j) {
    double s = b1[j];
    for (int i = 0; i < d; ++i) s += h[i] * w1[i][j];
    s += t * w1[d][j];
    hidden[j] = std::tanh(s);
  }
  for (int i = 0; i < d; ++i) out[i] = b2[i];
  for (int j = 0; j < width; ++j) {
    double hj = hidden[j];
    if (hj == 0.0) continue;
    const double* w2j = w2[j];
    for (int i = 0; i < d; ++i) out[i] += hj * w2j[i];
  }
}

VectorField fit_field(const TrajectorySet& traj, int width, int epochs, double lr,
                      uint64_t seed, const std::function<void(int, double)>& log) {
  check(traj.items.size() >= 10, "fit_field: needs at least 10 trajectories");
  check(width >= 1 && epochs >= 0 && lr > 0.0, "fit_field: bad hyperparameters",
        ErrKind::config);
  const int d = traj.d;
  const int L = traj.n_states - 1;
  check(L >= 1, "fit_field: trajectories need at least 2 states");

  // Flatten training pairs: input (h_l, l/L), target h_{l+1} - h_l.
  int N = int(traj.items.size()) * L;
  Mat X(N, d + 1), Y(N, d);
  {
    int row = 0;
    for (const auto& tj : traj.items) {
      check(int(tj.states.size()) == traj.n_states, "fit_field: ragged trajectory");
      for (int l = 0; l < L; ++l) {
        for (int i = 0; i < d; ++i) {
          X[row][i] = tj.states[l][i];
          Y[row][i] = tj.states[l + 1][i] - tj.states[l][i];
        }
        X[row][d] = double(l) / L;
        ++row;
      }
    }
  }

  VectorField f;
  f.d = d;
  f.width = width;
  f.seed = seed;
  f.w1 = Mat(d + 1, width);
  f.b1.assign(width, 0.0);
  f.w2 = Mat(width, d);
  f.b2.assign(d, 0.0);
  Rng rng(derive_seed(seed, "fit_field"));
  for (auto& x : f.w1.v) x = rng.gaussian() / std::sqrt(double(d + 1));
  for (auto& x : f.w2.v) x = rng.gaussian() / std::sqrt(double(width));

  // Full-batch plain gradient descent (keeps the loss monotone within the
  // stability bound and the fit deterministic).
  Mat hidden(N, width), pred(N, d), d_pred(N, d), d_hidden(N, width);
  double mse = 0.0;
  const double denom = double(N) * d;
  for (int epoch = 0; epoch <= epochs; ++epoch) {
    // forward
    matmul(X.data(), N, d + 1, f.w1.data(), width, hidden.data());
    for (int r = 0; r < N; ++r)
      for (int j = 0; j < width; ++j) hidden[r][j] = std::tanh(hidden[r][j] + f.b1[j]);
    matmul(hidden.data(), N, width, f.w2.data(), d, pred.data());
    mse = 0.0;
    for (int r = 0; r < N; ++r)
      for (int i = 0; i < d; ++i) {
        double e = pred[r][i] + f.b2[i] - Y[r][i];
        d_pred[r][i] = 2.0 * e / denom;
        mse += e * e;
      }
    mse /= denom;
    if (!std::isfinite(mse)) fail_stage("fit_field: loss diverged at epoch " + std::to_string(epoch));
    if (log) log(epoch, mse);
    if (epoch == epochs) break;

    // backward
    Mat g_w2(width, d);
    matmul_tn_acc(hidden.data(), N, width, d_pred.data(), d, g_w2.data());
    std::vector<double> g_b2(d, 0.0);
    for (int r = 0; r < N; ++r)
      for (int i = 0; i < d; ++i) g_b2[i] += d_pred[r][i];
    matmul_nt(d_pred.data(), N, d, f.w2.data(), width, d_hidden.data());
    for (int r = 0; r < N; ++r)
      for (int j = 0; j < width; ++j) {
        double h = hidden[r][j];
        d_hidden[r][j] *= (1.0 - h * h);
      }
    Mat g_w1(d + 1, width);
    matmul_tn_acc(X.data(), N, d + 1, d_hidden.data(), width, g_w1.data());
    std::vector<double> g_b1(width, 0.0);
    for (int r = 0; r < N; ++r)
      for (int j = 0; j < width; ++j) g_b1[j] += d_hidden[r][j];

    for (size_t i = 0; i < f.w1.size(); ++i) f.w1.v[i] -= lr * g_w1.v[i];
    for (int j = 0; j < width; ++j) f.b1[j] -= lr * g_b1[j];
    for (size_t i = 0; i < f.w2.size(); ++i) f.w2.v[i] -= lr * g_w2.v[i];
    for (int i = 0; i < d; ++i) f.b2[i] -= lr * g_b2[i];
  }
  f.final_loss = mse;
  return f;
}

std::vector<std::vector<double>> euler_rollout_fn(
    const std::function<void(const double*, double, double*)>& f, int d,
    const std::vector<double>& h0, int L) {
  check(int(h0.size()) == d, "euler_rollout: h0 dimension mismatch");
  for (double x : h0) check(std::isfinite(x), "euler_rollout: non-finite h0");
  check(L >= 0, "euler_rollout: negative depth");
  std::vector<std::vector<double>> out;
  out.reserve(L + 1);
  out.push_back(h0);
  std::vector<double> delta(d);
  for (int l = 0; l < L; ++l) {
    f(out.back().data(), double(l) / std::max(L, 1), delta.data());
    std::vector<double> next(d);
    for (int i = 0; i < d; ++i) {
      next[i] = out.back()[i] + delta[i];
      if (!std::isfinite(next[i]))
        fail_stage("euler_rollout: non-finite state at layer " + std::to_string(l + 1));
    }
    out.push_back(std::move(next));
  }
  return out;
}

std::vector<std::vector<double>> euler_rollout(const VectorField& field,
                                               const std::vector<double>& h0, int L) {
  return euler_rollout_fn(
      [&field](const double* h, double t, double* out) { field.eval(h, t, out); },
      field.d, h0, L);
}

std::vector<std::vector<double>> class_mean_trajectory(const TrajectorySet& traj, int cls) {
  std::vector<std::vector<double>> mean(traj.n_states, std::vector<double>(traj.d, 0.0));
  int n = 0;
  // Accumulate in ascending item-id order so results are order invariant.
  std::vector<const Trajectory*> sorted;
  for (const auto& tj : traj.items)
    if (tj.cls == cls) sorted.push_back(&tj);
  std::sort(sorted.begin(), sorted.end(),
            [](const Trajectory* a, const Trajectory* b) { return a->item_id < b->item_id; });
  for (const Trajectory* tj : sorted) {
    for (int l = 0; l < traj.n_states; ++l)
      for (int i = 0; i < traj.d; ++i) mean[l][i] += tj->states[l][i];
    ++n;
  }
  check(n > 0, "class_mean_trajectory: no items with the requested class");
  for (auto& row : mean)
    for (double& x : row) x /= n;
  return mean;
}

namespace {

std::vector<double> pairwise_field_metric(const VectorField& field,
                                          const std::vector<std::vector<double>>& a,
                                          const std::vector<std::vector<double>>& b,
                                          bool difference_norm) {
  check(a.size() == b.size() && !a.empty(), "field metric: mismatched trajectory lengths");
  int L = int(a.size()) - 1;
  std::vector<double> out(a.size());
  std::vector<double> fa(field.d), fb(field.d);
  for (size_t l = 0; l < a.size(); ++l) {
    check(int(a[l].size()) == field.d && int(b[l].size()) == field.d,
          "field metric: state dimension mismatch");
    double t = double(l) / std::max(L, 1);
    field.eval(a[l].data(), t, fa.data());
    field.eval(b[l].data(), t, fb.data());
    if (difference_norm) {
      double s = 0.0;
      for (int i = 0; i < field.d; ++i) {
        double dlt = fa[i] - fb[i];
        s += dlt * dlt;
      }
      out[l] = std::sqrt(s);
    } else {
      out[l] = std::fabs(frobenius_norm(fa.data(), fa.size()) -
                         frobenius_norm(fb.data(), fb.size()));
    }
  }
  return out;
}

}  // namespace

std::vector<double> separation_force(const VectorField& field,
                                     const std::vector<std::vector<double>>& leak_mean,
                                     const std::vector<std::vector<double>>& gen_mean) {
  return pairwise_field_metric(field, leak_mean, gen_mean, true);
}

std::vector<double> velocity_difference(const VectorField& field,
                                        const std::vector<std::vector<double>>& leak_mean,
                                        const std::vector<std::vector<double>>& gen_mean) {
  return pairwise_field_metric(field, leak_mean, gen_mean, false);
}

namespace {

// Cyclic Jacobi eigensolver for a symmetric matrix; returns eigenvalues and
// eigenvectors (columns of V), deterministically ordered by construction.
void jacobi_eigen(Mat a, std::vector<double>& evals, Mat& evecs) {
  const int n = a.rows;
  evecs = Mat(n, n);
  for (int i = 0; i < n; ++i) evecs[i][i] = 1.0;
  for (int sweep = 0; sweep < 128; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-24) break;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) {
        if (a[p][q] == 0.0) continue;
        double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        double t = (theta >= 0 ? 1.0 : -1.0) /
                   (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;
        for (int i = 0; i < n; ++i) {
          double aip = a[i][p], aiq = a[i][q];
          a[i][p] = c * aip - s * aiq;
          a[i][q] = s * aip + c * aiq;
        }
        for (int i = 0; i < n; ++i) {
          double api = a[p][i], aqi = a[q][i];
          a[p][i] = c * api - s * aqi;
          a[q][i] = s * api + c * aqi;
        }
        for (int i = 0; i < n; ++i) {
          double vip = evecs[i][p], viq = evecs[i][q];
          evecs[i][p] = c * vip - s * viq;
          evecs[i][q] = s * vip + c * viq;
        }
      }
  }
  evals.resize(n);
  for (int i = 0; i < n; ++i) evals[i] = a[i][i];
}

}  // namespace

PcaResult pca_project(const TrajectorySet& traj, int k) {
  const int d = traj.d;
  size_t total_states = traj.items.size() * size_t(traj.n_states);
  check(total_states >= 3, "pca_project: needs at least 3 states");
  check(k >= 1 && size_t(k) <= total_states && k <= d, "pca_project: fewer states than k");

  // Ascending item-id order for exact order invariance.
  std::vector<const Trajectory*> sorted;
  for (const auto& tj : traj.items) sorted.push_back(&tj);
  std::sort(sorted.begin(), sorted.end(),
            [](const Trajectory* a, const Trajectory* b) { return a->item_id < b->item_id; });

  std::vector<double> mean(d, 0.0);
  for (const Trajectory* tj : sorted)
    for (const auto& st : tj->states)
      for (int i = 0; i < d; ++i) mean[i] += st[i];
  for (double& x : mean) x /= double(total_states);

  Mat cov(d, d);
  std::vector<double> cent(d);
  for (const Trajectory* tj : sorted)
    for (const auto& st : tj->states) {
      for (int i = 0; i < d; ++i) cent[i] = st[i] - mean[i];
      for (int i = 0; i < d; ++i) {
        double ci = cent[i];
        if (ci == 0.0) continue;
        double* row = cov[i];
        for (int j = 0; j < d; ++j) row[j] += ci * cent[j];
      }
    }
  for (auto& x : cov.v) x /= double(total_states);

  std::vector<double> evals;
  Mat evecs;
  jacobi_eigen(cov, evals, evecs);

  double trace = 0.0;
  for (double e : evals) trace += std::max(e, 0.0);
  std::vector<int> order(d);
  for (int i = 0; i < d; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (evals[a] != evals[b]) return evals[a] > evals[b];
    return a < b;
  });

  PcaResult res;
  res.components = Mat(k, d);
  res.explained_ratio.resize(k);
  for (int c = 0; c < k; ++c) {
    int col = order[c];
    for (int i = 0; i < d; ++i) res.components[c][i] = evecs[i][col];
    // Sign fix: largest-magnitude coordinate positive, lowest index on ties.
    int arg = 0;
    for (int i = 1; i < d; ++i)
      if (std::fabs(res.components[c][i]) > std::fabs(res.components[c][arg])) arg = i;
    if (res.components[c][arg] < 0.0)
      for (int i = 0; i < d; ++i) res.components[c][i] = -res.components[c][i];
    res.explained_ratio[c] = trace > 0.0 ? std::max(evals[col], 0.0) / trace : 0.0;
  }

  for (const Trajectory* tj : sorted) {
    Mat path(traj.n_states, k);
    for (int l = 0; l < traj.n_states; ++l)
      for (int c = 0; c < k; ++c) {
        double s = 0.0;
        for (int i = 0; i < d; ++i) s += (tj->states[l][i] - mean[i]) * res.components[c][i];
        path[l][c] = s;
      }
    res.item_paths.push_back(std::move(path));
    res.item_ids.push_back(tj->item_id);
    res.item_cls.push_back(tj->cls);
  }
  return res;
}

void save_field(const std::string& path, const VectorField& f) {
  TensorBundle b;
  b.config = ModelConfig{};  // field params carry their own dims via tensors
  b.config.d_hidden = f.d;
  b.seed = f.seed;
  b.label = "vector-field";
  b.tensors.push_back(NamedTensor::from_mat("w1", f.w1));
  b.tensors.push_back({"b1", {uint64_t(f.width)}, f.b1});
  b.tensors.push_back(NamedTensor::from_mat("w2", f.w2));
  b.tensors.push_back({"b2", {uint64_t(f.d)}, f.b2});
  b.tensors.push_back({"final_loss", {1}, {f.final_loss}});
  save_bundle(path, b);
}

VectorField load_field(const std::string& path) {
  TensorBundle b = load_bundle(path);
  VectorField f;
  f.seed = b.seed;
  f.w1 = b.require("w1").to_mat();
  f.w2 = b.require("w2").to_mat();
  f.b1 = b.require("b1").data;
  f.b2 = b.require("b2").data;
  f.final_loss = b.require("final_loss").data.at(0);
  f.d = f.w2.cols;
  f.width = f.w2.rows;
  check(f.w1.rows == f.d + 1 && f.w1.cols == f.width, "field file: inconsistent shapes",
        ErrKind::io);
  return f;
}

}  // namespace al
