#pragma once

// Continuous-dynamics view of the residual stream: a fitted vector field
// over per-item layer trajectories, Euler rollouts, class separation
// diagnostics, and PCA projection.

#include <functional>

#include "core/model.hpp"
#include "core/tasks.hpp"

namespace al {

// Residual-stream states h_0..h_L at the final answer position, per item.
struct Trajectory {
  int item_id = 0;
  int cls = 0;  // 1 = Leakage, 0 = Stable (generalization)
  std::vector<std::vector<double>> states;  // (L+1) x d
};

struct TrajectorySet {
  int d = 0;
  int n_states = 0;  // L+1
  std::vector<Trajectory> items;
};

// Teacher-forced forward of question+answer; state taken at the position of
// the last answer token. cls = 1 for Leakage-labeled items, 0 for Stable.
TrajectorySet extract_trajectories(const Checkpoint& ckpt,
                                   const std::vector<const TaskItem*>& items,
                                   const std::map<int, ClassLabel>& labels);

// Two-layer tanh MLP mapping (h, t) -> d_hidden, t = layer/L.
struct VectorField {
  int d = 0, width = 0;
  Mat w1;  // (d+1) x width
  std::vector<double> b1;
  Mat w2;  // width x d
  std::vector<double> b2;
  double final_loss = 0.0;
  uint64_t seed = 0;

  void eval(const double* h, double t, double* out) const;
};

// Full-batch gradient descent on the MSE between f(h_l, l/L) and the
// discrete updates h_{l+1} - h_l, pooled over items and layers. Logger
// receives (epoch, mse). Errors on divergence.
VectorField fit_field(const TrajectorySet& traj, int width, int epochs, double lr,
                      uint64_t seed,
                      const std::function<void(int, double)>& log = nullptr);

// h_{l+1} = h_l + f(h_l, l/L); returns L+1 states starting at h0.
// Errors with the layer index if a state goes non-finite.
std::vector<std::vector<double>> euler_rollout(const VectorField& field,
                                               const std::vector<double>& h0, int L);

// Generic variant for analytic fields and discrete-update tables.
std::vector<std::vector<double>> euler_rollout_fn(
    const std::function<void(const double*, double, double*)>& f, int d,
    const std::vector<double>& h0, int L);

// Per-state class mean over trajectories with the given class.
std::vector<std::vector<double>> class_mean_trajectory(const TrajectorySet& traj, int cls);

// ||f(h_leak_l, t_l) - f(h_gen_l, t_l)|| per state index.
std::vector<double> separation_force(const VectorField& field,
                                     const std::vector<std::vector<double>>& leak_mean,
                                     const std::vector<std::vector<double>>& gen_mean);

// | ||f(h_leak_l, t_l)|| - ||f(h_gen_l, t_l)|| | per state index.
std::vector<double> velocity_difference(const VectorField& field,
                                        const std::vector<std::vector<double>>& leak_mean,
                                        const std::vector<std::vector<double>>& gen_mean);

struct PcaResult {
  Mat components;                        // k x d, sign-fixed
  std::vector<double> explained_ratio;   // k entries, eigenvalue / trace
  // Per item: (L+1) x k projected path, centered on the pooled mean.
  std::vector<Mat> item_paths;
  std::vector<int> item_ids;
  std::vector<int> item_cls;
};

// Components fitted on the pooled state set (all items, all layers),
// deterministic up to sign (largest-magnitude coordinate made positive);
// item order does not affect the fit.
PcaResult pca_project(const TrajectorySet& traj, int k = 2);

// Field parameter round-trip in the container format.
void save_field(const std::string& path, const VectorField& f);
VectorField load_field(const std::string& path);

}  // namespace al
