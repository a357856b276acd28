#pragma once

#include <array>
#include <vector>

#include <torch/torch.h>

namespace mtmed3d::mtl {

inline constexpr int kTasks = 3;
using Triple = std::array<double, kTasks>;

struct TaskWeights {
  Triple w{1.0, 1.0, 1.0};
  Triple L0{0.0, 0.0, 0.0};
  double alpha = 1.5;
  int64_t step = 0;
  // L0 is the mean loss over the first l0_steps observed steps
  int64_t l0_steps = 10;
  Triple L0_sum{0.0, 0.0, 0.0};
  int64_t L0_count = 0;

  bool has_L0() const { return L0_count >= l0_steps && L0_count > 0; }
  double sum() const { return w[0] + w[1] + w[2]; }
  /// Accumulates one step of losses towards L0; no-op once L0 is fixed.
  void observe(const Triple& losses);
};

struct GradSnapshot {
  Triple G{};       // weighted gradient norms w_i * ||grad L_i||
  double Gbar = 0;  // mean of G
  Triple rtilde{};  // L_i / L_i(0)
  Triple r{};       // rtilde / mean(rtilde)
};

/// Flattened gradient of one loss over the given parameters (zeros where unused).
torch::Tensor flat_grad(const torch::Tensor& loss, const std::vector<torch::Tensor>& params, bool retain_graph = true);

/// G_i = || grad_W (w_i L_i) ||_2; also returns the unweighted norms through `unweighted`.
Triple grad_norms(const std::array<torch::Tensor, kTasks>& losses, const Triple& w,
                  const std::vector<torch::Tensor>& shared_params, Triple* unweighted = nullptr);

/// (rtilde, r) with rtilde_i = L_i / L0_i and r_i = rtilde_i / mean(rtilde).
std::pair<Triple, Triple> training_rates(const Triple& losses, const Triple& L0);

/// sum_i | G_i - Gbar r_i^alpha |.
double gradnorm_loss(const Triple& G, double Gbar, const Triple& r, double alpha);

/// d L_grad / d w_i with the target held constant: sign(G_i - T_i) * ||grad L_i||.
Triple gradnorm_loss_grad(const Triple& G, const Triple& unweighted_norms, double Gbar, const Triple& r, double alpha);

struct GradNormStep {
  GradSnapshot snapshot;
  double L_grad = 0.0;
  bool updated = false;  // false while L0 is still being collected
};

/// One GradNorm update from precomputed unweighted gradient norms: gradient step on
/// L_grad w.r.t. w at lr_w, clamp non-positive weights to 1e-4, renormalise to sum T.
GradNormStep gradnorm_step(TaskWeights& weights, const Triple& losses, const Triple& unweighted_norms, double lr_w);

/// Same, computing the norms over shared_params from differentiable losses.
GradNormStep gradnorm_step(TaskWeights& weights, const std::array<torch::Tensor, kTasks>& losses,
                           const std::vector<torch::Tensor>& shared_params, double lr_w);

/// Rescale to sum T after clamping non-positive entries to 1e-4 (with a warning).
void renormalize(Triple& w, double target_sum = kTasks);

struct MgdaResult {
  std::vector<double> coeffs;
  double objective = 0.0;          // || sum c_i g_i ||^2
  std::vector<double> trace;       // objective after initialisation and every iteration
  int iterations = 0;
};

/// Min-norm convex combination by Frank-Wolfe on the Gram matrix, started from the
/// best exact two-task solution. Stops when the coefficients move less than tol or
/// after max_iter iterations.
MgdaResult mgda_minnorm_gram(const std::vector<std::vector<double>>& gram, int max_iter = 250, double tol = 1e-6);
MgdaResult mgda_minnorm(const std::vector<torch::Tensor>& task_grads, int max_iter = 250, double tol = 1e-6);

}  // namespace mtmed3d::mtl
