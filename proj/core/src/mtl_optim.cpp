#include "mtmed3d/mtl_optim.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "mtmed3d/log.hpp"

namespace mtmed3d::mtl {

void TaskWeights::observe(const Triple& losses) {
  if (has_L0()) return;
  for (int i = 0; i < kTasks; ++i) L0_sum[i] += losses[i];
  ++L0_count;
  if (has_L0())
    for (int i = 0; i < kTasks; ++i) L0[i] = L0_sum[i] / static_cast<double>(L0_count);
}

torch::Tensor flat_grad(const torch::Tensor& loss, const std::vector<torch::Tensor>& params, bool retain_graph) {
  if (params.empty()) throw std::invalid_argument("flat_grad: no parameters");
  std::vector<torch::Tensor> flat;
  if (!loss.requires_grad()) {
    for (const auto& p : params) flat.push_back(torch::zeros({p.numel()}, p.options().requires_grad(false)));
    return torch::cat(flat);
  }
  auto grads = torch::autograd::grad({loss}, params, {}, retain_graph, false, true);
  for (size_t i = 0; i < params.size(); ++i)
    flat.push_back(grads[i].defined() ? grads[i].reshape({-1}) : torch::zeros({params[i].numel()}, params[i].options()));
  auto g = torch::cat(flat).detach();
  if (!torch::isfinite(g).all().item<bool>()) throw std::runtime_error("flat_grad: non-finite gradient");
  return g;
}

Triple grad_norms(const std::array<torch::Tensor, kTasks>& losses, const Triple& w,
                  const std::vector<torch::Tensor>& shared_params, Triple* unweighted) {
  Triple G{}, g{};
  for (int i = 0; i < kTasks; ++i) {
    g[i] = losses[i].defined() ? flat_grad(losses[i], shared_params).to(torch::kDouble).norm().item<double>() : 0.0;
    G[i] = w[i] * g[i];
  }
  if (unweighted) *unweighted = g;
  return G;
}

std::pair<Triple, Triple> training_rates(const Triple& losses, const Triple& L0) {
  Triple rt{}, r{};
  double mean = 0;
  for (int i = 0; i < kTasks; ++i) {
    if (!(L0[i] > 0)) throw std::invalid_argument("training_rates: initial loss must be positive");
    rt[i] = losses[i] / L0[i];
    mean += rt[i] / kTasks;
  }
  if (!(mean > 0)) throw std::invalid_argument("training_rates: all losses are zero");
  for (int i = 0; i < kTasks; ++i) r[i] = rt[i] / mean;
  return {rt, r};
}

double gradnorm_loss(const Triple& G, double Gbar, const Triple& r, double alpha) {
  double L = 0;
  for (int i = 0; i < kTasks; ++i) L += std::abs(G[i] - Gbar * std::pow(r[i], alpha));
  return L;
}

Triple gradnorm_loss_grad(const Triple& G, const Triple& unweighted_norms, double Gbar, const Triple& r, double alpha) {
  Triple d{};
  for (int i = 0; i < kTasks; ++i) {
    const double diff = G[i] - Gbar * std::pow(r[i], alpha);
    const double s = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
    d[i] = s * unweighted_norms[i];
  }
  return d;
}

void renormalize(Triple& w, double target_sum) {
  for (int i = 0; i < kTasks; ++i)
    if (!(w[i] > 0)) {
      log::warn("gradnorm: weight w" + std::to_string(i + 1) + " driven to " + std::to_string(w[i]) +
                ", clamped to 1e-4");
      w[i] = 1e-4;
    }
  const double s = w[0] + w[1] + w[2];
  for (auto& x : w) x *= target_sum / s;
}

GradNormStep gradnorm_step(TaskWeights& weights, const Triple& losses, const Triple& unweighted_norms, double lr_w) {
  GradNormStep out;
  ++weights.step;
  auto& snap = out.snapshot;
  for (int i = 0; i < kTasks; ++i) snap.G[i] = weights.w[i] * unweighted_norms[i];
  snap.Gbar = (snap.G[0] + snap.G[1] + snap.G[2]) / kTasks;
  if (!weights.has_L0()) {
    weights.observe(losses);
    return out;
  }
  std::tie(snap.rtilde, snap.r) = training_rates(losses, weights.L0);
  out.L_grad = gradnorm_loss(snap.G, snap.Gbar, snap.r, weights.alpha);
  const auto d = gradnorm_loss_grad(snap.G, unweighted_norms, snap.Gbar, snap.r, weights.alpha);
  for (int i = 0; i < kTasks; ++i) weights.w[i] -= lr_w * d[i];
  renormalize(weights.w);
  out.updated = true;
  return out;
}

GradNormStep gradnorm_step(TaskWeights& weights, const std::array<torch::Tensor, kTasks>& losses,
                           const std::vector<torch::Tensor>& shared_params, double lr_w) {
  Triple g{};
  grad_norms(losses, weights.w, shared_params, &g);
  Triple L{};
  for (int i = 0; i < kTasks; ++i) L[i] = losses[i].defined() ? losses[i].item<double>() : 0.0;
  return gradnorm_step(weights, L, g, lr_w);
}

namespace {
double quad(const std::vector<std::vector<double>>& M, const std::vector<double>& c) {
  double s = 0;
  for (size_t i = 0; i < c.size(); ++i)
    for (size_t j = 0; j < c.size(); ++j) s += c[i] * M[i][j] * c[j];
  return s;
}
}  // namespace

MgdaResult mgda_minnorm_gram(const std::vector<std::vector<double>>& M, int max_iter, double tol) {
  const size_t n = M.size();
  if (n == 0) throw std::invalid_argument("mgda_minnorm: no tasks");
  for (const auto& row : M)
    if (row.size() != n) throw std::invalid_argument("mgda_minnorm: Gram matrix is not square");
  bool any = false;
  for (size_t i = 0; i < n; ++i) any = any || M[i][i] > 0;
  if (!any) throw std::invalid_argument("mgda_minnorm: all task gradients are zero");

  MgdaResult res;
  res.coeffs.assign(n, 0.0);
  if (n == 1) {
    res.coeffs[0] = 1.0;
    res.objective = M[0][0];
    res.trace = {res.objective};
    return res;
  }

  // best exact solution on any edge of the simplex
  double best = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i + 1; j < n; ++j) {
      const double denom = M[i][i] + M[j][j] - 2 * M[i][j];
      const double g = denom > 0 ? std::clamp((M[j][j] - M[i][j]) / denom, 0.0, 1.0) : 0.5;
      const double cost = g * g * M[i][i] + (1 - g) * (1 - g) * M[j][j] + 2 * g * (1 - g) * M[i][j];
      if (cost < best) {
        best = cost;
        std::fill(res.coeffs.begin(), res.coeffs.end(), 0.0);
        res.coeffs[i] = g;
        res.coeffs[j] = 1 - g;
      }
    }
  auto& c = res.coeffs;
  res.trace.push_back(quad(M, c));

  for (int it = 0; it < max_iter; ++it) {
    std::vector<double> Mc(n, 0.0);
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < n; ++j) Mc[i] += M[i][j] * c[j];
    const size_t v = static_cast<size_t>(std::min_element(Mc.begin(), Mc.end()) - Mc.begin());
    const double gg = quad(M, c);       // gbar . gbar
    const double vg = Mc[v];            // g_v . gbar
    const double dd = gg - 2 * vg + M[v][v];  // ||gbar - g_v||^2
    const double gamma = dd > 0 ? std::clamp((gg - vg) / dd, 0.0, 1.0) : 0.0;

    double change = 0;
    for (size_t i = 0; i < n; ++i) {
      const double next = (1 - gamma) * c[i] + (i == v ? gamma : 0.0);
      change += (next - c[i]) * (next - c[i]);
      c[i] = next;
    }
    res.iterations = it + 1;
    res.trace.push_back(quad(M, c));
    if (std::sqrt(change) < tol) break;
  }
  res.objective = res.trace.back();
  return res;
}

MgdaResult mgda_minnorm(const std::vector<torch::Tensor>& task_grads, int max_iter, double tol) {
  const size_t n = task_grads.size();
  if (n < 2) throw std::invalid_argument("mgda_minnorm: need at least two gradients");
  std::vector<torch::Tensor> g;
  for (const auto& t : task_grads) g.push_back(t.reshape({-1}).to(torch::kDouble));
  std::vector<std::vector<double>> M(n, std::vector<double>(n));
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i; j < n; ++j) M[i][j] = M[j][i] = g[i].dot(g[j]).item<double>();
  return mgda_minnorm_gram(M, max_iter, tol);
}

}  // namespace mtmed3d::mtl
