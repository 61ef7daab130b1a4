#pragma once

#include <Eigen/Dense>

#include "ocld/noise.hpp"

namespace ocld {

// N x N RBF similarities among latents. Symmetric, unit diagonal,
// entries in (0, 1], numerically PSD.
struct KernelMatrix {
  Eigen::MatrixXd values;

  int size() const { return static_cast<int>(values.rows()); }
};

// k(z, z') = exp(-||z - z'||_2^2 / h) over flattened latent values.
double rbf(const Latent& z, const Latent& z_prime, double h);

// Gradient of the kernel with respect to its first argument:
//   grad_z k(z, z') = -(2 / h) (z - z') k(z, z').
// By symmetry this equals the gradient w.r.t. z' of k(z', z).
Image rbf_grad(const Latent& z, const Latent& z_prime, double h);

KernelMatrix kernel_matrix(const std::vector<Latent>& batch, double h);

// SVGD median heuristic: upper median of all N^2 pairwise squared
// distances divided by log(N + 1), floored at 1e-8.
double median_bandwidth(const std::vector<Latent>& batch);

// w(t) for the distillation gradients; sigma_t^2 by default, or constant 1.
struct WeightFn {
  enum class Kind { kSigmaSquared, kConstant };
  Kind kind = Kind::kSigmaSquared;
  NoiseSchedule schedule;

  double operator()(double t) const {
    if (kind == Kind::kConstant) return 1.0;
    const auto [alpha, sigma] = schedule.alpha_sigma(t);
    (void)alpha;
    return sigma * sigma;
  }
};

// Single-view SDS latent gradient: w(t) (eps_pred - eps).
Image sds_latent_grad(const NoiseTensor& eps_pred, const NoiseTensor& eps,
                      double t, const WeightFn& w);

// Kernel-coupled multi-view latent gradients. For each view i,
//   g_i = (w(t) / N) sum_j [ k(z_j, z_i) (eps_pred_j - eps_j)
//                            + grad_{z_i} k(z_i, z_j) ],
// i.e. kernel-weighted attraction over the residuals plus the repulsion
// term taken as the kernel gradient with respect to the anchor latent,
// so that a gradient-descent step drives coincident latents apart.
// For N = 1 this reduces exactly to sds_latent_grad.
std::vector<Image> cds_latent_grads(const std::vector<Latent>& noised,
                                    const std::vector<NoiseTensor>& eps_preds,
                                    const std::vector<NoiseTensor>& eps,
                                    double t, const WeightFn& w, double h);

// eps_hat_i = sum_j K[i][j] eps_j / (N or row sum of K).
std::vector<NoiseTensor> kernel_weighted_prediction(
    const KernelMatrix& k, const std::vector<NoiseTensor>& eps_preds,
    bool normalize);

}  // namespace ocld
