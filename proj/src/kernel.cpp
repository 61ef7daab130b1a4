#include "ocld/kernel.hpp"

#include <algorithm>

namespace ocld {

namespace {

double squared_distance(const Latent& a, const Latent& b) {
  require_same_shape(a.values, b.values, "kernel");
  double s = 0.0;
  for (size_t i = 0; i < a.values.data.size(); ++i) {
    const double d = a.values.data[i] - b.values.data[i];
    s += d * d;
  }
  return s;
}

}  // namespace

double rbf(const Latent& z, const Latent& z_prime, double h) {
  if (h <= 0.0) throw std::invalid_argument("rbf: bandwidth must be positive");
  return std::exp(-squared_distance(z, z_prime) / h);
}

Image rbf_grad(const Latent& z, const Latent& z_prime, double h) {
  const double k = rbf(z, z_prime, h);
  Image out(z.values.height, z.values.width, z.values.channels);
  const double scale = -2.0 / h * k;
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = scale * (z.values.data[i] - z_prime.values.data[i]);
  return out;
}

KernelMatrix kernel_matrix(const std::vector<Latent>& batch, double h) {
  if (batch.empty()) throw std::invalid_argument("kernel_matrix: empty batch");
  const int n = static_cast<int>(batch.size());
  KernelMatrix k;
  k.values = Eigen::MatrixXd::Ones(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double v = rbf(batch[i], batch[j], h);
      k.values(i, j) = v;
      k.values(j, i) = v;
    }
  }
  return k;
}

double median_bandwidth(const std::vector<Latent>& batch) {
  const size_t n = batch.size();
  if (n < 2) throw std::invalid_argument("median_bandwidth: need at least 2 latents");
  std::vector<double> d2;
  d2.reserve(n * n);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < n; ++j)
      d2.push_back(i == j ? 0.0 : squared_distance(batch[i], batch[j]));
  const size_t mid = d2.size() / 2;  // upper median over all N^2 pairs
  std::nth_element(d2.begin(), d2.begin() + mid, d2.end());
  const double med = d2[mid];
  return std::max(med / std::log(static_cast<double>(n) + 1.0), 1e-8);
}

Image sds_latent_grad(const NoiseTensor& eps_pred, const NoiseTensor& eps,
                      double t, const WeightFn& w) {
  require_same_shape(eps_pred, eps, "sds_latent_grad");
  const double wt = w(t);
  Image out(eps_pred.height, eps_pred.width, eps_pred.channels);
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = wt * (eps_pred.data[i] - eps.data[i]);
  return out;
}

std::vector<Image> cds_latent_grads(const std::vector<Latent>& noised,
                                    const std::vector<NoiseTensor>& eps_preds,
                                    const std::vector<NoiseTensor>& eps,
                                    double t, const WeightFn& w, double h) {
  const size_t n = noised.size();
  if (n == 0) throw std::invalid_argument("cds_latent_grads: empty batch");
  if (eps_preds.size() != n || eps.size() != n)
    throw std::invalid_argument("cds_latent_grads: list length mismatch");
  for (size_t i = 0; i < n; ++i) {
    require_same_shape(noised[i].values, eps_preds[i], "cds_latent_grads");
    require_same_shape(noised[i].values, eps[i], "cds_latent_grads");
  }
  if (h <= 0.0) throw std::invalid_argument("cds_latent_grads: bandwidth must be positive");

  const double wt = w(t);
  const size_t dim = noised[0].values.data.size();
  std::vector<Image> grads(n);

  for (size_t i = 0; i < n; ++i) {
    Image g(noised[i].values.height, noised[i].values.width,
            noised[i].values.channels);
    for (size_t j = 0; j < n; ++j) {
      const double k = rbf(noised[j], noised[i], h);
      const double rep = -2.0 / h * k;
      for (size_t d = 0; d < dim; ++d) {
        const double residual = eps_preds[j].data[d] - eps[j].data[d];
        const double diff = noised[i].values.data[d] - noised[j].values.data[d];
        g.data[d] += k * residual + rep * diff;
      }
    }
    const double scale = wt / static_cast<double>(n);
    for (size_t d = 0; d < dim; ++d) g.data[d] *= scale;
    grads[i] = std::move(g);
  }
  return grads;
}

std::vector<NoiseTensor> kernel_weighted_prediction(
    const KernelMatrix& k, const std::vector<NoiseTensor>& eps_preds,
    bool normalize) {
  const int n = static_cast<int>(eps_preds.size());
  if (k.size() != n)
    throw std::invalid_argument("kernel_weighted_prediction: dimension mismatch");
  if (n == 0) throw std::invalid_argument("kernel_weighted_prediction: empty batch");

  std::vector<NoiseTensor> out(n);
  for (int i = 0; i < n; ++i) {
    Image acc(eps_preds[0].height, eps_preds[0].width, eps_preds[0].channels);
    double wsum = 0.0;
    for (int j = 0; j < n; ++j) {
      const double kij = k.values(i, j);
      wsum += kij;
      for (size_t d = 0; d < acc.data.size(); ++d)
        acc.data[d] += kij * eps_preds[j].data[d];
    }
    const double denom = normalize ? wsum : static_cast<double>(n);
    for (double& v : acc.data) v /= denom;
    out[i] = std::move(acc);
  }
  return out;
}

}  // namespace ocld
