#include <doctest.h>

#include <Eigen/Eigenvalues>

#include "helpers.hpp"
#include "ocld/kernel.hpp"

using namespace ocld;
using namespace ocld::testing;

namespace {

double rel_err(double a, double b) {
  const double m = std::max(std::abs(a), std::abs(b));
  return m == 0.0 ? 0.0 : std::abs(a - b) / m;
}

WeightFn sigma_sq_weight() {
  WeightFn w;
  w.kind = WeightFn::Kind::kSigmaSquared;
  w.schedule = NoiseSchedule{};
  return w;
}

}  // namespace

TEST_CASE("rbf basics") {
  Rng rng(1);
  const Latent z = random_latent(rng, 2, 3, 2);
  CHECK(rbf(z, z, 0.7) == 1.0);

  // A pair at squared distance exactly h.
  Latent z2 = z;
  z2.values.data[0] += std::sqrt(0.7);
  CHECK(rbf(z, z2, 0.7) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));

  const Latent a = random_latent(rng, 2, 3, 2);
  const Latent b = random_latent(rng, 2, 3, 2);
  double d2 = 0.0;
  for (size_t i = 0; i < a.values.data.size(); ++i) {
    const double d = a.values.data[i] - b.values.data[i];
    d2 += d * d;
  }
  const double h = median_bandwidth({a, b});
  CHECK(std::abs(rbf(a, b, h) - std::exp(-d2 / h)) < 1e-12);

  const Latent bad = random_latent(rng, 3, 3, 2);
  CHECK_THROWS_AS(rbf(a, bad, 1.0), std::invalid_argument);
}

TEST_CASE("rbf_grad is zero at coincident latents") {
  Rng rng(2);
  const Latent z = random_latent(rng, 2, 2, 3);
  const Image g = rbf_grad(z, z, 0.5);
  for (double v : g.data) CHECK(v == 0.0);
}

TEST_CASE("rbf_grad matches central finite differences") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    Latent z = random_latent(rng, 2, 2, 2);
    const Latent zp = random_latent(rng, 2, 2, 2);
    const double h = 1.0 + rng.uniform();
    // rbf_grad differentiates k with respect to its first argument.
    const Image g = rbf_grad(z, zp, h);
    const size_t e = rng.uniform_int(z.values.data.size());
    const double step = 1e-5;
    Latent plus = z, minus = z;
    plus.values.data[e] += step;
    minus.values.data[e] -= step;
    const double fd = (rbf(plus, zp, h) - rbf(minus, zp, h)) / (2.0 * step);
    CHECK(rel_err(fd, g.data[e]) < 1e-5);
  }
}

TEST_CASE("rbf_grad scaling matches the analytic formula") {
  Rng rng(4);
  const Latent a = random_latent(rng, 2, 2, 1);
  const Latent b = random_latent(rng, 2, 2, 1);
  const double h = 2.0, c = 1.7;
  Latent ca = a, cb = b;
  for (double& v : ca.values.data) v *= c;
  for (double& v : cb.values.data) v *= c;
  const Image g = rbf_grad(ca, cb, h);
  const double k = rbf(ca, cb, h);
  for (size_t i = 0; i < g.data.size(); ++i) {
    const double expected =
        -2.0 / h * c * (a.values.data[i] - b.values.data[i]) * k;
    CHECK(std::abs(g.data[i] - expected) < 1e-12);
  }
}

TEST_CASE("kernel_matrix invariants on random batches") {
  Rng rng(5);
  CHECK_THROWS_AS(kernel_matrix({}, 1.0), std::invalid_argument);

  const Latent single = random_latent(rng, 2, 2, 1);
  CHECK(kernel_matrix({single}, 1.0).values(0, 0) == 1.0);

  std::vector<Latent> same(5, single);
  const KernelMatrix ones = kernel_matrix(same, 1.0);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) CHECK(ones.values(i, j) == 1.0);

  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_int(15));
    std::vector<Latent> batch;
    for (int i = 0; i < n; ++i) batch.push_back(random_latent(rng, 2, 2, 2, i));
    const double h = median_bandwidth(batch);
    const KernelMatrix k = kernel_matrix(batch, h);
    for (int i = 0; i < n; ++i) {
      CHECK(k.values(i, i) == 1.0);
      for (int j = 0; j < n; ++j) {
        CHECK(k.values(i, j) == k.values(j, i));
        CHECK(k.values(i, j) > 0.0);
        CHECK(k.values(i, j) <= 1.0);
      }
    }
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(k.values);
    CHECK(eig.eigenvalues().minCoeff() >= -1e-8);
  }
}

TEST_CASE("median_bandwidth: two latents and the degenerate floor") {
  Rng rng(6);
  Latent a = random_latent(rng, 2, 2, 1);
  Latent b = a;
  b.values.data[0] += 2.0;  // squared distance 4
  CHECK(median_bandwidth({a, b}) ==
        doctest::Approx(4.0 / std::log(3.0)).epsilon(1e-12));

  std::vector<Latent> same(4, a);
  CHECK(median_bandwidth(same) == 1e-8);
  CHECK_THROWS_AS(median_bandwidth({a}), std::invalid_argument);
}

TEST_CASE("median_bandwidth matches a brute-force median over all pairs") {
  Rng rng(7);
  std::vector<Latent> batch;
  for (int i = 0; i < 16; ++i) batch.push_back(random_latent(rng, 2, 2, 3, i));
  std::vector<double> d2;
  for (const Latent& a : batch)
    for (const Latent& b : batch) {
      double s = 0.0;
      for (size_t i = 0; i < a.values.data.size(); ++i) {
        const double d = a.values.data[i] - b.values.data[i];
        s += d * d;
      }
      d2.push_back(s);
    }
  std::sort(d2.begin(), d2.end());
  const double med = d2[d2.size() / 2];
  CHECK(median_bandwidth(batch) ==
        doctest::Approx(med / std::log(17.0)).epsilon(1e-12));
}

TEST_CASE("sds_latent_grad basics") {
  Rng rng(8);
  const Image pred = random_gauss_image(rng, 2, 2, 2);
  const Image eps = random_gauss_image(rng, 2, 2, 2);
  const WeightFn w = sigma_sq_weight();

  const Image zero = sds_latent_grad(pred, pred, 0.5, w);
  for (double v : zero.data) CHECK(v == 0.0);

  // sigma^2 at t = 0.5 on the cosine schedule is exactly 0.5.
  const Image g = sds_latent_grad(pred, eps, 0.5, w);
  for (size_t i = 0; i < g.data.size(); ++i)
    CHECK(std::abs(g.data[i] - 0.5 * (pred.data[i] - eps.data[i])) < 1e-12);

  WeightFn constant;
  constant.kind = WeightFn::Kind::kConstant;
  const Image gc = sds_latent_grad(pred, eps, 0.9, constant);
  for (size_t i = 0; i < gc.data.size(); ++i)
    CHECK(gc.data[i] == pred.data[i] - eps.data[i]);
}

TEST_CASE("cds reduces to sds for a single view") {
  Rng rng(9);
  const WeightFn w = sigma_sq_weight();
  for (int trial = 0; trial < 100; ++trial) {
    const Latent z = random_latent(rng, 2, 2, 2);
    const Image pred = random_gauss_image(rng, 2, 2, 2);
    const Image eps = random_gauss_image(rng, 2, 2, 2);
    const double t = rng.uniform(0.1, 0.9);
    const auto grads = cds_latent_grads({z}, {pred}, {eps}, t, w, 1.3);
    const Image sds = sds_latent_grad(pred, eps, t, w);
    for (size_t i = 0; i < sds.data.size(); ++i)
      CHECK(rel_err(grads[0].data[i], sds.data[i]) < 1e-12);
  }
}

TEST_CASE("cds at a symmetric configuration averages to the shared residual") {
  Rng rng(10);
  const WeightFn w = sigma_sq_weight();
  const Latent z = random_latent(rng, 2, 2, 2);
  const Image pred = random_gauss_image(rng, 2, 2, 2);
  const Image eps = random_gauss_image(rng, 2, 2, 2);
  const double t = 0.5;
  const std::vector<Latent> zs(4, z);
  const std::vector<Image> preds(4, pred);
  const std::vector<Image> epss(4, eps);
  const auto grads = cds_latent_grads(zs, preds, epss, t, w, 0.8);
  const Image expected = sds_latent_grad(pred, eps, t, w);
  for (const Image& g : grads)
    for (size_t i = 0; i < g.data.size(); ++i)
      CHECK(std::abs(g.data[i] - expected.data[i]) < 1e-12);
}

TEST_CASE("cds matches a naive double-loop oracle") {
  Rng rng(11);
  const WeightFn w = sigma_sq_weight();
  const int n = 4;
  std::vector<Latent> zs;
  std::vector<Image> preds, epss;
  for (int i = 0; i < n; ++i) {
    zs.push_back(random_latent(rng, 2, 3, 2, i));
    preds.push_back(random_gauss_image(rng, 2, 3, 2));
    epss.push_back(random_gauss_image(rng, 2, 3, 2));
  }
  const double t = 0.37, h = 1.9;
  const auto grads = cds_latent_grads(zs, preds, epss, t, w, h);

  const double wt = w(t);
  for (int i = 0; i < n; ++i) {
    Image expected(2, 3, 2);
    for (int j = 0; j < n; ++j) {
      const double k = rbf(zs[j], zs[i], h);
      for (size_t d = 0; d < expected.data.size(); ++d) {
        const double residual = preds[j].data[d] - epss[j].data[d];
        const double repulsion =
            -2.0 / h * k * (zs[i].values.data[d] - zs[j].values.data[d]);
        expected.data[d] += wt / n * (k * residual + repulsion);
      }
    }
    CHECK(max_abs_diff(grads[i], expected) < 1e-12);
  }
}

TEST_CASE("cds outputs permute with the views") {
  Rng rng(12);
  const WeightFn w = sigma_sq_weight();
  std::vector<Latent> zs;
  std::vector<Image> preds, epss;
  for (int i = 0; i < 5; ++i) {
    zs.push_back(random_latent(rng, 2, 2, 1, i));
    preds.push_back(random_gauss_image(rng, 2, 2, 1));
    epss.push_back(random_gauss_image(rng, 2, 2, 1));
  }
  const double t = 0.5, h = 1.1;
  const auto base = cds_latent_grads(zs, preds, epss, t, w, h);
  const std::vector<int> perm = {3, 0, 4, 1, 2};
  std::vector<Latent> zp;
  std::vector<Image> pp, ep;
  for (int i : perm) {
    zp.push_back(zs[i]);
    pp.push_back(preds[i]);
    ep.push_back(epss[i]);
  }
  const auto permuted = cds_latent_grads(zp, pp, ep, t, w, h);
  // The j-summation order follows the input order, so equality holds to
  // rounding noise rather than bit-exactly.
  for (size_t k = 0; k < perm.size(); ++k)
    CHECK(max_abs_diff(permuted[k], base[perm[k]]) < 1e-14);
}

TEST_CASE("repulsion drives a descent step apart along the separation") {
  // With equal residuals the residual terms of g1 and g2 coincide, so
  // g1 - g2 isolates the repulsion. A descent step z -= lr * g must grow
  // the separation, i.e. (g1 - g2) . (z1 - z2) <= 0.
  Rng rng(13);
  const WeightFn w = sigma_sq_weight();
  for (int trial = 0; trial < 50; ++trial) {
    const Latent z1 = random_latent(rng, 2, 2, 1, 0);
    const Latent z2 = random_latent(rng, 2, 2, 1, 1);
    const Image pred = random_gauss_image(rng, 2, 2, 1);
    const Image eps = random_gauss_image(rng, 2, 2, 1);
    const double h = median_bandwidth({z1, z2});
    const auto g = cds_latent_grads({z1, z2}, {pred, pred}, {eps, eps}, 0.5, w, h);
    double dot_sep = 0.0;
    double sep2 = 0.0;
    for (size_t i = 0; i < g[0].data.size(); ++i) {
      const double sep = z1.values.data[i] - z2.values.data[i];
      dot_sep += (g[0].data[i] - g[1].data[i]) * sep;
      sep2 += sep * sep;
    }
    CHECK(dot_sep <= 0.0);

    const double lr = 1e-3;
    double sep2_after = 0.0;
    for (size_t i = 0; i < g[0].data.size(); ++i) {
      const double sep = (z1.values.data[i] - lr * g[0].data[i]) -
                         (z2.values.data[i] - lr * g[1].data[i]);
      sep2_after += sep * sep;
    }
    CHECK(sep2_after >= sep2);
  }
}

TEST_CASE("cds locality: tiny bandwidth decouples the views") {
  Rng rng(14);
  const WeightFn w = sigma_sq_weight();
  std::vector<Latent> zs;
  std::vector<Image> preds, epss;
  const int n = 4;
  for (int i = 0; i < n; ++i) {
    zs.push_back(random_latent(rng, 2, 2, 1, i));
    preds.push_back(random_gauss_image(rng, 2, 2, 1));
    epss.push_back(random_gauss_image(rng, 2, 2, 1));
  }
  const double t = 0.5;
  const double h = 1e-12 * median_bandwidth(zs);
  const auto grads = cds_latent_grads(zs, preds, epss, t, w, h);
  for (int i = 0; i < n; ++i) {
    const Image sds = sds_latent_grad(preds[i], epss[i], t, w);
    for (size_t d = 0; d < sds.data.size(); ++d)
      CHECK(std::abs(grads[i].data[d] - sds.data[d] / n) < 1e-12);
  }
}

TEST_CASE("svgd: particles seek the mode and repulsion preserves diversity") {
  NoiseSchedule sched;
  WeightFn w = sigma_sq_weight();
  const double t = 0.5, s = 0.1, lr = 0.05;
  const int n = 8, dims_h = 2, dims_w = 2, dims_c = 3;
  Rng rng(15);
  const Image mu = random_gauss_image(rng, dims_h, dims_w, dims_c);
  const auto [alpha, sigma] = sched.alpha_sigma(t);
  (void)sigma;

  auto run = [&](bool with_repulsion) {
    Rng init(16);
    std::vector<Latent> particles;
    for (int i = 0; i < n; ++i)
      particles.push_back(random_latent(init, dims_h, dims_w, dims_c, i));
    const Image zero_eps(dims_h, dims_w, dims_c);
    for (int step = 0; step < 6000; ++step) {
      std::vector<Latent> noised;
      std::vector<Image> preds, epss;
      for (const Latent& p : particles) {
        const Latent z_t = add_noise(p, zero_eps, t, sched);
        preds.push_back(gaussian_oracle_predict(mu, s, z_t.values, t, sched));
        epss.push_back(zero_eps);
        noised.push_back(z_t);
      }
      const double h = median_bandwidth(noised);
      auto grads = cds_latent_grads(noised, preds, epss, t, w, h);
      if (!with_repulsion) {
        // Attraction-only ablation: keep the kernel-weighted residuals.
        const KernelMatrix k = kernel_matrix(noised, h);
        for (int i = 0; i < n; ++i) {
          Image g(dims_h, dims_w, dims_c);
          for (int j = 0; j < n; ++j)
            for (size_t d = 0; d < g.data.size(); ++d)
              g.data[d] += w(t) / n * k.values(j, i) *
                           (preds[j].data[d] - epss[j].data[d]);
          grads[i] = g;
        }
      }
      // The chain through z_t = alpha z contributes a factor alpha.
      for (int i = 0; i < n; ++i)
        for (size_t d = 0; d < grads[i].data.size(); ++d)
          particles[i].values.data[d] -= lr * alpha * grads[i].data[d];
    }
    Image mean(dims_h, dims_w, dims_c);
    for (const Latent& p : particles)
      for (size_t d = 0; d < mean.data.size(); ++d)
        mean.data[d] += p.values.data[d] / n;
    double min_dist = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        min_dist = std::min(min_dist, norm(particles[i].values - particles[j].values));
    return std::make_pair(norm(mean - mu), min_dist);
  };

  const auto [mean_err, min_dist] = run(true);
  CHECK(mean_err < 2e-2);
  CHECK(min_dist > 1e-3);

  const auto [mean_err_ablated, min_dist_ablated] = run(false);
  CHECK(mean_err_ablated < 2e-2);
  CHECK(min_dist_ablated < 1e-6);
}

TEST_CASE("kernel_weighted_prediction matches brute force") {
  Rng rng(17);
  const int n = 5;
  std::vector<Latent> batch;
  std::vector<Image> preds;
  for (int i = 0; i < n; ++i) {
    batch.push_back(random_latent(rng, 2, 2, 2, i));
    preds.push_back(random_gauss_image(rng, 2, 2, 2));
  }
  const KernelMatrix k = kernel_matrix(batch, median_bandwidth(batch));

  for (bool normalize : {false, true}) {
    const auto mixed = kernel_weighted_prediction(k, preds, normalize);
    for (int i = 0; i < n; ++i) {
      double row_sum = 0.0;
      for (int j = 0; j < n; ++j) row_sum += k.values(i, j);
      for (size_t d = 0; d < preds[0].data.size(); ++d) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j) acc += k.values(i, j) * preds[j].data[d];
        acc /= normalize ? row_sum : n;
        CHECK(std::abs(mixed[i].data[d] - acc) < 1e-12);
      }
    }
  }

  // Far-apart latents with normalization reproduce each prediction.
  std::vector<Latent> far;
  for (int i = 0; i < n; ++i) far.emplace_back(Image(2, 2, 2, 100.0 * i), i);
  const auto local =
      kernel_weighted_prediction(kernel_matrix(far, 1.0), preds, true);
  for (int i = 0; i < n; ++i) CHECK(max_abs_diff(local[i], preds[i]) < 1e-9);

  // All-ones kernel with normalization mixes to the plain mean.
  KernelMatrix ones;
  ones.values = Eigen::MatrixXd::Ones(n, n);
  const auto mean_mix = kernel_weighted_prediction(ones, preds, true);
  Image mean(2, 2, 2);
  for (const Image& p : preds)
    for (size_t d = 0; d < mean.data.size(); ++d) mean.data[d] += p.data[d] / n;
  for (int i = 0; i < n; ++i) CHECK(max_abs_diff(mean_mix[i], mean) < 1e-12);

  CHECK_THROWS_AS(kernel_weighted_prediction(ones, {preds[0]}, true),
                  std::invalid_argument);
}
