#include <doctest.h>

#include "helpers.hpp"
#include "ocld/noise.hpp"

using namespace ocld;
using namespace ocld::testing;

TEST_CASE("cosine schedule endpoints and variance preservation") {
  NoiseSchedule s;
  {
    const auto [a, sg] = s.alpha_sigma(1e-9);
    CHECK(a == doctest::Approx(1.0));
    CHECK(sg == doctest::Approx(0.0));
  }
  {
    const auto [a, sg] = s.alpha_sigma(0.5);
    CHECK(a == doctest::Approx(std::cos(M_PI / 4)).epsilon(1e-12));
    CHECK(sg == doctest::Approx(std::sin(M_PI / 4)).epsilon(1e-12));
  }
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const auto [a, sg] = s.alpha_sigma(rng.uniform());
    CHECK(std::abs(a * a + sg * sg - 1.0) < 1e-9);
  }
  CHECK_THROWS_AS(s.alpha_sigma(-0.1), std::invalid_argument);
  CHECK_THROWS_AS(s.alpha_sigma(1.1), std::invalid_argument);
  // alpha strictly decreasing, sigma strictly increasing
  double prev_a = 2.0, prev_s = -1.0;
  for (int k = 0; k <= 100; ++k) {
    const auto [a, sg] = s.alpha_sigma(k / 100.0);
    CHECK(a < prev_a);
    CHECK(sg > prev_s);
    prev_a = a;
    prev_s = sg;
  }
}

TEST_CASE("add_noise is the exact affine forward process") {
  NoiseSchedule s;
  Rng rng(2);
  const Latent z = random_latent(rng, 3, 4, 2);
  const Image eps = random_gauss_image(rng, 3, 4, 2);

  SUBCASE("t near zero keeps z") {
    const Latent zt = add_noise(z, eps, 1e-12, s);
    CHECK(max_abs_diff(zt.values, z.values) < 1e-10);
  }
  SUBCASE("zero noise scales by alpha") {
    const Image zero(3, 4, 2);
    const Latent zt = add_noise(z, zero, 0.3, s);
    const auto [a, sg] = s.alpha_sigma(0.3);
    (void)sg;
    for (size_t i = 0; i < zt.values.data.size(); ++i)
      CHECK(zt.values.data[i] == a * z.values.data[i]);
  }
  SUBCASE("matches direct recomputation") {
    const Latent zt = add_noise(z, eps, 0.5, s);
    const auto [a, sg] = s.alpha_sigma(0.5);
    for (size_t i = 0; i < zt.values.data.size(); ++i)
      CHECK(std::abs(zt.values.data[i] -
                     (a * z.values.data[i] + sg * eps.data[i])) < 1e-12);
  }
  SUBCASE("shape mismatch throws") {
    const Image bad(2, 2, 2);
    CHECK_THROWS_AS(add_noise(z, bad, 0.5, s), std::invalid_argument);
  }
}

TEST_CASE("progressive timestep endpoints and linearity") {
  CHECK(progressive_timestep(0, 100, 0.02, 0.98) == 0.98);
  CHECK(progressive_timestep(100, 100, 0.02, 0.98) == doctest::Approx(0.02));
  CHECK(progressive_timestep(50, 100, 0.02, 0.98) == doctest::Approx(0.5));
  CHECK_THROWS_AS(progressive_timestep(0, 0, 0.02, 0.98), std::invalid_argument);
  CHECK_THROWS_AS(progressive_timestep(-1, 10, 0.02, 0.98), std::invalid_argument);
  CHECK_THROWS_AS(progressive_timestep(11, 10, 0.02, 0.98), std::invalid_argument);
  double prev = 1.0;
  for (int i = 0; i <= 10; ++i) {
    const double t = progressive_timestep(i, 10, 0.1, 0.9);
    CHECK(t <= prev);
    prev = t;
  }
}

TEST_CASE("cfg_combine endpoints are bit-exact and the map is affine") {
  Rng rng(3);
  const Image a = random_gauss_image(rng, 4, 4, 3);
  const Image b = random_gauss_image(rng, 4, 4, 3);
  const Image at0 = cfg_combine(a, b, 0.0);
  const Image at1 = cfg_combine(a, b, 1.0);
  CHECK(at0.data == a.data);
  CHECK(at1.data == b.data);

  const Image g1 = cfg_combine(a, b, 2.5);
  const Image g2 = cfg_combine(a, b, 5.0);
  const Image sum = cfg_combine(a, b, 7.5);
  for (size_t i = 0; i < sum.data.size(); ++i)
    CHECK(std::abs(g1.data[i] + g2.data[i] - a.data[i] - sum.data[i]) < 1e-12);

  const Image bad(2, 2, 3);
  CHECK_THROWS_AS(cfg_combine(a, bad, 1.0), std::invalid_argument);
}

TEST_CASE("gaussian oracle: zero prediction at the scaled mode") {
  NoiseSchedule s;
  Rng rng(4);
  const Image mu = random_gauss_image(rng, 3, 3, 2);
  const auto [a, sg] = s.alpha_sigma(0.4);
  (void)sg;
  const Image z_t = a * mu;
  const Image pred = gaussian_oracle_predict(mu, 0.3, z_t, 0.4, s);
  for (double v : pred.data) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("gaussian oracle: s = 0 recovers injected noise exactly") {
  NoiseSchedule s;
  Rng rng(5);
  const Latent mu(random_gauss_image(rng, 3, 3, 2));
  const Image eps = random_gauss_image(rng, 3, 3, 2);
  const Latent z_t = add_noise(mu, eps, 0.6, s);
  const Image pred = gaussian_oracle_predict(mu.values, 0.0, z_t.values, 0.6, s);
  CHECK(max_abs_diff(pred, eps) < 1e-9);
}

TEST_CASE("gaussian oracle matches a Monte-Carlo score estimate") {
  // grad log p_t(z) = E_{x0 | z}[-(z - alpha x0) / sigma^2]; estimate the
  // posterior expectation by importance-weighting forward draws of x0 with
  // the transition density, then compare against -pred / sigma.
  NoiseSchedule sched;
  const double s = 0.3, t = 0.5;
  Rng rng(6);
  const Image mu(1, 1, 1, 0.7);
  Image z_t(1, 1, 1, 0.4);
  const auto [alpha, sigma] = sched.alpha_sigma(t);
  const Image pred = gaussian_oracle_predict(mu, s, z_t, t, sched);

  const int n = 1000000;
  const double var = alpha * alpha * s * s + sigma * sigma;
  const double analytic_score = -(z_t.data[0] - alpha * mu.data[0]) / var;
  double num = 0.0, den = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x0 = mu.data[0] + s * rng.gauss();
    const double resid = z_t.data[0] - alpha * x0;
    const double w = std::exp(-0.5 * resid * resid / (sigma * sigma));
    num += w * (-resid / (sigma * sigma));
    den += w;
  }
  const double mc_score = num / den;
  CHECK(std::abs(mc_score - analytic_score) < 1e-2);
  CHECK(std::abs(-pred.data[0] / sigma - analytic_score) < 1e-12);
}

TEST_CASE("gaussian oracle descent converges to the mean") {
  NoiseSchedule sched;
  const double t = 0.5, s = 0.1, lr = 0.05;
  Rng rng(7);
  const Image mu = random_gauss_image(rng, 2, 2, 3);
  Latent z(random_gauss_image(rng, 2, 2, 3));
  for (int step = 0; step < 2000; ++step) {
    Image update(2, 2, 3);
    const int draws = 8;
    for (int d = 0; d < draws; ++d) {
      const Image eps = random_gauss_image(rng, 2, 2, 3);
      const Latent z_t = add_noise(z, eps, t, sched);
      const Image pred = gaussian_oracle_predict(mu, s, z_t.values, t, sched);
      for (size_t i = 0; i < update.data.size(); ++i)
        update.data[i] += (pred.data[i] - eps.data[i]) / draws;
    }
    for (size_t i = 0; i < z.values.data.size(); ++i)
      z.values.data[i] -= lr * update.data[i];
    if (step > 200 && norm(z.values - mu) < 1e-2) break;
  }
  CHECK(norm(z.values - mu) < 1e-2);
}

TEST_CASE("context-pull: all-false mask reproduces context exactly") {
  NoiseSchedule sched;
  ContextPullDenoiser den(sched);
  Rng rng(8);
  const Image ctx = random_gauss_image(rng, 4, 4, 2);
  const Condition cond(Mask(4, 4, false), ctx, "scene");
  const Image z_t = random_gauss_image(rng, 4, 4, 2);
  const double t = 0.5;
  const Image pred = den.predict(z_t, t, cond, true);
  const auto [alpha, sigma] = sched.alpha_sigma(t);
  for (size_t i = 0; i < pred.data.size(); ++i)
    CHECK(std::abs(pred.data[i] - (z_t.data[i] - alpha * ctx.data[i]) / sigma) <
          1e-12);
}

TEST_CASE("context-pull: single masked pixel pulls toward constant surroundings") {
  NoiseSchedule sched;
  ContextPullDenoiser den(sched);
  const double v = 0.42;
  Image ctx(5, 5, 1, v);
  Mask mask(5, 5, false);
  mask.set(2, 2, true);
  const Condition cond(mask, ctx, "scene");
  const Image target = den.fill_target(cond);
  CHECK(target.at(2, 2, 0) == doctest::Approx(v).epsilon(1e-12));
}

TEST_CASE("context-pull fill matches a brute-force inverse-distance sum") {
  NoiseSchedule sched;
  ContextPullDenoiser den(sched, 8.0);
  Rng rng(9);
  const Image ctx = random_gauss_image(rng, 8, 8, 2);
  Mask mask(8, 8, false);
  for (int y = 2; y < 6; ++y)
    for (int x = 3; x < 7; ++x) mask.set(y, x, true);
  const Condition cond(mask, ctx, "scene");
  const Image target = den.fill_target(cond);

  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      if (!mask.at(y, x)) continue;
      for (int c = 0; c < 2; ++c) {
        double num = 0.0, denom = 0.0;
        for (int yy = 0; yy < 8; ++yy)
          for (int xx = 0; xx < 8; ++xx) {
            if (mask.at(yy, xx)) continue;
            const double d2 = (yy - y) * (yy - y) + (xx - x) * (xx - x);
            if (d2 > 64.0) continue;
            num += cond.context.at(yy, xx, c) / d2;
            denom += 1.0 / d2;
          }
        CHECK(std::abs(target.at(y, x, c) - num / denom) < 1e-12);
      }
    }
}

TEST_CASE("context-pull rejects an all-true mask") {
  NoiseSchedule sched;
  ContextPullDenoiser den(sched);
  const Condition cond(Mask(3, 3, true), Image(3, 3, 1), "scene");
  const Image z_t(3, 3, 1, 0.5);
  CHECK_THROWS_AS(den.predict(z_t, 0.5, cond, true), std::invalid_argument);
}

TEST_CASE("denoisers are deterministic and the registry resolves names") {
  NoiseSchedule sched;
  auto gauss = DenoiserRegistry::create("gaussian-oracle", sched);
  auto pull = DenoiserRegistry::create("context-pull", sched);
  CHECK_THROWS_AS(DenoiserRegistry::create("nope", sched), std::invalid_argument);

  Rng rng(10);
  const Image z_t = random_gauss_image(rng, 4, 4, 3);
  Image ctx = random_gauss_image(rng, 4, 4, 3);
  Mask mask(4, 4, false);
  mask.set(1, 1, true);
  const Condition cond(mask, ctx, "scene");
  for (const auto& den : {gauss, pull}) {
    const Image a = den->predict(z_t, 0.5, cond, true);
    const Image b = den->predict(z_t, 0.5, cond, true);
    CHECK(a.data == b.data);
  }

  // Third-party registration through the interface.
  struct Zero : Denoiser {
    NoiseTensor predict(const Image& z_t, double, const Condition&,
                        bool) const override {
      return Image(z_t.height, z_t.width, z_t.channels);
    }
  };
  DenoiserRegistry::register_denoiser(
      "zero", [](const NoiseSchedule&) { return std::make_shared<Zero>(); });
  auto zero = DenoiserRegistry::create("zero", sched);
  CHECK(norm(zero->predict(z_t, 0.5, cond, true)) == 0.0);
}

TEST_CASE("condition constructor zeroes context under the mask") {
  Rng rng(11);
  Image ctx = random_gauss_image(rng, 4, 4, 2);
  Mask mask(4, 4, false);
  mask.set(0, 3, true);
  mask.set(2, 1, true);
  const Condition cond(mask, ctx, "scene");
  for (int c = 0; c < 2; ++c) {
    CHECK(cond.context.at(0, 3, c) == 0.0);
    CHECK(cond.context.at(2, 1, c) == 0.0);
    CHECK(cond.context.at(1, 1, c) == ctx.at(1, 1, c));
  }
}
