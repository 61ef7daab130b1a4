#include "ocld/noise.hpp"

#include <map>
#include <mutex>

namespace ocld {

Latent add_noise(const Latent& z, const NoiseTensor& eps, double t,
                 const NoiseSchedule& schedule) {
  require_same_shape(z.values, eps, "add_noise");
  const auto [alpha, sigma] = schedule.alpha_sigma(t);
  Latent out = z;
  for (size_t i = 0; i < out.values.data.size(); ++i)
    out.values.data[i] = alpha * z.values.data[i] + sigma * eps.data[i];
  return out;
}

double progressive_timestep(int iter, int max_iter, double t_min, double t_max) {
  if (max_iter <= 0)
    throw std::invalid_argument("progressive_timestep: max_iter must be positive");
  if (iter < 0 || iter > max_iter)
    throw std::invalid_argument("progressive_timestep: iter outside [0, max_iter]");
  return t_max - (t_max - t_min) * static_cast<double>(iter) / max_iter;
}

NoiseTensor cfg_combine(const NoiseTensor& eps_uncond,
                        const NoiseTensor& eps_cond, double gamma) {
  require_same_shape(eps_uncond, eps_cond, "cfg_combine");
  NoiseTensor out(eps_uncond.height, eps_uncond.width, eps_uncond.channels);
  const double a = 1.0 - gamma;
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = a * eps_uncond.data[i] + gamma * eps_cond.data[i];
  return out;
}

Condition::Condition(Mask m, Image ctx, std::string tag)
    : mask(std::move(m)), context(std::move(ctx)), concept_tag(std::move(tag)) {
  if (mask.height != context.height || mask.width != context.width)
    throw std::invalid_argument("Condition: mask/context shape mismatch");
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(y, x))
        for (int c = 0; c < context.channels; ++c) context.at(y, x, c) = 0.0;
}

NoiseTensor gaussian_oracle_predict(const Image& mean, double s,
                                    const Image& z_t, double t,
                                    const NoiseSchedule& schedule) {
  if (s < 0.0) throw std::invalid_argument("gaussian_oracle_predict: s must be >= 0");
  if (!mean.empty()) require_same_shape(mean, z_t, "gaussian_oracle_predict");
  const auto [alpha, sigma] = schedule.alpha_sigma(t);
  const double denom = alpha * alpha * s * s + sigma * sigma;
  NoiseTensor out(z_t.height, z_t.width, z_t.channels);
  for (size_t i = 0; i < out.data.size(); ++i) {
    const double mu = mean.empty() ? 0.0 : mean.data[i];
    out.data[i] = sigma * (z_t.data[i] - alpha * mu) / denom;
  }
  return out;
}

GaussianOracleDenoiser::GaussianOracleDenoiser(Image mean, double s,
                                               NoiseSchedule schedule)
    : mean_(std::move(mean)), s_(s), schedule_(schedule) {
  if (s < 0.0) throw std::invalid_argument("GaussianOracleDenoiser: s must be >= 0");
}

NoiseTensor GaussianOracleDenoiser::predict(const Image& z_t, double t,
                                            const Condition& condition,
                                            bool conditional) const {
  (void)condition;
  (void)conditional;  // the oracle has a single branch
  return gaussian_oracle_predict(mean_, s_, z_t, t, schedule_);
}

ContextPullDenoiser::ContextPullDenoiser(NoiseSchedule schedule,
                                         double cutoff_radius)
    : schedule_(schedule), cutoff_(cutoff_radius) {}

Image ContextPullDenoiser::fill_target(const Condition& condition) const {
  const Mask& mask = condition.mask;
  const Image& ctx = condition.context;
  if (mask.count() == mask.data.size())
    throw std::invalid_argument("context-pull: mask has no unmasked context");

  Image target = ctx;
  const int h = ctx.height, w = ctx.width, ch = ctx.channels;
  const int r = static_cast<int>(std::ceil(cutoff_));
  const double r2 = cutoff_ * cutoff_;

  // Per-channel global mean of the unmasked context, fallback when nothing
  // lies within the cutoff radius.
  std::vector<double> global_mean(ch, 0.0);
  size_t n_ctx = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (!mask.at(y, x)) {
        ++n_ctx;
        for (int c = 0; c < ch; ++c) global_mean[c] += ctx.at(y, x, c);
      }
  for (int c = 0; c < ch; ++c) global_mean[c] /= static_cast<double>(n_ctx);

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask.at(y, x)) continue;
      double wsum = 0.0;
      std::vector<double> acc(ch, 0.0);
      for (int dy = -r; dy <= r; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= h) continue;
        for (int dx = -r; dx <= r; ++dx) {
          const int xx = x + dx;
          if (xx < 0 || xx >= w) continue;
          if (mask.at(yy, xx)) continue;
          const double d2 = static_cast<double>(dy) * dy + static_cast<double>(dx) * dx;
          if (d2 > r2) continue;
          const double wgt = 1.0 / d2;  // d2 > 0: masked center never reaches here
          wsum += wgt;
          for (int c = 0; c < ch; ++c) acc[c] += wgt * ctx.at(yy, xx, c);
        }
      }
      for (int c = 0; c < ch; ++c)
        target.at(y, x, c) = (wsum > 0.0) ? acc[c] / wsum : global_mean[c];
    }
  }
  return target;
}

NoiseTensor ContextPullDenoiser::predict(const Image& z_t, double t,
                                         const Condition& condition,
                                         bool conditional) const {
  const auto [alpha, sigma] = schedule_.alpha_sigma(t);
  NoiseTensor out(z_t.height, z_t.width, z_t.channels);

  if (!conditional) {
    // DC fill: per-channel mean of z_t / alpha, broadcast.
    std::vector<double> mean(z_t.channels, 0.0);
    const size_t n = static_cast<size_t>(z_t.height) * z_t.width;
    for (int y = 0; y < z_t.height; ++y)
      for (int x = 0; x < z_t.width; ++x)
        for (int c = 0; c < z_t.channels; ++c) mean[c] += z_t.at(y, x, c);
    for (int c = 0; c < z_t.channels; ++c) mean[c] /= (alpha * static_cast<double>(n));
    for (int y = 0; y < z_t.height; ++y)
      for (int x = 0; x < z_t.width; ++x)
        for (int c = 0; c < z_t.channels; ++c)
          out.at(y, x, c) = (z_t.at(y, x, c) - alpha * mean[c]) / sigma;
    return out;
  }

  if (condition.mask.height != z_t.height || condition.mask.width != z_t.width)
    throw std::invalid_argument("context-pull: condition/latent shape mismatch");
  const Image target = fill_target(condition);
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = (z_t.data[i] - alpha * target.data[i]) / sigma;
  return out;
}

namespace {

std::map<std::string, DenoiserFactory>& registry() {
  static std::map<std::string, DenoiserFactory> impl = {
      {"gaussian-oracle",
       [](const NoiseSchedule& s) {
         return std::make_shared<GaussianOracleDenoiser>(Image(), 1.0, s);
       }},
      {"context-pull",
       [](const NoiseSchedule& s) {
         return std::make_shared<ContextPullDenoiser>(s);
       }},
  };
  return impl;
}

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

void DenoiserRegistry::register_denoiser(const std::string& name,
                                         DenoiserFactory factory) {
  std::lock_guard<std::mutex> lock(registry_mutex());
  registry()[name] = std::move(factory);
}

std::shared_ptr<Denoiser> DenoiserRegistry::create(const std::string& name,
                                                   const NoiseSchedule& schedule) {
  std::lock_guard<std::mutex> lock(registry_mutex());
  auto it = registry().find(name);
  if (it == registry().end())
    throw std::invalid_argument("unknown denoiser: " + name);
  return it->second(schedule);
}

std::vector<std::string> DenoiserRegistry::names() {
  std::lock_guard<std::mutex> lock(registry_mutex());
  std::vector<std::string> out;
  for (const auto& [name, _] : registry()) out.push_back(name);
  return out;
}

}  // namespace ocld
