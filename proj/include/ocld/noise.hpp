#pragma once

#include <memory>
#include <string>

#include "ocld/core.hpp"

namespace ocld {

// A pooled low-resolution encoding of a rendered view; the domain of kernels,
// noising and denoising.
struct Latent {
  Image values;  // H' x W' x C
  int view_id = -1;

  Latent() = default;
  explicit Latent(Image v, int id = -1) : values(std::move(v)), view_id(id) {}
};

using NoiseTensor = Image;

// Cosine variance-preserving schedule: alpha(t) = cos(pi t / 2),
// sigma(t) = sin(pi t / 2), so alpha^2 + sigma^2 = 1 identically.
struct NoiseSchedule {
  double t_min = 0.02;
  double t_max = 0.98;

  std::pair<double, double> alpha_sigma(double t) const {
    if (t < 0.0 || t > 1.0)
      throw std::invalid_argument("alpha_sigma: t outside [0, 1]");
    return {std::cos(M_PI * t / 2.0), std::sin(M_PI * t / 2.0)};
  }
};

// Forward process q(z_t | z): z_t = alpha_t z + sigma_t eps.
Latent add_noise(const Latent& z, const NoiseTensor& eps, double t,
                 const NoiseSchedule& schedule);

// Linear timestep schedule, decreasing from t_max at iter 0 to t_min at
// iter == max_iter.
double progressive_timestep(int iter, int max_iter, double t_min, double t_max);

// Classifier-free guidance: (1 - gamma) * eps_uncond + gamma * eps_cond.
// Exactly reproduces eps_uncond at gamma = 0 and eps_cond at gamma = 1.
NoiseTensor cfg_combine(const NoiseTensor& eps_uncond,
                        const NoiseTensor& eps_cond, double gamma);

// Inpainting condition in latent resolution. context must be exactly zero
// under the mask; the constructor enforces it.
struct Condition {
  Mask mask;            // true = region to inpaint
  Image context;        // latent of the masked view, zeros under mask
  std::string concept_tag;

  Condition() = default;
  Condition(Mask m, Image ctx, std::string tag);
};

// Pluggable noise predictor standing in for the diffusion prior.
// conditional = false must ignore the condition (used for CFG).
// Implementations must be deterministic given their inputs.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual NoiseTensor predict(const Image& z_t, double t,
                              const Condition& condition,
                              bool conditional) const = 0;
};

// Closed-form optimal denoiser for data ~ N(mean, s^2 I):
//   eps*(z_t, t) = sigma_t (z_t - alpha_t mean) / (alpha_t^2 s^2 + sigma_t^2)
// which equals -sigma_t grad log p_t(z_t) for the forward-process marginal.
// An empty mean image is treated as zero.
class GaussianOracleDenoiser : public Denoiser {
 public:
  GaussianOracleDenoiser(Image mean, double s, NoiseSchedule schedule);
  NoiseTensor predict(const Image& z_t, double t, const Condition& condition,
                      bool conditional) const override;

 private:
  Image mean_;
  double s_;
  NoiseSchedule schedule_;
};

NoiseTensor gaussian_oracle_predict(const Image& mean, double s,
                                    const Image& z_t, double t,
                                    const NoiseSchedule& schedule);

// Toy inpainting prior: the conditional branch pulls masked latent cells
// toward an inverse-squared-distance weighted fill of the unmasked context
// (cutoff radius in latent cells); outside the mask the target is the
// context itself, so eps_pred = (z_t - alpha_t context) / sigma_t there.
// The unconditional branch pulls toward a flat per-channel DC level
// inferred from z_t and ignores the condition entirely.
class ContextPullDenoiser : public Denoiser {
 public:
  explicit ContextPullDenoiser(NoiseSchedule schedule, double cutoff_radius = 8.0);
  NoiseTensor predict(const Image& z_t, double t, const Condition& condition,
                      bool conditional) const override;

  // The fill target zhat_0 for the conditional branch; exposed for tests.
  Image fill_target(const Condition& condition) const;

 private:
  NoiseSchedule schedule_;
  double cutoff_;
};

// Denoiser selection by name; third parties may register additional ones.
using DenoiserFactory =
    std::function<std::shared_ptr<Denoiser>(const NoiseSchedule&)>;

class DenoiserRegistry {
 public:
  static void register_denoiser(const std::string& name, DenoiserFactory factory);
  static std::shared_ptr<Denoiser> create(const std::string& name,
                                          const NoiseSchedule& schedule);
  static std::vector<std::string> names();
};

}  // namespace ocld
