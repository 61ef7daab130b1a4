#pragma once

#include <optional>

#include "ocld/core.hpp"

namespace ocld {

// 10 log10(1 / MSE) for images in [0, 1]; returns cap when MSE is zero.
double psnr(const Image& a, const Image& b, double cap = 99.0);

// Mean local SSIM: channel-mean grayscale, 8 x 8 uniform sliding window,
// C1 = 0.01^2, C2 = 0.03^2 on unit dynamic range.
double ssim(const Image& a, const Image& b);

// MSE restricted to mask-true pixels; 0 for an empty mask.
double masked_l2(const Image& a, const Image& b, const Mask& mask);

struct ViewMetrics {
  int view = 0;
  double psnr_full = 0.0;
  double ssim_full = 0.0;
  double l2_full = 0.0;
  // Mask-restricted variants; absent when the view has no mask.
  std::optional<double> psnr_masked;
  std::optional<double> ssim_masked;
  std::optional<double> l2_masked;
};

struct MetricReport {
  std::vector<ViewMetrics> per_view;
  uint64_t config_hash = 0;

  int view_count() const { return static_cast<int>(per_view.size()); }
  double mean_psnr_full() const;
  double mean_ssim_full() const;
  double mean_l2_full() const;
  // Means over views that carry masks; nullopt when none do.
  std::optional<double> mean_psnr_masked() const;
  std::optional<double> mean_ssim_masked() const;
  std::optional<double> mean_l2_masked() const;

  std::string to_json() const;
  static MetricReport from_json(const std::string& text);
  std::string to_table() const;
};

// Mask-restricted PSNR: 10 log10(1 / masked MSE), cap on zero error or an
// empty mask.
double psnr_masked(const Image& a, const Image& b, const Mask& mask,
                   double cap = 99.0);

// Mean local SSIM over windows that contain at least one masked pixel.
// Falls back to full SSIM for an empty mask.
double ssim_masked(const Image& a, const Image& b, const Mask& mask);

}  // namespace ocld
