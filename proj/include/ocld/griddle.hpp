#pragma once

#include "ocld/noise.hpp"

namespace ocld {

// Tiling of latents into a single canvas for joint denoising.
struct GridLayout {
  int rows = 2;
  int cols = 2;
  int tile_h = 0;
  int tile_w = 0;
  int tile_c = 0;

  int capacity() const { return rows * cols; }
  void validate() const {
    if (rows < 1 || cols < 1)
      throw std::invalid_argument("GridLayout: rows and cols must be >= 1");
    if (tile_h < 1 || tile_w < 1 || tile_c < 1)
      throw std::invalid_argument("GridLayout: tile shape must be positive");
  }
};

// Grid operator G: cell (r, c) of the canvas holds the latent at index
// r * cols + c. Requires exactly rows * cols latents of the tile shape.
Image to_grid(const std::vector<Latent>& latents, const GridLayout& layout);

// Grids masks and contexts with the same layout so the denoiser sees one
// coherent composite condition. Concept tags must agree.
Condition to_grid_condition(const std::vector<Condition>& conditions,
                            const GridLayout& layout);

// Inverse operator G^{-1}: splits a canvas back into row-major tiles.
std::vector<Image> from_grid(const Image& canvas, const GridLayout& layout);

// Grids latents and conditions, runs one denoiser call, ungrids the
// prediction. Output is aligned with the input order.
std::vector<NoiseTensor> grid_predict(const Denoiser& denoiser,
                                      const std::vector<Latent>& latents,
                                      const std::vector<Condition>& conditions,
                                      double t, const GridLayout& layout,
                                      bool conditional);

// M-pass shuffled grid denoising with an anchored assignment: every training
// view appears as the anchor of exactly M grids whose companions are drawn
// uniformly without replacement from (train + ref) minus the anchor.
// Returns the mean prediction per training view; companion and reference
// predictions are discarded. All assignments are drawn from the generator
// up front, so two calls with identically seeded generators produce the
// same grids (used to pair the conditional and unconditional CFG branches).
std::vector<NoiseTensor> shuffled_grid_predict(
    const Denoiser& denoiser, const std::vector<Latent>& train_latents,
    const std::vector<Latent>& ref_latents,
    const std::vector<Condition>& pool_conditions, double t,
    const GridLayout& layout, int passes, Rng& rng, bool conditional);

}  // namespace ocld
