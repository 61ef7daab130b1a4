#include "ocld/griddle.hpp"

#include <numeric>

namespace ocld {

namespace {

void check_tile_shape(const Image& v, const GridLayout& layout, const char* what) {
  if (v.height != layout.tile_h || v.width != layout.tile_w ||
      v.channels != layout.tile_c)
    throw std::invalid_argument(std::string(what) + ": tile shape mismatch");
}

}  // namespace

Image to_grid(const std::vector<Latent>& latents, const GridLayout& layout) {
  layout.validate();
  if (static_cast<int>(latents.size()) != layout.capacity())
    throw std::invalid_argument("to_grid: latent count does not match layout");
  for (const Latent& l : latents) check_tile_shape(l.values, layout, "to_grid");

  Image canvas(layout.rows * layout.tile_h, layout.cols * layout.tile_w,
               layout.tile_c);
  for (int r = 0; r < layout.rows; ++r) {
    for (int c = 0; c < layout.cols; ++c) {
      const Image& tile = latents[r * layout.cols + c].values;
      for (int y = 0; y < layout.tile_h; ++y)
        for (int x = 0; x < layout.tile_w; ++x)
          for (int ch = 0; ch < layout.tile_c; ++ch)
            canvas.at(r * layout.tile_h + y, c * layout.tile_w + x, ch) =
                tile.at(y, x, ch);
    }
  }
  return canvas;
}

Condition to_grid_condition(const std::vector<Condition>& conditions,
                            const GridLayout& layout) {
  layout.validate();
  if (static_cast<int>(conditions.size()) != layout.capacity())
    throw std::invalid_argument("to_grid_condition: condition count mismatch");
  const std::string& tag = conditions[0].concept_tag;
  for (const Condition& c : conditions) {
    if (c.concept_tag != tag)
      throw std::invalid_argument("to_grid_condition: concept tags differ");
    if (c.mask.height != layout.tile_h || c.mask.width != layout.tile_w)
      throw std::invalid_argument("to_grid_condition: mask tile shape mismatch");
    check_tile_shape(c.context, layout, "to_grid_condition");
  }

  Mask mask(layout.rows * layout.tile_h, layout.cols * layout.tile_w);
  Image context(layout.rows * layout.tile_h, layout.cols * layout.tile_w,
                layout.tile_c);
  for (int r = 0; r < layout.rows; ++r) {
    for (int c = 0; c < layout.cols; ++c) {
      const Condition& cond = conditions[r * layout.cols + c];
      for (int y = 0; y < layout.tile_h; ++y) {
        for (int x = 0; x < layout.tile_w; ++x) {
          mask.set(r * layout.tile_h + y, c * layout.tile_w + x,
                   cond.mask.at(y, x));
          for (int ch = 0; ch < layout.tile_c; ++ch)
            context.at(r * layout.tile_h + y, c * layout.tile_w + x, ch) =
                cond.context.at(y, x, ch);
        }
      }
    }
  }
  return Condition(std::move(mask), std::move(context), tag);
}

std::vector<Image> from_grid(const Image& canvas, const GridLayout& layout) {
  layout.validate();
  if (canvas.height != layout.rows * layout.tile_h ||
      canvas.width != layout.cols * layout.tile_w ||
      canvas.channels != layout.tile_c)
    throw std::invalid_argument("from_grid: canvas shape not divisible by layout");

  std::vector<Image> tiles;
  tiles.reserve(layout.capacity());
  for (int r = 0; r < layout.rows; ++r) {
    for (int c = 0; c < layout.cols; ++c) {
      Image tile(layout.tile_h, layout.tile_w, layout.tile_c);
      for (int y = 0; y < layout.tile_h; ++y)
        for (int x = 0; x < layout.tile_w; ++x)
          for (int ch = 0; ch < layout.tile_c; ++ch)
            tile.at(y, x, ch) =
                canvas.at(r * layout.tile_h + y, c * layout.tile_w + x, ch);
      tiles.push_back(std::move(tile));
    }
  }
  return tiles;
}

std::vector<NoiseTensor> grid_predict(const Denoiser& denoiser,
                                      const std::vector<Latent>& latents,
                                      const std::vector<Condition>& conditions,
                                      double t, const GridLayout& layout,
                                      bool conditional) {
  if (latents.size() != conditions.size())
    throw std::invalid_argument("grid_predict: latent/condition count mismatch");
  const Image canvas = to_grid(latents, layout);
  const Condition cond = to_grid_condition(conditions, layout);
  const NoiseTensor pred = denoiser.predict(canvas, t, cond, conditional);
  if (!pred.same_shape(canvas))
    throw std::invalid_argument("grid_predict: denoiser changed the canvas shape");
  return from_grid(pred, layout);
}

std::vector<NoiseTensor> shuffled_grid_predict(
    const Denoiser& denoiser, const std::vector<Latent>& train_latents,
    const std::vector<Latent>& ref_latents,
    const std::vector<Condition>& pool_conditions, double t,
    const GridLayout& layout, int passes, Rng& rng, bool conditional) {
  layout.validate();
  if (passes < 1) throw std::invalid_argument("shuffled_grid_predict: passes must be >= 1");
  const int n_train = static_cast<int>(train_latents.size());
  const int pool_size = n_train + static_cast<int>(ref_latents.size());
  if (n_train < 1)
    throw std::invalid_argument("shuffled_grid_predict: no training latents");
  if (pool_conditions.size() != static_cast<size_t>(pool_size))
    throw std::invalid_argument("shuffled_grid_predict: condition count mismatch");
  const int cap = layout.capacity();
  if (pool_size < cap)
    throw std::invalid_argument("shuffled_grid_predict: pool too small for layout");

  auto pool_latent = [&](int id) -> const Latent& {
    return id < n_train ? train_latents[id] : ref_latents[id - n_train];
  };

  // Draw every assignment up front: passes are then order-independent.
  struct Slot {
    int anchor_cell;
    std::vector<int> cells;  // pool ids per grid cell
  };
  std::vector<std::vector<Slot>> plan(passes);
  std::vector<int> scratch(pool_size - 1);
  for (int m = 0; m < passes; ++m) {
    plan[m].resize(n_train);
    for (int a = 0; a < n_train; ++a) {
      Slot& slot = plan[m][a];
      slot.anchor_cell = static_cast<int>(rng.uniform_int(cap));
      int k = 0;
      for (int id = 0; id < pool_size; ++id)
        if (id != a) scratch[k++] = id;
      // Partial Fisher-Yates draw of cap - 1 companions.
      for (int i = 0; i < cap - 1; ++i) {
        const int j = i + static_cast<int>(rng.uniform_int(pool_size - 1 - i));
        std::swap(scratch[i], scratch[j]);
      }
      slot.cells.assign(cap, -1);
      slot.cells[slot.anchor_cell] = a;
      int next = 0;
      for (int cell = 0; cell < cap; ++cell)
        if (slot.cells[cell] < 0) slot.cells[cell] = scratch[next++];
    }
  }

  std::vector<NoiseTensor> sums(n_train);
  for (int m = 0; m < passes; ++m) {
    for (int a = 0; a < n_train; ++a) {
      const Slot& slot = plan[m][a];
      std::vector<Latent> grid_latents;
      std::vector<Condition> grid_conditions;
      grid_latents.reserve(cap);
      grid_conditions.reserve(cap);
      for (int id : slot.cells) {
        grid_latents.push_back(pool_latent(id));
        grid_conditions.push_back(pool_conditions[id]);
      }
      std::vector<NoiseTensor> preds = grid_predict(
          denoiser, grid_latents, grid_conditions, t, layout, conditional);
      NoiseTensor& anchor_pred = preds[slot.anchor_cell];
      if (sums[a].empty())
        sums[a] = std::move(anchor_pred);
      else
        for (size_t d = 0; d < sums[a].data.size(); ++d)
          sums[a].data[d] += anchor_pred.data[d];
    }
  }
  for (NoiseTensor& s : sums)
    for (double& v : s.data) v /= static_cast<double>(passes);
  return sums;
}

}  // namespace ocld
