#include <doctest.h>

#include "helpers.hpp"
#include "ocld/griddle.hpp"

using namespace ocld;
using namespace ocld::testing;

namespace {

GridLayout layout_for(int rows, int cols, int h, int w, int c) {
  GridLayout l;
  l.rows = rows;
  l.cols = cols;
  l.tile_h = h;
  l.tile_w = w;
  l.tile_c = c;
  return l;
}

Condition empty_condition(int h, int w, int c) {
  return Condition(Mask(h, w, false), Image(h, w, c), "scene");
}

// Denoiser whose output pixel depends only on the same input pixel;
// tiling must commute with it.
struct LocalDenoiser : Denoiser {
  NoiseTensor predict(const Image& z_t, double, const Condition&,
                      bool) const override {
    Image out = z_t;
    for (double& v : out.data) v = 2.0 * v + 1.0;
    return out;
  }
};

// Always returns the same constant.
struct ConstantDenoiser : Denoiser {
  double value;
  explicit ConstantDenoiser(double v) : value(v) {}
  NoiseTensor predict(const Image& z_t, double, const Condition&,
                      bool) const override {
    return Image(z_t.height, z_t.width, z_t.channels, value);
  }
};

// Test double returning the call index; exposes the averaging contract.
struct PassCountingDenoiser : Denoiser {
  mutable int calls = 0;
  NoiseTensor predict(const Image& z_t, double, const Condition&,
                      bool) const override {
    return Image(z_t.height, z_t.width, z_t.channels,
                 static_cast<double>(calls++));
  }
};

}  // namespace

TEST_CASE("to_grid with a 1x1 layout is the identity") {
  Rng rng(1);
  const Latent z = random_latent(rng, 3, 4, 2);
  const Image canvas = to_grid({z}, layout_for(1, 1, 3, 4, 2));
  CHECK(canvas.data == z.values.data);
}

TEST_CASE("to_grid places constant tiles into quadrants") {
  std::vector<Latent> tiles;
  for (int i = 0; i < 4; ++i) tiles.emplace_back(Image(2, 2, 1, double(i)), i);
  const Image canvas = to_grid(tiles, layout_for(2, 2, 2, 2, 1));
  CHECK(canvas.at(0, 0, 0) == 0.0);
  CHECK(canvas.at(0, 2, 0) == 1.0);
  CHECK(canvas.at(2, 0, 0) == 2.0);
  CHECK(canvas.at(2, 2, 0) == 3.0);
}

TEST_CASE("grid round trips are bit-exact over random layouts") {
  Rng rng(2);
  for (int rows = 1; rows <= 3; ++rows) {
    for (int cols = 1; cols <= 3; ++cols) {
      const int h = 1 + static_cast<int>(rng.uniform_int(4));
      const int w = 1 + static_cast<int>(rng.uniform_int(4));
      const int c = 1 + static_cast<int>(rng.uniform_int(3));
      const GridLayout layout = layout_for(rows, cols, h, w, c);
      std::vector<Latent> tiles;
      for (int i = 0; i < layout.capacity(); ++i)
        tiles.push_back(random_latent(rng, h, w, c, i));
      const Image canvas = to_grid(tiles, layout);
      const std::vector<Image> back = from_grid(canvas, layout);
      REQUIRE(back.size() == tiles.size());
      for (size_t i = 0; i < tiles.size(); ++i)
        CHECK(back[i].data == tiles[i].values.data);
      // And the other composition direction.
      std::vector<Latent> relabeled;
      for (const Image& img : back) relabeled.emplace_back(img, -1);
      CHECK(to_grid(relabeled, layout).data == canvas.data);
    }
  }
}

TEST_CASE("from_grid recovers hand-built blocks in row-major order") {
  const GridLayout layout = layout_for(2, 3, 2, 2, 1);
  Image canvas(4, 6, 1);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x)
          canvas.at(r * 2 + y, c * 2 + x, 0) = r * 3 + c;
  const std::vector<Image> tiles = from_grid(canvas, layout);
  for (int i = 0; i < 6; ++i)
    for (double v : tiles[i].data) CHECK(v == double(i));
}

TEST_CASE("grid operator errors") {
  Rng rng(3);
  const GridLayout layout = layout_for(2, 2, 2, 2, 1);
  std::vector<Latent> three;
  for (int i = 0; i < 3; ++i) three.push_back(random_latent(rng, 2, 2, 1, i));
  CHECK_THROWS_AS(to_grid(three, layout), std::invalid_argument);
  CHECK_THROWS_AS(from_grid(Image(5, 4, 1), layout), std::invalid_argument);
}

TEST_CASE("grid_predict with a 1x1 layout equals a direct call") {
  Rng rng(4);
  const Latent z = random_latent(rng, 3, 3, 2);
  const Condition cond = empty_condition(3, 3, 2);
  LocalDenoiser den;
  const auto preds = grid_predict(den, {z}, {cond}, 0.5, layout_for(1, 1, 3, 3, 2), true);
  const Image direct = den.predict(z.values, 0.5, cond, true);
  CHECK(preds[0].data == direct.data);
}

TEST_CASE("grid_predict commutes with a per-pixel-local denoiser") {
  Rng rng(5);
  const GridLayout layout = layout_for(2, 2, 3, 3, 2);
  std::vector<Latent> tiles;
  std::vector<Condition> conds;
  for (int i = 0; i < 4; ++i) {
    tiles.push_back(random_latent(rng, 3, 3, 2, i));
    conds.push_back(empty_condition(3, 3, 2));
  }
  LocalDenoiser den;
  const auto gridded = grid_predict(den, tiles, conds, 0.5, layout, true);
  for (int i = 0; i < 4; ++i) {
    const Image direct = den.predict(tiles[i].values, 0.5, conds[i], true);
    CHECK(max_abs_diff(gridded[i], direct) < 1e-12);
  }
}

TEST_CASE("grid_predict shares context across tiles for the inpainting prior") {
  // One tile is fully masked; its neighbors inside the canvas provide the
  // fill context, so the gridded prediction must differ from the
  // independent per-view call (which can only use the global-mean fill
  // fallback of its own empty context).
  NoiseSchedule sched;
  ContextPullDenoiser den(sched, 8.0);
  Rng rng(6);
  const GridLayout layout = layout_for(2, 2, 4, 4, 1);

  std::vector<Latent> tiles;
  std::vector<Condition> conds;
  // Tile 0: fully masked except one context pixel (an all-true mask would
  // be rejected on the independent call).
  Mask m0(4, 4, true);
  m0.set(0, 0, false);
  Image ctx0(4, 4, 1, 0.0);
  conds.push_back(Condition(m0, ctx0, "scene"));
  tiles.push_back(random_latent(rng, 4, 4, 1, 0));
  for (int i = 1; i < 4; ++i) {
    conds.push_back(Condition(Mask(4, 4, false), Image(4, 4, 1, 5.0), "scene"));
    tiles.push_back(random_latent(rng, 4, 4, 1, i));
  }

  const auto gridded = grid_predict(den, tiles, conds, 0.5, layout, true);
  const Image independent = den.predict(tiles[0].values, 0.5, conds[0], true);
  CHECK(max_abs_diff(gridded[0], independent) > 0.0);
}

TEST_CASE("shuffled_grid_predict is deterministic given the seed") {
  Rng rng(7);
  const GridLayout layout = layout_for(2, 2, 2, 2, 1);
  std::vector<Latent> train, ref;
  std::vector<Condition> conds;
  for (int i = 0; i < 3; ++i) {
    train.push_back(random_latent(rng, 2, 2, 1, i));
    conds.push_back(empty_condition(2, 2, 1));
  }
  for (int i = 0; i < 3; ++i) {
    ref.push_back(random_latent(rng, 2, 2, 1, 10 + i));
    conds.push_back(empty_condition(2, 2, 1));
  }
  LocalDenoiser den;
  Rng g1(99), g2(99);
  const auto a = shuffled_grid_predict(den, train, ref, conds, 0.5, layout, 1, g1, true);
  const auto b = shuffled_grid_predict(den, train, ref, conds, 0.5, layout, 1, g2, true);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].data == b[i].data);
}

TEST_CASE("shuffled_grid_predict with a constant denoiser is the constant") {
  Rng rng(8);
  const GridLayout layout = layout_for(2, 2, 2, 2, 1);
  std::vector<Latent> train, ref;
  std::vector<Condition> conds;
  for (int i = 0; i < 4; ++i) {
    train.push_back(random_latent(rng, 2, 2, 1, i));
    conds.push_back(empty_condition(2, 2, 1));
  }
  for (int i = 0; i < 2; ++i) {
    ref.push_back(random_latent(rng, 2, 2, 1, 10 + i));
    conds.push_back(empty_condition(2, 2, 1));
  }
  ConstantDenoiser den(0.125);
  Rng grng(1);
  const auto preds = shuffled_grid_predict(den, train, ref, conds, 0.5, layout, 3, grng, true);
  for (const Image& p : preds)
    for (double v : p.data) CHECK(v == 0.125);
}

TEST_CASE("shuffled_grid_predict equals the per-view oracle for local denoisers") {
  Rng rng(9);
  const GridLayout layout = layout_for(2, 2, 3, 3, 2);
  std::vector<Latent> train, ref;
  std::vector<Condition> conds;
  for (int i = 0; i < 5; ++i) {
    train.push_back(random_latent(rng, 3, 3, 2, i));
    conds.push_back(empty_condition(3, 3, 2));
  }
  for (int i = 0; i < 3; ++i) {
    ref.push_back(random_latent(rng, 3, 3, 2, 10 + i));
    conds.push_back(empty_condition(3, 3, 2));
  }
  LocalDenoiser den;
  for (int passes : {1, 4}) {
    Rng grng(passes);
    const auto preds =
        shuffled_grid_predict(den, train, ref, conds, 0.5, layout, passes, grng, true);
    for (size_t i = 0; i < train.size(); ++i) {
      const Image direct = den.predict(train[i].values, 0.5, conds[i], true);
      CHECK(max_abs_diff(preds[i], direct) < 1e-12);
    }
  }
}

TEST_CASE("shuffled_grid_predict averages exactly M per-pass predictions") {
  // The counting double returns call-index constants; with capacity 1x1
  // each anchor sees one call per pass, so the average over passes must be
  // the arithmetic mean of its own call indices.
  Rng rng(10);
  const GridLayout layout = layout_for(1, 1, 2, 2, 1);
  std::vector<Latent> train;
  std::vector<Condition> conds;
  const int n_train = 3, passes = 4;
  for (int i = 0; i < n_train; ++i) {
    train.push_back(random_latent(rng, 2, 2, 1, i));
    conds.push_back(empty_condition(2, 2, 1));
  }
  PassCountingDenoiser den;
  Rng grng(5);
  const auto preds =
      shuffled_grid_predict(den, train, {}, conds, 0.5, layout, passes, grng, true);
  // Calls happen pass-major, anchor-minor: anchor a gets calls
  // a, a + n, a + 2n, ... over M passes.
  for (int a = 0; a < n_train; ++a) {
    double expect = 0.0;
    for (int m = 0; m < passes; ++m) expect += a + m * n_train;
    expect /= passes;
    for (double v : preds[a].data) CHECK(v == doctest::Approx(expect).epsilon(1e-12));
  }
  CHECK(den.calls == n_train * passes);
}

TEST_CASE("shuffled_grid_predict rejects a pool smaller than the layout") {
  Rng rng(11);
  const GridLayout layout = layout_for(2, 2, 2, 2, 1);
  std::vector<Latent> train = {random_latent(rng, 2, 2, 1, 0)};
  std::vector<Condition> conds = {empty_condition(2, 2, 1)};
  LocalDenoiser den;
  Rng grng(1);
  CHECK_THROWS_AS(
      shuffled_grid_predict(den, train, {}, conds, 0.5, layout, 1, grng, true),
      std::invalid_argument);
}
