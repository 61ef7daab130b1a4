#pragma once

#include <optional>

#include "ocld/field.hpp"

namespace ocld {

// One training observation: masked rgb-d plus camera pose.
struct MaskedView {
  Image rgb;    // H x W x 3 in [0, 1]
  Image depth;  // H x W x 1, distance along the unit ray
  Mask mask;    // true = region to inpaint
  Camera camera;

  void validate() const;
};

// Held-out view with object-free ground truth. The mask (footprint of the
// removed object) is optional on disk; the synthetic generator writes it so
// masked-region metrics can be evaluated.
struct TestView {
  Camera camera;
  Image rgb;
  Image depth;
  std::optional<Mask> mask;
};

struct SceneBundle {
  std::vector<MaskedView> train;
  std::vector<TestView> test;
  std::string tag;  // concept standing in for the text prompt
  Vec3 bbox_min{-1.0, -1.0, -1.0};
  Vec3 bbox_max{1.0, 1.0, 1.0};

  void validate() const;  // shape agreement, shared intrinsics, poses
};

// Directory layout:
//   manifest.json
//   train/0000.rgb.png  .depth.raw  .mask.png  .pose.json
//   test/0000.rgb.png   .depth.raw  [.mask.png]  .pose.json
SceneBundle load_scene(const std::string& directory);
void save_scene(const SceneBundle& bundle, const std::string& directory);

// Iterated binary dilation with an odd square structuring element.
Mask dilate_mask(const Mask& mask, int kernel_size = 3, int iterations = 3);

// Synthetic occluded-room generator. A closed diffuse box room with a
// distinctly colored wall patch, two prop boxes and one occluder box in
// front of the patch. Training views render with the occluder and mask its
// footprint; test views render without it. severity is the fraction of
// training cameras placed inside the occluder's shadow so the patch is
// fully hidden from them.
struct SynthSpec {
  int width = 32;
  int height = 32;
  int n_train = 60;
  int n_test = 40;
  double severity = 0.8;
  bool occluder = true;
  double fov_deg = 55.0;
  int dilate_kernel = 3;
  int dilate_iters = 3;
  std::string tag = "box-room";
};

SceneBundle synth_scene(const SynthSpec& spec, Rng& rng);

// Analytic ray cast against the generator's geometry; exposed for the
// visibility and depth-consistency checks. Returns hit distance (0 on miss),
// shaded color, and whether the first hit is the occluder.
struct SynthHit {
  double t = 0.0;
  Vec3 color = Vec3::Zero();
  bool hit = false;
  bool occluder = false;
};
SynthHit synth_cast_ray(const SynthSpec& spec, const Vec3& origin,
                        const Vec3& direction, bool with_occluder);

// Point-occupancy query against the same geometry.
bool synth_occupied(const Vec3& point, bool with_occluder);

// Geometry handles for tests: the occluded wall patch and the occluder box.
struct SynthGeometry {
  Vec3 patch_min, patch_max;
  Vec3 occluder_min, occluder_max;
};
SynthGeometry synth_geometry();

}  // namespace ocld
