#pragma once

#include <Eigen/Dense>

#include "ocld/core.hpp"

namespace ocld {

using Vec3 = Eigen::Vector3d;

inline double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Dense voxel field of pre-activation (rgb, density) at grid nodes.
// Queries trilinearly interpolate pre-activations, then apply sigmoid to
// color and softplus to density. Outside the bbox both are exactly zero.
struct RadianceField {
  int res_x = 0, res_y = 0, res_z = 0;  // nodes per axis, each >= 2
  Vec3 bbox_min{-1.0, -1.0, -1.0};
  Vec3 bbox_max{1.0, 1.0, 1.0};
  std::vector<double> rgb;      // node-major (z, y, x), 3 values per node
  std::vector<double> density;  // one value per node

  RadianceField() = default;
  RadianceField(int rx, int ry, int rz, const Vec3& mn, const Vec3& mx,
                double rgb_init = 0.0, double density_init = -2.0);

  size_t node_count() const {
    return static_cast<size_t>(res_x) * res_y * res_z;
  }
  size_t node_index(int ix, int iy, int iz) const {
    return (static_cast<size_t>(iz) * res_y + iy) * res_x + ix;
  }
  void validate() const;
};

// Gradients w.r.t. the pre-activation grids, same layout as the field.
struct FieldGrads {
  std::vector<double> rgb;
  std::vector<double> density;

  FieldGrads() = default;
  explicit FieldGrads(const RadianceField& f)
      : rgb(f.node_count() * 3, 0.0), density(f.node_count(), 0.0) {}

  void add(const FieldGrads& o, double scale = 1.0);
  double squared_norm() const;
};

struct Camera {
  double fx = 0.0, fy = 0.0;  // focal lengths, pixels
  double cx = 0.0, cy = 0.0;  // principal point, pixels
  int width = 0, height = 0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();  // camera-to-world
  Vec3 position = Vec3::Zero();                            // center in world

  void validate() const;

  // Ray through pixel center (px + 0.5, py + 0.5), unit direction,
  // t bounds left as [0, 0] until clipped against a bbox.
  struct Ray pixel_ray(double px, double py) const;
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  double t_near = 0.0;
  double t_far = 0.0;
};

// Intersects the ray with the bbox and writes t bounds; false on a miss.
bool clip_ray_to_bbox(Ray& ray, const Vec3& bbox_min, const Vec3& bbox_max);

struct FieldSample {
  Vec3 color = Vec3::Zero();
  double density = 0.0;
};

// Total function: any point is valid; direction is accepted for interface
// compatibility but does not affect the Lambertian voxel model.
FieldSample query_field(const RadianceField& field, const Vec3& point,
                        const Vec3& direction);

struct RaySample {
  Vec3 color = Vec3::Zero();
  double depth = 0.0;
  double transmittance = 1.0;  // final transmittance past the far bound
};

// Stratified jittered quadrature of the volume rendering integral with
// alpha compositing. delta_k is the distance to the next sample (last one
// extends to t_far), so the expected discretization error is O(1/n).
// Throws if t_near >= t_far or n_samples < 2.
RaySample render_ray(const RadianceField& field, const Ray& ray, int n_samples,
                     uint64_t seed = 0);

// Per-sample quadrature data for one ray; inspection hook for tests.
struct RayDetail {
  std::vector<double> t;        // sample positions
  std::vector<double> weight;   // compositing weights T_k alpha_k
  std::vector<double> sigma;    // activated densities
  double trans_final = 1.0;
  Vec3 color = Vec3::Zero();
  double depth = 0.0;
};

RayDetail render_ray_detailed(const RadianceField& field, const Ray& ray,
                              int n_samples, uint64_t seed = 0);

struct RenderedView {
  Image rgb;      // H x W x 3
  Image depth;    // H x W x 1, expected termination distance, 0 when empty
  Image opacity;  // H x W x 1, 1 - final transmittance
};

// Per-pixel rays are seeded as derive_seed(seed, pixel_index), so the result
// is bit-identical for any thread count.
RenderedView render_view(const RadianceField& field, const Camera& camera,
                         int n_samples, uint64_t seed = 0, int n_threads = 1);

// Upstream gradients of a scalar loss w.r.t. the rendered rgb and depth.
struct PixelGrads {
  Image d_rgb;    // H x W x 3
  Image d_depth;  // H x W x 1
};

// Exact adjoint of render_view for the same seed. Pixels whose upstream
// entries are all zero are skipped (their contribution is exactly zero).
// Contributions are accumulated in pixel order regardless of thread count.
FieldGrads render_view_with_grad(const RadianceField& field,
                                 const Camera& camera, int n_samples,
                                 const PixelGrads& upstream, uint64_t seed = 0,
                                 int n_threads = 1);

struct NormalMap {
  Image normals;  // H x W x 3, unit where valid, zero elsewhere
  Mask valid;
};

// Back-projects the depth map as pinhole z-depth, takes central-difference
// tangents and normalizes their cross product, oriented to face the camera
// (n_z <= 0). Border pixels, pixels with a zero-depth neighbor and pixels
// with a zero-norm cross product are invalid.
NormalMap normal_from_depth(const Image& depth, const Camera& camera);

// Adjoint of normal_from_depth: maps upstream gradients w.r.t. the normal
// map (zero on invalid pixels) back to gradients w.r.t. the depth map.
Image normal_from_depth_backward(const Image& depth, const Camera& camera,
                                 const Image& d_normals);

}  // namespace ocld
