#include "ocld/field.hpp"

#include <algorithm>
#include <limits>

namespace ocld {

namespace {

constexpr double kWeightEps = 1e-12;  // depth normalization floor

struct Stencil {
  bool inside = false;
  int ix = 0, iy = 0, iz = 0;
  double fx = 0.0, fy = 0.0, fz = 0.0;
};

Stencil make_stencil(const RadianceField& f, const Vec3& p) {
  Stencil st;
  for (int a = 0; a < 3; ++a) {
    if (p[a] < f.bbox_min[a] || p[a] > f.bbox_max[a]) return st;
  }
  const int res[3] = {f.res_x, f.res_y, f.res_z};
  double g[3];
  int i0[3];
  for (int a = 0; a < 3; ++a) {
    const double u = (p[a] - f.bbox_min[a]) / (f.bbox_max[a] - f.bbox_min[a]);
    g[a] = u * (res[a] - 1);
    i0[a] = std::min(static_cast<int>(g[a]), res[a] - 2);
    if (i0[a] < 0) i0[a] = 0;
  }
  st.inside = true;
  st.ix = i0[0];
  st.iy = i0[1];
  st.iz = i0[2];
  st.fx = g[0] - i0[0];
  st.fy = g[1] - i0[1];
  st.fz = g[2] - i0[2];
  return st;
}

// Corner order: bit 0 -> x, bit 1 -> y, bit 2 -> z.
inline void stencil_weights(const Stencil& st, double w[8]) {
  const double mx = 1.0 - st.fx, my = 1.0 - st.fy, mz = 1.0 - st.fz;
  w[0] = mx * my * mz;
  w[1] = st.fx * my * mz;
  w[2] = mx * st.fy * mz;
  w[3] = st.fx * st.fy * mz;
  w[4] = mx * my * st.fz;
  w[5] = st.fx * my * st.fz;
  w[6] = mx * st.fy * st.fz;
  w[7] = st.fx * st.fy * st.fz;
}

inline void stencil_nodes(const RadianceField& f, const Stencil& st,
                          size_t idx[8]) {
  const size_t base = f.node_index(st.ix, st.iy, st.iz);
  const size_t sx = 1;
  const size_t sy = static_cast<size_t>(f.res_x);
  const size_t sz = static_cast<size_t>(f.res_x) * f.res_y;
  idx[0] = base;
  idx[1] = base + sx;
  idx[2] = base + sy;
  idx[3] = base + sy + sx;
  idx[4] = base + sz;
  idx[5] = base + sz + sx;
  idx[6] = base + sz + sy;
  idx[7] = base + sz + sy + sx;
}

struct SampleRec {
  double t = 0.0;
  double delta = 0.0;
  double sigma = 0.0;     // activated density
  double color[3] = {0.0, 0.0, 0.0};  // activated color
  double one_minus_alpha = 1.0;
  double trans = 1.0;  // transmittance before this sample
  double weight = 0.0;
  Stencil st;
};

struct RayResult {
  Vec3 color = Vec3::Zero();
  double depth = 0.0;
  double trans_final = 1.0;
  double weight_sum = 0.0;
  double weight_t_sum = 0.0;
};

// Stratified jitter stream for one ray.
inline double jitter(uint64_t& state) {
  state = splitmix64(state);
  return static_cast<double>(state >> 11) * 0x1.0p-53;
}

RayResult render_ray_core(const RadianceField& field, const Ray& ray,
                          int n_samples, uint64_t seed,
                          std::vector<SampleRec>* recs) {
  if (n_samples < 2) throw std::invalid_argument("render_ray: n_samples must be >= 2");
  if (!(ray.t_near < ray.t_far))
    throw std::invalid_argument("render_ray: requires t_near < t_far");

  const double bin = (ray.t_far - ray.t_near) / n_samples;
  uint64_t state = seed;

  RayResult out;
  double trans = 1.0;
  double prev_t = 0.0;
  if (recs) recs->resize(n_samples);

  // First pass: sample positions (deltas need the next position).
  // We stream with one-sample lookahead instead of a separate pass.
  double t_curr = ray.t_near + jitter(state) * bin;
  for (int k = 0; k < n_samples; ++k) {
    const double t_next = (k + 1 < n_samples)
                              ? ray.t_near + (k + 1 + jitter(state)) * bin
                              : ray.t_far;
    const double delta = t_next - t_curr;
    const Vec3 p = ray.origin + t_curr * ray.direction;
    const Stencil st = make_stencil(field, p);

    double sigma = 0.0;
    double col[3] = {0.0, 0.0, 0.0};
    if (st.inside) {
      double w[8];
      size_t idx[8];
      stencil_weights(st, w);
      stencil_nodes(field, st, idx);
      double pre_sigma = 0.0;
      double pre_rgb[3] = {0.0, 0.0, 0.0};
      for (int c = 0; c < 8; ++c) {
        pre_sigma += w[c] * field.density[idx[c]];
        const double* rgb = &field.rgb[idx[c] * 3];
        pre_rgb[0] += w[c] * rgb[0];
        pre_rgb[1] += w[c] * rgb[1];
        pre_rgb[2] += w[c] * rgb[2];
      }
      sigma = softplus(pre_sigma);
      col[0] = sigmoid(pre_rgb[0]);
      col[1] = sigmoid(pre_rgb[1]);
      col[2] = sigmoid(pre_rgb[2]);
    }

    const double one_minus_alpha = std::exp(-sigma * delta);
    const double trans_next = trans * one_minus_alpha;
    const double weight = trans - trans_next;  // == trans * alpha

    out.color[0] += weight * col[0];
    out.color[1] += weight * col[1];
    out.color[2] += weight * col[2];
    out.weight_sum += weight;
    out.weight_t_sum += weight * t_curr;

    if (recs) {
      SampleRec& r = (*recs)[k];
      r.t = t_curr;
      r.delta = delta;
      r.sigma = sigma;
      r.color[0] = col[0];
      r.color[1] = col[1];
      r.color[2] = col[2];
      r.one_minus_alpha = one_minus_alpha;
      r.trans = trans;
      r.weight = weight;
      r.st = st;
    }

    trans = trans_next;
    prev_t = t_curr;
    t_curr = t_next;
  }
  (void)prev_t;

  out.trans_final = trans;
  out.depth = out.weight_t_sum / std::max(out.weight_sum, kWeightEps);
  return out;
}

struct GradContrib {
  size_t node;
  double drgb[3];
  double ddensity;
};

void backward_ray(const RadianceField& field, const RayResult& res,
                  const std::vector<SampleRec>& recs, const double g_rgb[3],
                  double g_depth, std::vector<GradContrib>* out) {
  const double sw = res.weight_sum;
  const double m = std::max(sw, kWeightEps);
  const double depth = res.depth;

  // Suffix accumulation over dL/dw_j * w_j for j > k.
  double suffix = 0.0;
  for (int k = static_cast<int>(recs.size()) - 1; k >= 0; --k) {
    const SampleRec& r = recs[k];
    const double d_depth_dw = (sw > kWeightEps) ? (r.t - depth) / m : r.t / kWeightEps;
    const double a_k = g_rgb[0] * r.color[0] + g_rgb[1] * r.color[1] +
                       g_rgb[2] * r.color[2] + g_depth * d_depth_dw;
    const double denom = std::max(r.one_minus_alpha, 1e-300);
    const double d_alpha = a_k * r.trans - suffix / denom;
    suffix += a_k * r.weight;

    if (!r.st.inside) continue;

    const double d_sigma = d_alpha * r.delta * r.one_minus_alpha;
    const double d_pre_sigma = d_sigma * (1.0 - std::exp(-r.sigma));  // softplus'
    double d_pre_rgb[3];
    for (int c = 0; c < 3; ++c) {
      const double dc = g_rgb[c] * r.weight;
      d_pre_rgb[c] = dc * r.color[c] * (1.0 - r.color[c]);  // sigmoid'
    }

    if (d_pre_sigma == 0.0 && d_pre_rgb[0] == 0.0 && d_pre_rgb[1] == 0.0 &&
        d_pre_rgb[2] == 0.0)
      continue;

    double w[8];
    size_t idx[8];
    stencil_weights(r.st, w);
    stencil_nodes(field, r.st, idx);
    for (int c = 0; c < 8; ++c) {
      GradContrib g;
      g.node = idx[c];
      g.drgb[0] = w[c] * d_pre_rgb[0];
      g.drgb[1] = w[c] * d_pre_rgb[1];
      g.drgb[2] = w[c] * d_pre_rgb[2];
      g.ddensity = w[c] * d_pre_sigma;
      out->push_back(g);
    }
  }
}

}  // namespace

RadianceField::RadianceField(int rx, int ry, int rz, const Vec3& mn,
                             const Vec3& mx, double rgb_init,
                             double density_init)
    : res_x(rx), res_y(ry), res_z(rz), bbox_min(mn), bbox_max(mx) {
  validate();
  rgb.assign(node_count() * 3, rgb_init);
  density.assign(node_count(), density_init);
}

void RadianceField::validate() const {
  if (res_x < 2 || res_y < 2 || res_z < 2)
    throw std::invalid_argument("RadianceField: resolution must be >= 2 per axis");
  for (int a = 0; a < 3; ++a)
    if (!(bbox_min[a] < bbox_max[a]))
      throw std::invalid_argument("RadianceField: bbox_min must be < bbox_max");
}

void FieldGrads::add(const FieldGrads& o, double scale) {
  if (rgb.size() != o.rgb.size() || density.size() != o.density.size())
    throw std::invalid_argument("FieldGrads::add: shape mismatch");
  for (size_t i = 0; i < rgb.size(); ++i) rgb[i] += scale * o.rgb[i];
  for (size_t i = 0; i < density.size(); ++i) density[i] += scale * o.density[i];
}

double FieldGrads::squared_norm() const {
  double s = 0.0;
  for (double v : rgb) s += v * v;
  for (double v : density) s += v * v;
  return s;
}

void Camera::validate() const {
  if (fx <= 0.0 || fy <= 0.0)
    throw std::invalid_argument("Camera: focal lengths must be positive");
  if (width <= 0 || height <= 0)
    throw std::invalid_argument("Camera: image size must be positive");
  const Eigen::Matrix3d err =
      rotation.transpose() * rotation - Eigen::Matrix3d::Identity();
  if (err.norm() >= 1e-6)
    throw std::invalid_argument("Camera: rotation is not orthonormal");
}

Ray Camera::pixel_ray(double px, double py) const {
  const Vec3 dir_cam((px + 0.5 - cx) / fx, (py + 0.5 - cy) / fy, 1.0);
  Ray ray;
  ray.origin = position;
  ray.direction = (rotation * dir_cam).normalized();
  return ray;
}

bool clip_ray_to_bbox(Ray& ray, const Vec3& bbox_min, const Vec3& bbox_max) {
  double tmin = 0.0;
  double tmax = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double d = ray.direction[a];
    if (std::abs(d) < 1e-15) {
      if (ray.origin[a] < bbox_min[a] || ray.origin[a] > bbox_max[a]) return false;
      continue;
    }
    double t0 = (bbox_min[a] - ray.origin[a]) / d;
    double t1 = (bbox_max[a] - ray.origin[a]) / d;
    if (t0 > t1) std::swap(t0, t1);
    tmin = std::max(tmin, t0);
    tmax = std::min(tmax, t1);
  }
  if (!(tmax > tmin + 1e-12)) return false;
  ray.t_near = tmin;
  ray.t_far = tmax;
  return true;
}

FieldSample query_field(const RadianceField& field, const Vec3& point,
                        const Vec3& direction) {
  (void)direction;  // Lambertian model
  FieldSample out;
  const Stencil st = make_stencil(field, point);
  if (!st.inside) return out;
  double w[8];
  size_t idx[8];
  stencil_weights(st, w);
  stencil_nodes(field, st, idx);
  double pre_sigma = 0.0;
  double pre_rgb[3] = {0.0, 0.0, 0.0};
  for (int c = 0; c < 8; ++c) {
    pre_sigma += w[c] * field.density[idx[c]];
    const double* rgb = &field.rgb[idx[c] * 3];
    pre_rgb[0] += w[c] * rgb[0];
    pre_rgb[1] += w[c] * rgb[1];
    pre_rgb[2] += w[c] * rgb[2];
  }
  out.density = softplus(pre_sigma);
  out.color = Vec3(sigmoid(pre_rgb[0]), sigmoid(pre_rgb[1]), sigmoid(pre_rgb[2]));
  return out;
}

RaySample render_ray(const RadianceField& field, const Ray& ray, int n_samples,
                     uint64_t seed) {
  const RayResult res = render_ray_core(field, ray, n_samples, seed, nullptr);
  RaySample out;
  out.color = res.color;
  out.depth = res.depth;
  out.transmittance = res.trans_final;
  return out;
}

RayDetail render_ray_detailed(const RadianceField& field, const Ray& ray,
                              int n_samples, uint64_t seed) {
  std::vector<SampleRec> recs;
  const RayResult res = render_ray_core(field, ray, n_samples, seed, &recs);
  RayDetail out;
  out.trans_final = res.trans_final;
  out.color = res.color;
  out.depth = res.depth;
  for (const SampleRec& r : recs) {
    out.t.push_back(r.t);
    out.weight.push_back(r.weight);
    out.sigma.push_back(r.sigma);
  }
  return out;
}

RenderedView render_view(const RadianceField& field, const Camera& camera,
                         int n_samples, uint64_t seed, int n_threads) {
  camera.validate();
  RenderedView view;
  view.rgb = Image(camera.height, camera.width, 3);
  view.depth = Image(camera.height, camera.width, 1);
  view.opacity = Image(camera.height, camera.width, 1);
  const int n_pixels = camera.width * camera.height;

  parallel_for_ranges(n_pixels, n_threads, [&](int lo, int hi) {
    for (int p = lo; p < hi; ++p) {
      const int y = p / camera.width;
      const int x = p % camera.width;
      Ray ray = camera.pixel_ray(x, y);
      if (!clip_ray_to_bbox(ray, field.bbox_min, field.bbox_max)) continue;
      const RayResult res =
          render_ray_core(field, ray, n_samples, derive_seed(seed, p), nullptr);
      view.rgb.at(y, x, 0) = res.color[0];
      view.rgb.at(y, x, 1) = res.color[1];
      view.rgb.at(y, x, 2) = res.color[2];
      view.depth.at(y, x, 0) = res.depth;
      view.opacity.at(y, x, 0) = 1.0 - res.trans_final;
    }
  });
  return view;
}

FieldGrads render_view_with_grad(const RadianceField& field,
                                 const Camera& camera, int n_samples,
                                 const PixelGrads& upstream, uint64_t seed,
                                 int n_threads) {
  camera.validate();
  if (upstream.d_rgb.height != camera.height ||
      upstream.d_rgb.width != camera.width || upstream.d_rgb.channels != 3)
    throw std::invalid_argument("render_view_with_grad: d_rgb shape mismatch");
  if (upstream.d_depth.height != camera.height ||
      upstream.d_depth.width != camera.width || upstream.d_depth.channels != 1)
    throw std::invalid_argument("render_view_with_grad: d_depth shape mismatch");

  // Pixels with all-zero upstream contribute exactly zero; skip them.
  std::vector<int> active;
  for (int p = 0; p < camera.width * camera.height; ++p) {
    const int y = p / camera.width;
    const int x = p % camera.width;
    if (upstream.d_rgb.at(y, x, 0) != 0.0 || upstream.d_rgb.at(y, x, 1) != 0.0 ||
        upstream.d_rgb.at(y, x, 2) != 0.0 || upstream.d_depth.at(y, x, 0) != 0.0)
      active.push_back(p);
  }

  std::vector<std::vector<GradContrib>> contribs(active.size());
  parallel_for_ranges(static_cast<int>(active.size()), n_threads,
                      [&](int lo, int hi) {
    std::vector<SampleRec> recs;
    for (int i = lo; i < hi; ++i) {
      const int p = active[i];
      const int y = p / camera.width;
      const int x = p % camera.width;
      Ray ray = camera.pixel_ray(x, y);
      if (!clip_ray_to_bbox(ray, field.bbox_min, field.bbox_max)) continue;
      const RayResult res =
          render_ray_core(field, ray, n_samples, derive_seed(seed, p), &recs);
      const double g_rgb[3] = {upstream.d_rgb.at(y, x, 0),
                               upstream.d_rgb.at(y, x, 1),
                               upstream.d_rgb.at(y, x, 2)};
      backward_ray(field, res, recs, g_rgb, upstream.d_depth.at(y, x, 0),
                   &contribs[i]);
    }
  });

  // Serial pixel-order reduction keeps the result independent of threading.
  FieldGrads grads(field);
  for (const auto& list : contribs) {
    for (const GradContrib& g : list) {
      grads.rgb[g.node * 3 + 0] += g.drgb[0];
      grads.rgb[g.node * 3 + 1] += g.drgb[1];
      grads.rgb[g.node * 3 + 2] += g.drgb[2];
      grads.density[g.node] += g.ddensity;
    }
  }
  return grads;
}

NormalMap normal_from_depth(const Image& depth, const Camera& camera) {
  if (depth.channels != 1)
    throw std::invalid_argument("normal_from_depth: depth must be H x W x 1");
  if (depth.height != camera.height || depth.width != camera.width)
    throw std::invalid_argument("normal_from_depth: depth/camera size mismatch");
  const int h = depth.height, w = depth.width;
  NormalMap nm;
  nm.normals = Image(h, w, 3);
  nm.valid = Mask(h, w, false);

  auto point = [&](int y, int x) -> Vec3 {
    const double d = depth.at(y, x, 0);
    return Vec3(d * (x + 0.5 - camera.cx) / camera.fx,
                d * (y + 0.5 - camera.cy) / camera.fy, d);
  };

  for (int y = 1; y + 1 < h; ++y) {
    for (int x = 1; x + 1 < w; ++x) {
      if (depth.at(y, x - 1, 0) <= 0.0 || depth.at(y, x + 1, 0) <= 0.0 ||
          depth.at(y - 1, x, 0) <= 0.0 || depth.at(y + 1, x, 0) <= 0.0)
        continue;
      const Vec3 tx = point(y, x + 1) - point(y, x - 1);
      const Vec3 ty = point(y + 1, x) - point(y - 1, x);
      const Vec3 u = tx.cross(ty);
      const double n2 = u.squaredNorm();
      if (n2 < 1e-300) continue;
      Vec3 n = u / std::sqrt(n2);
      if (n.z() > 0.0) n = -n;
      nm.normals.at(y, x, 0) = n.x();
      nm.normals.at(y, x, 1) = n.y();
      nm.normals.at(y, x, 2) = n.z();
      nm.valid.set(y, x, true);
    }
  }
  return nm;
}

Image normal_from_depth_backward(const Image& depth, const Camera& camera,
                                 const Image& d_normals) {
  if (d_normals.height != depth.height || d_normals.width != depth.width ||
      d_normals.channels != 3)
    throw std::invalid_argument("normal_from_depth_backward: upstream shape mismatch");
  const int h = depth.height, w = depth.width;
  Image d_point(h, w, 3);  // gradient w.r.t. the back-projected points
  Image d_depth(h, w, 1);

  auto point = [&](int y, int x) -> Vec3 {
    const double d = depth.at(y, x, 0);
    return Vec3(d * (x + 0.5 - camera.cx) / camera.fx,
                d * (y + 0.5 - camera.cy) / camera.fy, d);
  };

  for (int y = 1; y + 1 < h; ++y) {
    for (int x = 1; x + 1 < w; ++x) {
      if (depth.at(y, x - 1, 0) <= 0.0 || depth.at(y, x + 1, 0) <= 0.0 ||
          depth.at(y - 1, x, 0) <= 0.0 || depth.at(y + 1, x, 0) <= 0.0)
        continue;
      const Vec3 g(d_normals.at(y, x, 0), d_normals.at(y, x, 1),
                   d_normals.at(y, x, 2));
      if (g.isZero(0.0)) continue;
      const Vec3 tx = point(y, x + 1) - point(y, x - 1);
      const Vec3 ty = point(y + 1, x) - point(y - 1, x);
      const Vec3 u = tx.cross(ty);
      const double n2 = u.squaredNorm();
      if (n2 < 1e-300) continue;
      const double len = std::sqrt(n2);
      const Vec3 uhat = u / len;
      const double sign = (uhat.z() > 0.0) ? -1.0 : 1.0;
      const Vec3 d_u = sign * (g - uhat * uhat.dot(g)) / len;
      const Vec3 d_tx = ty.cross(d_u);
      const Vec3 d_ty = d_u.cross(tx);
      for (int c = 0; c < 3; ++c) {
        d_point.at(y, x + 1, c) += d_tx[c];
        d_point.at(y, x - 1, c) -= d_tx[c];
        d_point.at(y + 1, x, c) += d_ty[c];
        d_point.at(y - 1, x, c) -= d_ty[c];
      }
    }
  }

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Vec3 v((x + 0.5 - camera.cx) / camera.fx,
                   (y + 0.5 - camera.cy) / camera.fy, 1.0);
      d_depth.at(y, x, 0) = d_point.at(y, x, 0) * v.x() +
                            d_point.at(y, x, 1) * v.y() + d_point.at(y, x, 2);
    }
  }
  return d_depth;
}

}  // namespace ocld
