#include "ocld/scenes.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "ocld/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ocld {

void MaskedView::validate() const {
  if (rgb.channels != 3 || depth.channels != 1)
    throw std::runtime_error("scene shape mismatch: rgb must be HxWx3, depth HxWx1");
  if (rgb.height != depth.height || rgb.width != depth.width ||
      rgb.height != mask.height || rgb.width != mask.width)
    throw std::runtime_error("scene shape mismatch: rgb/depth/mask sizes differ");
  if (camera.width != rgb.width || camera.height != rgb.height)
    throw std::runtime_error("scene shape mismatch: camera size differs from images");
  camera.validate();
  for (double d : depth.data)
    if (d < 0.0) throw std::runtime_error("scene invariant: negative depth");
}

void SceneBundle::validate() const {
  if (train.empty()) throw std::runtime_error("scene has no training views");
  for (const MaskedView& v : train) v.validate();
  const Camera& ref = train[0].camera;
  auto same_intrinsics = [&](const Camera& c) {
    return c.fx == ref.fx && c.fy == ref.fy && c.cx == ref.cx &&
           c.cy == ref.cy && c.width == ref.width && c.height == ref.height;
  };
  for (const MaskedView& v : train)
    if (!same_intrinsics(v.camera))
      throw std::runtime_error("scene invariant: cameras must share intrinsics");
  for (const TestView& v : test) {
    v.camera.validate();
    if (!same_intrinsics(v.camera))
      throw std::runtime_error("scene invariant: cameras must share intrinsics");
    if (v.rgb.channels != 3 || v.depth.channels != 1 ||
        v.rgb.height != v.depth.height || v.rgb.width != v.depth.width ||
        v.camera.width != v.rgb.width || v.camera.height != v.rgb.height)
      throw std::runtime_error("scene shape mismatch in test view");
    if (v.mask && (v.mask->height != v.rgb.height || v.mask->width != v.rgb.width))
      throw std::runtime_error("scene shape mismatch: test mask size differs");
  }
  for (int a = 0; a < 3; ++a)
    if (!(bbox_min[a] < bbox_max[a]))
      throw std::runtime_error("scene invariant: bad bbox");
}

namespace {

json pose_to_json(const Camera& c) {
  std::vector<double> m(16, 0.0);
  for (int r = 0; r < 3; ++r) {
    for (int col = 0; col < 3; ++col) m[r * 4 + col] = c.rotation(r, col);
    m[r * 4 + 3] = c.position[r];
  }
  m[15] = 1.0;
  return json{{"fx", c.fx},         {"fy", c.fy},     {"cx", c.cx},
              {"cy", c.cy},         {"width", c.width}, {"height", c.height},
              {"world_from_cam", m}};
}

Camera pose_from_json(const json& j, const std::string& path) {
  Camera c;
  try {
    c.fx = j.at("fx").get<double>();
    c.fy = j.at("fy").get<double>();
    c.cx = j.at("cx").get<double>();
    c.cy = j.at("cy").get<double>();
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
    const auto m = j.at("world_from_cam").get<std::vector<double>>();
    if (m.size() != 16) throw std::runtime_error("pose matrix must have 16 entries");
    for (int r = 0; r < 3; ++r) {
      for (int col = 0; col < 3; ++col) c.rotation(r, col) = m[r * 4 + col];
      c.position[r] = m[r * 4 + 3];
    }
  } catch (const json::exception& e) {
    throw std::runtime_error("bad pose file " + path + ": " + e.what());
  }
  c.validate();
  return c;
}

json load_json_file(const std::string& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(std::string(what) + ": " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("cannot parse " + path + ": " + e.what());
  }
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::string view_stem(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d", index);
  return buf;
}

}  // namespace

void save_scene(const SceneBundle& bundle, const std::string& directory) {
  bundle.validate();  // reject before any write
  fs::create_directories(fs::path(directory) / "train");
  fs::create_directories(fs::path(directory) / "test");

  json manifest;
  manifest["format_version"] = 1;
  manifest["scene_tag"] = bundle.tag;
  manifest["bbox_min"] = {bundle.bbox_min[0], bundle.bbox_min[1], bundle.bbox_min[2]};
  manifest["bbox_max"] = {bundle.bbox_max[0], bundle.bbox_max[1], bundle.bbox_max[2]};

  json train_entries = json::array();
  for (size_t i = 0; i < bundle.train.size(); ++i) {
    const MaskedView& v = bundle.train[i];
    const std::string stem = "train/" + view_stem(static_cast<int>(i));
    save_png_rgb((fs::path(directory) / (stem + ".rgb.png")).string(), v.rgb);
    save_depth_raw((fs::path(directory) / (stem + ".depth.raw")).string(), v.depth);
    save_png_mask((fs::path(directory) / (stem + ".mask.png")).string(), v.mask);
    write_text_file((fs::path(directory) / (stem + ".pose.json")).string(),
                    pose_to_json(v.camera).dump(2) + "\n");
    train_entries.push_back({{"rgb", stem + ".rgb.png"},
                             {"depth", stem + ".depth.raw"},
                             {"mask", stem + ".mask.png"},
                             {"pose", stem + ".pose.json"}});
  }
  manifest["train"] = train_entries;

  json test_entries = json::array();
  for (size_t i = 0; i < bundle.test.size(); ++i) {
    const TestView& v = bundle.test[i];
    const std::string stem = "test/" + view_stem(static_cast<int>(i));
    save_png_rgb((fs::path(directory) / (stem + ".rgb.png")).string(), v.rgb);
    save_depth_raw((fs::path(directory) / (stem + ".depth.raw")).string(), v.depth);
    write_text_file((fs::path(directory) / (stem + ".pose.json")).string(),
                    pose_to_json(v.camera).dump(2) + "\n");
    json entry = {{"rgb", stem + ".rgb.png"},
                  {"depth", stem + ".depth.raw"},
                  {"pose", stem + ".pose.json"}};
    if (v.mask) {
      save_png_mask((fs::path(directory) / (stem + ".mask.png")).string(), *v.mask);
      entry["mask"] = stem + ".mask.png";
    }
    test_entries.push_back(entry);
  }
  manifest["test"] = test_entries;

  write_text_file((fs::path(directory) / "manifest.json").string(),
                  manifest.dump(2) + "\n");
}

SceneBundle load_scene(const std::string& directory) {
  const fs::path manifest_path = fs::path(directory) / "manifest.json";
  if (!fs::exists(manifest_path))
    throw std::runtime_error("no manifest in " + directory);
  const json manifest = load_json_file(manifest_path.string(), "no manifest");

  SceneBundle bundle;
  try {
    if (manifest.at("format_version").get<int>() != 1)
      throw std::runtime_error("unsupported scene format version");
    bundle.tag = manifest.at("scene_tag").get<std::string>();
    for (int a = 0; a < 3; ++a) {
      bundle.bbox_min[a] = manifest.at("bbox_min").at(a).get<double>();
      bundle.bbox_max[a] = manifest.at("bbox_max").at(a).get<double>();
    }
  } catch (const json::exception& e) {
    throw std::runtime_error("bad manifest: " + std::string(e.what()));
  }

  auto asset_path = [&](const json& entry, const char* key) {
    return (fs::path(directory) / entry.at(key).get<std::string>()).string();
  };
  auto require_asset = [&](const std::string& path) {
    if (!fs::exists(path)) throw std::runtime_error("missing asset: " + path);
    return path;
  };

  try {
    for (const json& entry : manifest.at("train")) {
      MaskedView v;
      v.rgb = load_png_rgb(require_asset(asset_path(entry, "rgb")));
      v.depth = load_depth_raw(require_asset(asset_path(entry, "depth")));
      v.mask = load_png_mask(require_asset(asset_path(entry, "mask")));
      const std::string pose_path = require_asset(asset_path(entry, "pose"));
      v.camera = pose_from_json(load_json_file(pose_path, "missing asset"), pose_path);
      bundle.train.push_back(std::move(v));
    }
    for (const json& entry : manifest.at("test")) {
      TestView v;
      v.rgb = load_png_rgb(require_asset(asset_path(entry, "rgb")));
      v.depth = load_depth_raw(require_asset(asset_path(entry, "depth")));
      const std::string pose_path = require_asset(asset_path(entry, "pose"));
      v.camera = pose_from_json(load_json_file(pose_path, "missing asset"), pose_path);
      if (entry.contains("mask"))
        v.mask = load_png_mask(require_asset(asset_path(entry, "mask")));
      bundle.test.push_back(std::move(v));
    }
  } catch (const json::exception& e) {
    throw std::runtime_error("bad manifest entry: " + std::string(e.what()));
  }

  bundle.validate();
  return bundle;
}

Mask dilate_mask(const Mask& mask, int kernel_size, int iterations) {
  if (kernel_size < 1 || kernel_size % 2 == 0)
    throw std::invalid_argument("dilate_mask: kernel size must be odd");
  const int r = kernel_size / 2;
  Mask current = mask;
  for (int it = 0; it < iterations; ++it) {
    Mask next(mask.height, mask.width);
    for (int y = 0; y < mask.height; ++y) {
      for (int x = 0; x < mask.width; ++x) {
        bool v = false;
        for (int dy = -r; dy <= r && !v; ++dy) {
          const int yy = y + dy;
          if (yy < 0 || yy >= mask.height) continue;
          for (int dx = -r; dx <= r; ++dx) {
            const int xx = x + dx;
            if (xx < 0 || xx >= mask.width) continue;
            if (current.at(yy, xx)) {
              v = true;
              break;
            }
          }
        }
        next.set(y, x, v);
      }
    }
    current = std::move(next);
  }
  return current;
}

// --- synthetic generator -------------------------------------------------

namespace {

struct Box {
  Vec3 mn, mx;
  Vec3 albedo;
  bool is_occluder = false;
};

// All face coordinates are multiples of 0.05 so they land exactly on the
// nodes of a 41^3 grid over [-1, 1]^3. The shell boxes start at z = 0.1 so
// cameras with wide lateral offsets keep a clear line into the room.
const std::vector<Box>& scene_boxes() {
  static const std::vector<Box> boxes = {
      {{-1.0, -1.0, 0.85}, {1.0, 1.0, 1.0}, {0.72, 0.70, 0.66}},     // back wall
      {{-1.0, -1.0, 0.10}, {1.0, -0.85, 1.0}, {0.45, 0.32, 0.20}},   // floor
      {{-1.0, 0.85, 0.10}, {1.0, 1.0, 1.0}, {0.78, 0.78, 0.84}},     // ceiling
      {{-1.0, -1.0, 0.10}, {-0.85, 1.0, 1.0}, {0.30, 0.45, 0.50}},   // left wall
      {{0.85, -1.0, 0.10}, {1.0, 1.0, 1.0}, {0.52, 0.30, 0.30}},     // right wall
      {{-0.20, -0.20, 0.80}, {0.20, 0.20, 0.85}, {0.90, 0.45, 0.10}},  // patch
      {{-0.70, -0.85, 0.50}, {-0.45, -0.50, 0.80}, {0.20, 0.60, 0.25}},  // prop A
      {{0.40, -0.85, 0.35}, {0.65, -0.60, 0.60}, {0.20, 0.35, 0.70}},   // prop B
      {{-0.25, -0.25, 0.45}, {0.25, 0.25, 0.60}, {0.55, 0.20, 0.60}, true},  // occluder
  };
  return boxes;
}

const Vec3 kLightDir = Vec3(-0.35, 0.80, -0.48).normalized();
const Vec3 kPatchCenter(0.0, 0.0, 0.80);

bool intersect_box(const Box& box, const Vec3& o, const Vec3& d, double* t_hit,
                   Vec3* normal) {
  double tmin = 1e-9;
  double tmax = std::numeric_limits<double>::infinity();
  int axis = -1;
  double axis_sign = 0.0;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < box.mn[a] || o[a] > box.mx[a]) return false;
      continue;
    }
    double t0 = (box.mn[a] - o[a]) / d[a];
    double t1 = (box.mx[a] - o[a]) / d[a];
    double sign = -1.0;
    if (t0 > t1) {
      std::swap(t0, t1);
      sign = 1.0;
    }
    if (t0 > tmin) {
      tmin = t0;
      axis = a;
      axis_sign = sign;
    }
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return false;
  }
  if (axis < 0) return false;  // origin inside; not used by the generator
  *t_hit = tmin;
  *normal = Vec3::Zero();
  (*normal)[axis] = axis_sign;
  return true;
}

Camera make_camera(const SynthSpec& spec, const Vec3& position) {
  Camera cam;
  cam.width = spec.width;
  cam.height = spec.height;
  cam.fx = cam.fy = (spec.width / 2.0) / std::tan(spec.fov_deg * M_PI / 360.0);
  cam.cx = spec.width / 2.0;
  cam.cy = spec.height / 2.0;
  cam.position = position;
  const Vec3 forward = (kPatchCenter - position).normalized();
  const Vec3 up(0.0, 1.0, 0.0);
  Vec3 right = up.cross(forward);
  if (right.norm() < 1e-9) right = Vec3(1.0, 0.0, 0.0);
  right.normalize();
  const Vec3 cam_y = forward.cross(right);
  cam.rotation.col(0) = right;
  cam.rotation.col(1) = cam_y;
  cam.rotation.col(2) = forward;
  return cam;
}

struct SynthRender {
  Image rgb;
  Image depth;
  Mask occluder_mask;
};

SynthRender render_analytic(const SynthSpec& spec, const Camera& cam,
                            bool with_occluder) {
  SynthRender out;
  out.rgb = Image(cam.height, cam.width, 3);
  out.depth = Image(cam.height, cam.width, 1);
  out.occluder_mask = Mask(cam.height, cam.width);
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      const Ray ray = cam.pixel_ray(x, y);
      const SynthHit hit = synth_cast_ray(spec, ray.origin, ray.direction, with_occluder);
      if (!hit.hit) continue;
      out.rgb.at(y, x, 0) = hit.color[0];
      out.rgb.at(y, x, 1) = hit.color[1];
      out.rgb.at(y, x, 2) = hit.color[2];
      out.depth.at(y, x, 0) = hit.t;
      out.occluder_mask.set(y, x, hit.occluder);
    }
  }
  return out;
}

}  // namespace

SynthHit synth_cast_ray(const SynthSpec& spec, const Vec3& origin,
                        const Vec3& direction, bool with_occluder) {
  (void)spec;
  SynthHit best;
  double best_t = std::numeric_limits<double>::infinity();
  for (const Box& box : scene_boxes()) {
    if (box.is_occluder && !with_occluder) continue;
    double t;
    Vec3 n;
    if (!intersect_box(box, origin, direction, &t, &n)) continue;
    if (t >= best_t) continue;
    best_t = t;
    const double shade = 0.55 + 0.45 * std::max(0.0, n.dot(kLightDir));
    best.hit = true;
    best.t = t;
    best.color = shade * box.albedo;
    best.occluder = box.is_occluder;
  }
  return best;
}

bool synth_occupied(const Vec3& point, bool with_occluder) {
  for (const Box& box : scene_boxes()) {
    if (box.is_occluder && !with_occluder) continue;
    bool inside = true;
    for (int a = 0; a < 3; ++a)
      if (point[a] < box.mn[a] || point[a] > box.mx[a]) inside = false;
    if (inside) return true;
  }
  return false;
}

SynthGeometry synth_geometry() {
  SynthGeometry g;
  for (const Box& box : scene_boxes()) {
    if (box.is_occluder) {
      g.occluder_min = box.mn;
      g.occluder_max = box.mx;
    } else if (box.albedo == Vec3(0.90, 0.45, 0.10)) {
      g.patch_min = box.mn;
      g.patch_max = box.mx;
    }
  }
  return g;
}

SceneBundle synth_scene(const SynthSpec& spec, Rng& rng) {
  if (spec.width < 8 || spec.height < 8 || spec.width % 4 != 0 || spec.height % 4 != 0)
    throw std::invalid_argument("synth_scene: resolution must be >= 8 and divisible by 4");
  if (spec.n_train < 1 || spec.n_test < 0)
    throw std::invalid_argument("synth_scene: bad view counts");
  if (spec.severity < 0.0 || spec.severity > 1.0)
    throw std::invalid_argument("synth_scene: severity must be in [0, 1]");

  SceneBundle bundle;
  bundle.tag = spec.tag;

  // Revealing cameras step far enough sideways that the patch shows past
  // the occluder edge; hidden cameras stay inside its shadow. The draw
  // count per view is fixed so the occluder switch does not perturb the
  // camera stream.
  const int n_reveal =
      static_cast<int>(std::floor((1.0 - spec.severity) * spec.n_train + 1e-9));
  std::vector<int> ids(spec.n_train);
  for (int i = 0; i < spec.n_train; ++i) ids[i] = i;
  rng.shuffle(ids);
  std::vector<bool> reveals(spec.n_train, false);
  for (int i = 0; i < n_reveal; ++i) reveals[ids[i]] = true;

  for (int i = 0; i < spec.n_train; ++i) {
    const double u1 = rng.uniform();
    const double u2 = rng.uniform();
    const double u3 = rng.uniform();
    const double u4 = rng.uniform();
    const double zc = rng.uniform(-1.5, -1.2);
    Vec3 pos;
    if (reveals[i]) {
      const bool along_x = u1 < 0.5;
      const double main = (u2 < 0.5 ? -1.0 : 1.0) * (0.95 + 0.30 * u3);
      const double minor = -0.30 + 0.60 * u4;
      pos = along_x ? Vec3(main, minor, zc) : Vec3(minor, main, zc);
    } else {
      pos = Vec3(-0.42 + 0.84 * u1, -0.42 + 0.84 * u2, zc);
    }
    const Camera cam = make_camera(spec, pos);
    const SynthRender r = render_analytic(spec, cam, spec.occluder);
    MaskedView v;
    v.camera = cam;
    v.rgb = r.rgb;
    v.depth = r.depth;
    v.mask = dilate_mask(r.occluder_mask, spec.dilate_kernel, spec.dilate_iters);
    bundle.train.push_back(std::move(v));
  }

  for (int i = 0; i < spec.n_test; ++i) {
    const Vec3 pos(rng.uniform(-0.55, 0.55), rng.uniform(-0.55, 0.55),
                   rng.uniform(-1.5, -1.2));
    const Camera cam = make_camera(spec, pos);
    const SynthRender without = render_analytic(spec, cam, false);
    TestView v;
    v.camera = cam;
    v.rgb = without.rgb;
    v.depth = without.depth;
    if (spec.occluder) {
      const SynthRender with = render_analytic(spec, cam, true);
      v.mask = dilate_mask(with.occluder_mask, spec.dilate_kernel, spec.dilate_iters);
    }
    bundle.test.push_back(std::move(v));
  }

  if (spec.occluder) {
    bool seen = false;
    for (const MaskedView& v : bundle.train)
      if (v.mask.any()) {
        seen = true;
        break;
      }
    if (!seen)
      throw std::invalid_argument("synth_scene: occluder outside all training frusta");
  }

  bundle.validate();
  return bundle;
}

}  // namespace ocld
