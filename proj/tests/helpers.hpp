#pragma once

#include <filesystem>

#include "ocld/field.hpp"
#include "ocld/noise.hpp"

namespace ocld::testing {

inline RadianceField random_field(Rng& rng, int res = 4, double scale = 1.0) {
  RadianceField f(res, res, res, Vec3(-1, -1, -1), Vec3(1, 1, 1));
  for (double& v : f.rgb) v = scale * rng.gauss();
  for (double& v : f.density) v = scale * rng.gauss();
  return f;
}

inline Camera test_camera(int size = 8, double fov_deg = 55.0,
                          const Vec3& position = Vec3(0, 0, -2.5)) {
  Camera cam;
  cam.width = cam.height = size;
  cam.fx = cam.fy = (size / 2.0) / std::tan(fov_deg * M_PI / 360.0);
  cam.cx = cam.cy = size / 2.0;
  cam.position = position;
  // Look toward +z with y down mapping to world +y.
  cam.rotation = Eigen::Matrix3d::Identity();
  return cam;
}

inline Image random_image(Rng& rng, int h, int w, int c, double lo = 0.0,
                          double hi = 1.0) {
  Image img(h, w, c);
  for (double& v : img.data) v = rng.uniform(lo, hi);
  return img;
}

inline Image random_gauss_image(Rng& rng, int h, int w, int c) {
  Image img(h, w, c);
  for (double& v : img.data) v = rng.gauss();
  return img;
}

inline Latent random_latent(Rng& rng, int h, int w, int c, int id = -1) {
  return Latent(random_gauss_image(rng, h, w, c), id);
}

// Unique scratch directory under the system temp dir; removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) {
    path = std::filesystem::temp_directory_path() /
           ("ocld_test_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string str() const { return path.string(); }
};

}  // namespace ocld::testing
