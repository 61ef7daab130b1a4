#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace ocld {

// Dense row-major H x W x C array of doubles. One type serves images,
// latents, noise tensors and per-pixel gradient buffers.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c) {
    if (h < 0 || w < 0 || c <= 0) throw std::invalid_argument("Image: bad shape");
    data.assign(static_cast<size_t>(h) * w * c, fill);
  }

  double& at(int y, int x, int c) {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  double at(int y, int x, int c) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }

  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
  size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

inline Image operator+(const Image& a, const Image& b) {
  require_same_shape(a, b, "Image::operator+");
  Image r = a;
  for (size_t i = 0; i < r.data.size(); ++i) r.data[i] += b.data[i];
  return r;
}

inline Image operator-(const Image& a, const Image& b) {
  require_same_shape(a, b, "Image::operator-");
  Image r = a;
  for (size_t i = 0; i < r.data.size(); ++i) r.data[i] -= b.data[i];
  return r;
}

inline Image operator*(double s, const Image& a) {
  Image r = a;
  for (double& v : r.data) v *= s;
  return r;
}

inline double dot(const Image& a, const Image& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

inline double norm(const Image& a) { return std::sqrt(dot(a, a)); }

inline double max_abs_diff(const Image& a, const Image& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

// Binary H x W mask. true = region of interest (to inpaint).
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> data;

  Mask() = default;
  Mask(int h, int w, bool fill = false)
      : height(h), width(w), data(static_cast<size_t>(h) * w, fill ? 1 : 0) {}

  bool at(int y, int x) const { return data[static_cast<size_t>(y) * width + x] != 0; }
  void set(int y, int x, bool v) { data[static_cast<size_t>(y) * width + x] = v ? 1 : 0; }
  bool same_shape(const Mask& o) const { return height == o.height && width == o.width; }
  size_t count() const {
    size_t n = 0;
    for (uint8_t v : data) n += v != 0;
    return n;
  }
  bool any() const { return count() > 0; }
};

// --- seeding -----------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Stateless seed derivation; rendering jitter and per-iteration streams are
// keyed this way so results do not depend on evaluation order or thread count.
inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0) {
  return splitmix64(splitmix64(splitmix64(base) ^ a) + b);
}

// Deterministic RNG wrapper. All distributions are implemented by hand on top
// of mt19937_64 so sequences are pinned (std::shuffle and the std
// distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t raw() { return eng_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // uniform in [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return x % n;
  }

  // standard normal, Box-Muller with explicit spare
  double gauss() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = static_cast<double>((eng_() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    const double u2 = static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * M_PI * u2;
    spare_ = r * std::sin(th);
    has_spare_ = true;
    return r * std::cos(th);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Static-partition parallel loop. Worker w handles a contiguous index range;
// any exception from a worker is rethrown on the calling thread. Callers that
// need bit-determinism across thread counts must write per-index results and
// reduce serially afterwards.
void parallel_for(int n, int n_threads, const std::function<void(int)>& fn);

// Range variant for hot loops that want per-worker scratch buffers.
void parallel_for_ranges(int n, int n_threads,
                         const std::function<void(int, int)>& fn);

// FNV-1a over a byte string; used for config hashes.
inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace ocld
