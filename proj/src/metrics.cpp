#include "ocld/metrics.hpp"

#include <numeric>
#include <sstream>

#include <json.hpp>

using nlohmann::json;

namespace ocld {

namespace {

constexpr int kWindow = 8;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

Image to_gray(const Image& img) {
  Image g(img.height, img.width, 1);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double s = 0.0;
      for (int c = 0; c < img.channels; ++c) s += img.at(y, x, c);
      g.at(y, x, 0) = s / img.channels;
    }
  return g;
}

double local_ssim(const Image& a, const Image& b, int y0, int x0) {
  double ma = 0.0, mb = 0.0;
  for (int y = 0; y < kWindow; ++y)
    for (int x = 0; x < kWindow; ++x) {
      ma += a.at(y0 + y, x0 + x, 0);
      mb += b.at(y0 + y, x0 + x, 0);
    }
  const double n = kWindow * kWindow;
  ma /= n;
  mb /= n;
  double va = 0.0, vb = 0.0, cov = 0.0;
  for (int y = 0; y < kWindow; ++y)
    for (int x = 0; x < kWindow; ++x) {
      const double da = a.at(y0 + y, x0 + x, 0) - ma;
      const double db = b.at(y0 + y, x0 + x, 0) - mb;
      va += da * da;
      vb += db * db;
      cov += da * db;
    }
  va /= n;
  vb /= n;
  cov /= n;
  return (2.0 * ma * mb + kC1) * (2.0 * cov + kC2) /
         ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
}

double mse(const Image& a, const Image& b) {
  require_same_shape(a, b, "mse");
  double s = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return s / static_cast<double>(a.data.size());
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double psnr(const Image& a, const Image& b, double cap) {
  const double e = mse(a, b);
  if (e <= 0.0) return cap;
  return std::min(10.0 * std::log10(1.0 / e), cap);
}

double ssim(const Image& a, const Image& b) {
  require_same_shape(a, b, "ssim");
  if (a.height < kWindow || a.width < kWindow)
    throw std::invalid_argument("ssim: images smaller than the window");
  const Image ga = to_gray(a);
  const Image gb = to_gray(b);
  double sum = 0.0;
  int count = 0;
  for (int y = 0; y + kWindow <= a.height; ++y)
    for (int x = 0; x + kWindow <= a.width; ++x) {
      sum += local_ssim(ga, gb, y, x);
      ++count;
    }
  return sum / count;
}

double masked_l2(const Image& a, const Image& b, const Mask& mask) {
  require_same_shape(a, b, "masked_l2");
  if (mask.height != a.height || mask.width != a.width)
    throw std::invalid_argument("masked_l2: mask shape mismatch");
  double s = 0.0;
  size_t n = 0;
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x) {
      if (!mask.at(y, x)) continue;
      for (int c = 0; c < a.channels; ++c) {
        const double d = a.at(y, x, c) - b.at(y, x, c);
        s += d * d;
        ++n;
      }
    }
  return n == 0 ? 0.0 : s / static_cast<double>(n);
}

double psnr_masked(const Image& a, const Image& b, const Mask& mask, double cap) {
  const double e = masked_l2(a, b, mask);
  if (e <= 0.0) return cap;
  return std::min(10.0 * std::log10(1.0 / e), cap);
}

double ssim_masked(const Image& a, const Image& b, const Mask& mask) {
  require_same_shape(a, b, "ssim");
  if (a.height < kWindow || a.width < kWindow)
    throw std::invalid_argument("ssim: images smaller than the window");
  if (!mask.any()) return ssim(a, b);
  const Image ga = to_gray(a);
  const Image gb = to_gray(b);
  double sum = 0.0;
  int count = 0;
  for (int y = 0; y + kWindow <= a.height; ++y)
    for (int x = 0; x + kWindow <= a.width; ++x) {
      bool touches = false;
      for (int dy = 0; dy < kWindow && !touches; ++dy)
        for (int dx = 0; dx < kWindow; ++dx)
          if (mask.at(y + dy, x + dx)) {
            touches = true;
            break;
          }
      if (!touches) continue;
      sum += local_ssim(ga, gb, y, x);
      ++count;
    }
  return count == 0 ? ssim(a, b) : sum / count;
}

double MetricReport::mean_psnr_full() const {
  std::vector<double> v;
  for (const auto& m : per_view) v.push_back(m.psnr_full);
  return mean_of(v);
}
double MetricReport::mean_ssim_full() const {
  std::vector<double> v;
  for (const auto& m : per_view) v.push_back(m.ssim_full);
  return mean_of(v);
}
double MetricReport::mean_l2_full() const {
  std::vector<double> v;
  for (const auto& m : per_view) v.push_back(m.l2_full);
  return mean_of(v);
}

namespace {
std::optional<double> mean_optional(
    const std::vector<ViewMetrics>& per_view,
    std::optional<double> ViewMetrics::*field) {
  std::vector<double> v;
  for (const auto& m : per_view)
    if (m.*field) v.push_back(*(m.*field));
  if (v.empty()) return std::nullopt;
  return mean_of(v);
}
}  // namespace

std::optional<double> MetricReport::mean_psnr_masked() const {
  return mean_optional(per_view, &ViewMetrics::psnr_masked);
}
std::optional<double> MetricReport::mean_ssim_masked() const {
  return mean_optional(per_view, &ViewMetrics::ssim_masked);
}
std::optional<double> MetricReport::mean_l2_masked() const {
  return mean_optional(per_view, &ViewMetrics::l2_masked);
}

std::string MetricReport::to_json() const {
  json j;
  j["view_count"] = view_count();
  j["config_hash"] = config_hash;
  json views = json::array();
  for (const auto& m : per_view) {
    json v = {{"view", m.view},
              {"psnr", m.psnr_full},
              {"ssim", m.ssim_full},
              {"l2", m.l2_full}};
    if (m.psnr_masked) v["psnr_masked"] = *m.psnr_masked;
    if (m.ssim_masked) v["ssim_masked"] = *m.ssim_masked;
    if (m.l2_masked) v["l2_masked"] = *m.l2_masked;
    views.push_back(v);
  }
  j["per_view"] = views;
  json mean = {{"psnr", mean_psnr_full()},
               {"ssim", mean_ssim_full()},
               {"l2", mean_l2_full()}};
  if (auto v = mean_psnr_masked()) mean["psnr_masked"] = *v;
  if (auto v = mean_ssim_masked()) mean["ssim_masked"] = *v;
  if (auto v = mean_l2_masked()) mean["l2_masked"] = *v;
  j["mean"] = mean;
  return j.dump(2) + "\n";
}

MetricReport MetricReport::from_json(const std::string& text) {
  MetricReport report;
  json j;
  try {
    j = json::parse(text);
    report.config_hash = j.at("config_hash").get<uint64_t>();
    for (const json& v : j.at("per_view")) {
      ViewMetrics m;
      m.view = v.at("view").get<int>();
      m.psnr_full = v.at("psnr").get<double>();
      m.ssim_full = v.at("ssim").get<double>();
      m.l2_full = v.at("l2").get<double>();
      if (v.contains("psnr_masked")) m.psnr_masked = v.at("psnr_masked").get<double>();
      if (v.contains("ssim_masked")) m.ssim_masked = v.at("ssim_masked").get<double>();
      if (v.contains("l2_masked")) m.l2_masked = v.at("l2_masked").get<double>();
      report.per_view.push_back(m);
    }
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed metric report: " + std::string(e.what()));
  }
  return report;
}

std::string MetricReport::to_table() const {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof(line), "%6s %10s %10s %12s %12s %12s\n", "view",
                "psnr", "ssim", "l2", "psnr_mask", "l2_mask");
  out << line;
  auto fmt_opt = [](std::optional<double> v) {
    char buf[32];
    if (v)
      std::snprintf(buf, sizeof(buf), "%12.6f", *v);
    else
      std::snprintf(buf, sizeof(buf), "%12s", "-");
    return std::string(buf);
  };
  for (const auto& m : per_view) {
    std::snprintf(line, sizeof(line), "%6d %10.4f %10.6f %12.8f", m.view,
                  m.psnr_full, m.ssim_full, m.l2_full);
    out << line << fmt_opt(m.psnr_masked) << fmt_opt(m.l2_masked) << "\n";
  }
  std::snprintf(line, sizeof(line), "%6s %10.4f %10.6f %12.8f", "mean",
                mean_psnr_full(), mean_ssim_full(), mean_l2_full());
  out << line << fmt_opt(mean_psnr_masked()) << fmt_opt(mean_l2_masked()) << "\n";
  return out.str();
}

}  // namespace ocld
