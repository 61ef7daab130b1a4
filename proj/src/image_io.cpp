#include "ocld/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

namespace ocld {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

uint8_t quantize(double v) {
  v = std::min(std::max(v, 0.0), 1.0);
  return static_cast<uint8_t>(std::lround(v * 255.0));
}

void write_png(const std::string& path, int width, int height, int color_type,
               const std::vector<uint8_t>& bytes, int bytes_per_row) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot open for writing: " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                            nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png write failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y)
    rows[y] = const_cast<png_bytep>(&bytes[static_cast<size_t>(y) * bytes_per_row]);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct PngBytes {
  int width = 0, height = 0, channels = 0;
  std::vector<uint8_t> bytes;
};

PngBytes read_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("missing asset: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                           nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("png read failed: " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_set_strip_16(png);
  png_set_packing(png);
  png_set_expand(png);
  const int color_type = png_get_color_type(png, info);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  PngBytes out;
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.channels = static_cast<int>(png_get_channels(png, info));
  out.bytes.resize(static_cast<size_t>(out.width) * out.height * out.channels);
  std::vector<png_bytep> rows(out.height);
  for (int y = 0; y < out.height; ++y)
    rows[y] = &out.bytes[static_cast<size_t>(y) * out.width * out.channels];
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace

void save_png_rgb(const std::string& path, const Image& image) {
  if (image.channels != 3)
    throw std::invalid_argument("save_png_rgb: image must have 3 channels");
  std::vector<uint8_t> bytes(static_cast<size_t>(image.height) * image.width * 3);
  size_t k = 0;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) bytes[k++] = quantize(image.at(y, x, c));
  write_png(path, image.width, image.height, PNG_COLOR_TYPE_RGB, bytes,
            image.width * 3);
}

Image load_png_rgb(const std::string& path) {
  const PngBytes raw = read_png(path);
  if (raw.channels != 3)
    throw std::runtime_error("expected RGB png: " + path);
  Image img(raw.height, raw.width, 3);
  size_t k = 0;
  for (int y = 0; y < raw.height; ++y)
    for (int x = 0; x < raw.width; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = raw.bytes[k++] / 255.0;
  return img;
}

void save_png_mask(const std::string& path, const Mask& mask) {
  std::vector<uint8_t> bytes(static_cast<size_t>(mask.height) * mask.width);
  for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.data[i] ? 255 : 0;
  write_png(path, mask.width, mask.height, PNG_COLOR_TYPE_GRAY, bytes,
            mask.width);
}

Mask load_png_mask(const std::string& path) {
  const PngBytes raw = read_png(path);
  if (raw.channels != 1)
    throw std::runtime_error("expected grayscale png: " + path);
  Mask mask(raw.height, raw.width);
  for (size_t i = 0; i < raw.bytes.size(); ++i)
    mask.data[i] = raw.bytes[i] >= 128 ? 1 : 0;
  return mask;
}

void save_depth_raw(const std::string& path, const Image& depth) {
  if (depth.channels != 1)
    throw std::invalid_argument("save_depth_raw: depth must have 1 channel");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  char header[16] = {'O', 'D', 'P', 'T'};
  const uint32_t w = static_cast<uint32_t>(depth.width);
  const uint32_t h = static_cast<uint32_t>(depth.height);
  std::memcpy(header + 4, &w, 4);
  std::memcpy(header + 8, &h, 4);
  out.write(header, sizeof(header));
  std::vector<float> vals(depth.data.size());
  for (size_t i = 0; i < vals.size(); ++i)
    vals[i] = static_cast<float>(depth.data[i]);
  out.write(reinterpret_cast<const char*>(vals.data()),
            static_cast<std::streamsize>(vals.size() * sizeof(float)));
  if (!out) throw std::runtime_error("write failed: " + path);
}

Image load_depth_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing asset: " + path);
  char header[16];
  in.read(header, sizeof(header));
  if (!in || std::memcmp(header, "ODPT", 4) != 0)
    throw std::runtime_error("bad depth header: " + path);
  uint32_t w = 0, h = 0;
  std::memcpy(&w, header + 4, 4);
  std::memcpy(&h, header + 8, 4);
  Image depth(static_cast<int>(h), static_cast<int>(w), 1);
  std::vector<float> vals(depth.data.size());
  in.read(reinterpret_cast<char*>(vals.data()),
          static_cast<std::streamsize>(vals.size() * sizeof(float)));
  if (!in) throw std::runtime_error("truncated depth file: " + path);
  for (size_t i = 0; i < vals.size(); ++i) depth.data[i] = vals[i];
  return depth;
}

}  // namespace ocld
