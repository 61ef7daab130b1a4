#pragma once

#include <string>

#include "ocld/core.hpp"

namespace ocld {

// 8-bit PNG, RGB for 3-channel images. Values are clamped to [0, 1] and
// quantized with round(v * 255) on save.
void save_png_rgb(const std::string& path, const Image& image);
Image load_png_rgb(const std::string& path);

// 8-bit grayscale PNG holding 0/255 per pixel.
void save_png_mask(const std::string& path, const Mask& mask);
Mask load_png_mask(const std::string& path);

// Raw little-endian float32 depth with a 16-byte header:
// magic "ODPT", u32 width, u32 height, 4 reserved zero bytes.
void save_depth_raw(const std::string& path, const Image& depth);
Image load_depth_raw(const std::string& path);

}  // namespace ocld
