#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "clims/types.hpp"

namespace clims {

/// 8-bit RGB; real values in [0,1] are rounded to 0..255 on write.
void write_png_rgb8(const std::string& path, const Image& image);
Image read_png_rgb8(const std::string& path);

/// 8-bit grayscale label masks (value = class index).
void write_png_gray8(const std::string& path, const MaskGrid& mask, int height, int width);
MaskGrid read_png_gray8(const std::string& path, int& height, int& width);

/// 16-bit grayscale, used for exported activation maps (value = round(65535*v)).
void write_png_gray16(const std::string& path, const Vec& values, int height, int width);

}  // namespace clims
