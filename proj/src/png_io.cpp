#include "clims/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

namespace clims {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void fail(const std::string& op, const std::string& path) {
  throw std::runtime_error("png: " + op + " failed for \"" + path + "\"");
}

void write_png(const std::string& path, int height, int width, int color_type, int bit_depth,
               const std::vector<std::vector<png_byte>>& rows) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) fail("open", path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail("create_write_struct", path);
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    fail("create_info_struct", path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail("write", path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
               bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (const auto& row : rows)
    png_write_row(png, const_cast<png_bytep>(row.data()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  FilePtr fp;
  int height = 0, width = 0, color_type = 0, bit_depth = 0;
  std::vector<std::vector<png_byte>> rows;

  explicit PngReader(const std::string& path) {
    fp.reset(std::fopen(path.c_str(), "rb"));
    if (!fp) fail("open", path);
    png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) fail("create_read_struct", path);
    info = png_create_info_struct(png);
    if (!info) fail("create_info_struct", path);
    if (setjmp(png_jmpbuf(png))) fail("read", path);
    png_init_io(png, fp.get());
    png_read_info(png, info);
    width = static_cast<int>(png_get_image_width(png, info));
    height = static_cast<int>(png_get_image_height(png, info));
    color_type = png_get_color_type(png, info);
    bit_depth = png_get_bit_depth(png, info);
  }

  void read_rows() {
    const std::size_t row_bytes = png_get_rowbytes(png, info);
    rows.assign(static_cast<std::size_t>(height), std::vector<png_byte>(row_bytes));
    for (auto& row : rows) png_read_row(png, row.data(), nullptr);
  }

  ~PngReader() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
  }
};

png_byte to_byte(real v) {
  const real scaled = std::round(std::min(std::max(v, real(0)), real(1)) * 255.0);
  return static_cast<png_byte>(scaled);
}

}  // namespace

void write_png_rgb8(const std::string& path, const Image& image) {
  std::vector<std::vector<png_byte>> rows(static_cast<std::size_t>(image.height),
                                          std::vector<png_byte>(static_cast<std::size_t>(image.width) * 3));
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c)
        rows[static_cast<std::size_t>(y)][static_cast<std::size_t>(x) * 3 + static_cast<std::size_t>(c)] =
            to_byte(image.at(y, x, c));
  write_png(path, image.height, image.width, PNG_COLOR_TYPE_RGB, 8, rows);
}

Image read_png_rgb8(const std::string& path) {
  PngReader reader(path);
  if (reader.color_type != PNG_COLOR_TYPE_RGB || reader.bit_depth != 8)
    throw std::runtime_error("png: \"" + path + "\" is not 8-bit RGB");
  reader.read_rows();
  Image img = make_image<real>(reader.height, reader.width);
  for (int y = 0; y < reader.height; ++y)
    for (int x = 0; x < reader.width; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) =
            static_cast<real>(reader.rows[static_cast<std::size_t>(y)]
                                         [static_cast<std::size_t>(x) * 3 + static_cast<std::size_t>(c)]) /
            255.0;
  return img;
}

void write_png_gray8(const std::string& path, const MaskGrid& mask, int height, int width) {
  require(mask.size() == static_cast<Eigen::Index>(height) * width, "png: mask size mismatch");
  std::vector<std::vector<png_byte>> rows(static_cast<std::size_t>(height),
                                          std::vector<png_byte>(static_cast<std::size_t>(width)));
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const int v = mask[static_cast<Eigen::Index>(y) * width + x];
      require(v >= 0 && v <= 255, "png: mask value out of 8-bit range");
      rows[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)] = static_cast<png_byte>(v);
    }
  write_png(path, height, width, PNG_COLOR_TYPE_GRAY, 8, rows);
}

MaskGrid read_png_gray8(const std::string& path, int& height, int& width) {
  PngReader reader(path);
  if (reader.color_type != PNG_COLOR_TYPE_GRAY || reader.bit_depth != 8)
    throw std::runtime_error("png: \"" + path + "\" is not 8-bit grayscale");
  reader.read_rows();
  height = reader.height;
  width = reader.width;
  MaskGrid mask(static_cast<Eigen::Index>(height) * width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      mask[static_cast<Eigen::Index>(y) * width + x] =
          reader.rows[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)];
  return mask;
}

void write_png_gray16(const std::string& path, const Vec& values, int height, int width) {
  require(values.size() == static_cast<Eigen::Index>(height) * width, "png: value grid size mismatch");
  std::vector<std::vector<png_byte>> rows(static_cast<std::size_t>(height),
                                          std::vector<png_byte>(static_cast<std::size_t>(width) * 2));
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const real v = std::min(std::max(values[static_cast<Eigen::Index>(y) * width + x], real(0)), real(1));
      const auto q = static_cast<std::uint16_t>(std::lround(v * 65535.0));
      rows[static_cast<std::size_t>(y)][static_cast<std::size_t>(x) * 2] = static_cast<png_byte>(q >> 8);
      rows[static_cast<std::size_t>(y)][static_cast<std::size_t>(x) * 2 + 1] = static_cast<png_byte>(q & 0xff);
    }
  write_png(path, height, width, PNG_COLOR_TYPE_GRAY, 16, rows);
}

}  // namespace clims
