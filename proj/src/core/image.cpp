#include "sagecc/core/image.hpp"

#include "sagecc/core/errors.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

namespace sagecc {

Grid<double> to_grid(const Image& image) {
  Grid<double> g;
  g.height = image.height;
  g.width = image.width;
  g.data.resize(static_cast<Index>(image.height) * image.width, 3);
  for (Index i = 0; i < g.data.rows(); ++i) {
    for (int c = 0; c < 3; ++c) {
      g.data(i, c) = image.rgb[static_cast<size_t>(i) * 3 + c] / 255.0 - 0.5;
    }
  }
  return g;
}

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

void write_rows(const std::string& path, int height, int width, int color_type,
                const std::vector<png_bytep>& rows) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw InputError("cannot open for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw InputError("png write failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, const_cast<png_bytepp>(rows.data()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

Image read_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw InputError("missing image file: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw InputError("corrupt png: " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) {
    png_set_strip_alpha(png);
  }
  png_read_update_info(png, info);
  Image img(height, width);
  std::vector<png_bytep> rows(static_cast<size_t>(height));
  for (int y = 0; y < height; ++y) rows[static_cast<size_t>(y)] = img.px(y, 0);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png(const std::string& path, const Image& image) {
  std::vector<png_bytep> rows(static_cast<size_t>(image.height));
  Image copy = image;
  for (int y = 0; y < image.height; ++y) rows[static_cast<size_t>(y)] = copy.px(y, 0);
  write_rows(path, image.height, image.width, PNG_COLOR_TYPE_RGB, rows);
}

void write_mask_png(const std::string& path, const Mask& mask) {
  std::vector<std::uint8_t> gray(mask.bits.size());
  for (size_t i = 0; i < gray.size(); ++i) gray[i] = mask.bits[i] ? 255 : 0;
  std::vector<png_bytep> rows(static_cast<size_t>(mask.height));
  for (int y = 0; y < mask.height; ++y) {
    rows[static_cast<size_t>(y)] = &gray[static_cast<size_t>(y) * mask.width];
  }
  write_rows(path, mask.height, mask.width, PNG_COLOR_TYPE_GRAY, rows);
}

}  // namespace sagecc
