#pragma once

#include "sagecc/core/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace sagecc {

/// 8-bit RGB image, row-major, interleaved channels.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int h, int w) : height(h), width(w), rgb(static_cast<size_t>(h) * w * 3, 0) {}

  bool empty() const { return height <= 0 || width <= 0; }
  std::uint8_t* px(int y, int x) { return &rgb[(static_cast<size_t>(y) * width + x) * 3]; }
  const std::uint8_t* px(int y, int x) const {
    return &rgb[(static_cast<size_t>(y) * width + x) * 3];
  }
  void fill(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    for (size_t i = 0; i < rgb.size(); i += 3) {
      rgb[i] = r;
      rgb[i + 1] = g;
      rgb[i + 2] = b;
    }
  }
  bool operator==(const Image&) const = default;
};

/// Pixels scaled to [-0.5, 0.5] as an (H*W) x 3 grid.
Grid<double> to_grid(const Image& image);

Image read_png(const std::string& path);
void write_png(const std::string& path, const Image& image);
void write_mask_png(const std::string& path, const Mask& mask);

}  // namespace sagecc
