#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace sagecc {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using RowVector = RowVectorX<double>;
using Index = Eigen::Index;

/// Spatial grid of feature vectors stored as (h*w) x C, row index y*w + x.
template <typename Scalar>
struct Grid {
  MatrixX<Scalar> data;
  int height = 0;
  int width = 0;

  int channels() const { return static_cast<int>(data.cols()); }
  int cells() const { return height * width; }
  auto pixel(int y, int x) const { return data.row(static_cast<Index>(y) * width + x); }
  auto pixel(int y, int x) { return data.row(static_cast<Index>(y) * width + x); }
};

/// Binary mask over an image, row-major H x W.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), bits(static_cast<size_t>(h) * w, 0) {}
  bool at(int y, int x) const { return bits[static_cast<size_t>(y) * width + x] != 0; }
  void set(int y, int x, bool v = true) { bits[static_cast<size_t>(y) * width + x] = v ? 1 : 0; }
  long popcount() const {
    long n = 0;
    for (auto b : bits) n += b;
    return n;
  }
  bool operator==(const Mask&) const = default;
};

/// Half-open pixel box [x0, x1) x [y0, y1).
struct Box {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool operator==(const Box&) const = default;
};

}  // namespace sagecc
