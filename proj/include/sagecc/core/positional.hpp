#pragma once

#include "sagecc/core/tensor.hpp"

#include <cmath>

namespace sagecc {

/// Standard 1D sinusoidal encoding of a scalar position into `dim` channels:
/// [sin(p w_0), cos(p w_0), sin(p w_1), ...] with w_i = 10000^(-2i/dim).
template <typename Scalar>
RowVectorX<Scalar> sinusoid(Scalar position, int dim) {
  RowVectorX<Scalar> out(dim);
  for (int i = 0; i < dim; ++i) {
    const int pair = i / 2;
    const Scalar freq = std::pow(Scalar(10000), -Scalar(2 * pair) / Scalar(dim));
    out(i) = (i % 2 == 0) ? std::sin(position * freq) : std::cos(position * freq);
  }
  return out;
}

/// Token position table, length x dim.
template <typename Scalar>
MatrixX<Scalar> sinusoid_table(int length, int dim) {
  MatrixX<Scalar> out(length, dim);
  for (int t = 0; t < length; ++t) out.row(t) = sinusoid<Scalar>(Scalar(t), dim);
  return out;
}

/// Fixed 2D embedding for an h x w grid: the first half of the channels encode
/// the row index, the second half the column index. Rows ordered y*w + x.
template <typename Scalar>
MatrixX<Scalar> sinusoid_2d(int height, int width, int channels) {
  const int half = channels / 2;
  MatrixX<Scalar> out(static_cast<Index>(height) * width, channels);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      auto row = out.row(static_cast<Index>(y) * width + x);
      row.head(half) = sinusoid<Scalar>(Scalar(y), half);
      row.tail(channels - half) = sinusoid<Scalar>(Scalar(x), channels - half);
    }
  }
  return out;
}

/// Encoding of a 2D point (pixel coordinates), dim/2 channels per axis.
template <typename Scalar>
RowVectorX<Scalar> point_encoding(Scalar x, Scalar y, int dim) {
  const int half = dim / 2;
  RowVectorX<Scalar> out(dim);
  out.head(half) = sinusoid<Scalar>(x, half);
  out.tail(dim - half) = sinusoid<Scalar>(y, dim - half);
  return out;
}

}  // namespace sagecc
