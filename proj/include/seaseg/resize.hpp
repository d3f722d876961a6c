#pragma once

#include "seaseg/tensor.hpp"

namespace seaseg {

// 1-D interpolation operators. A 2-D resize of an h x w plane X is
// Ry * X * Rx^T with Ry (out_h x h) and Rx (out_w x w).

// Bilinear with half-pixel centers (align_corners = false); source
// coordinates are clamped to the valid range at the borders.
template <typename Scalar>
Mat<Scalar> bilinear_matrix(int in, int out) {
  if (in <= 0 || out <= 0) throw ShapeError("bilinear_matrix: sizes must be positive");
  Mat<Scalar> m = Mat<Scalar>::Zero(out, in);
  const double scale = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(src);
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = i0 + 1 < in ? i0 + 1 : in - 1;
    const double frac = src - i0;
    m(i, i0) += static_cast<Scalar>(1.0 - frac);
    m(i, i1) += static_cast<Scalar>(frac);
  }
  return m;
}

// Non-overlapping average pooling with window = stride = factor.
template <typename Scalar>
Mat<Scalar> avgpool_matrix(int in, int factor) {
  if (factor <= 0 || in % factor != 0) throw ShapeError("avgpool_matrix: size not divisible by factor");
  const int out = in / factor;
  Mat<Scalar> m = Mat<Scalar>::Zero(out, in);
  for (int i = 0; i < out; ++i)
    for (int k = 0; k < factor; ++k) m(i, i * factor + k) = Scalar(1) / Scalar(factor);
  return m;
}

template <typename Scalar>
Mat<Scalar> nearest_up_matrix(int in, int factor) {
  Mat<Scalar> m = Mat<Scalar>::Zero(in * factor, in);
  for (int i = 0; i < in * factor; ++i) m(i, i / factor) = Scalar(1);
  return m;
}

// Keeps every `step`-th sample starting at 0.
template <typename Scalar>
Mat<Scalar> subsample_matrix(int in, int step) {
  const int out = (in + step - 1) / step;
  Mat<Scalar> m = Mat<Scalar>::Zero(out, in);
  for (int i = 0; i < out; ++i) m(i, i * step) = Scalar(1);
  return m;
}

// Bilinear when growing, average pooling when shrinking, identity otherwise.
template <typename Scalar>
Mat<Scalar> rescale_matrix(int in, int out) {
  if (in == out) return Mat<Scalar>::Identity(in, in);
  if (out > in) return bilinear_matrix<Scalar>(in, out);
  if (in % out != 0) throw ShapeError("rescale_matrix: downsampling ratio must be integral");
  return avgpool_matrix<Scalar>(in, in / out);
}

}  // namespace seaseg
