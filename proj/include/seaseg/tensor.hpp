#pragma once

#include <Eigen/Dense>

#include <cassert>
#include <stdexcept>
#include <string>

namespace seaseg {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense 4-D array (batch, channels, height, width). Storage is a
// channels x (batch*height*width) row-major matrix so that 1x1 and im2col
// convolutions are a single GEMM over the whole batch.
template <typename Scalar>
struct Tensor {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;
  Mat<Scalar> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_), data(Mat<Scalar>::Zero(c_, n_ * h_ * w_)) {}
  Tensor(int n_, int c_, int h_, int w_, Mat<Scalar> d) : n(n_), c(c_), h(h_), w(w_), data(std::move(d)) {
    if (data.rows() != c || data.cols() != static_cast<Eigen::Index>(n) * h * w)
      throw ShapeError("tensor storage does not match shape");
  }

  static Tensor zeros(int n, int c, int h, int w) { return Tensor(n, c, h, w); }
  static Tensor constant(int n, int c, int h, int w, Scalar v) {
    Tensor t(n, c, h, w);
    t.data.setConstant(v);
    return t;
  }
  // A parameter matrix viewed as a tensor of shape (1, rows, 1, cols).
  static Tensor from_matrix(Mat<Scalar> m) {
    const int r = static_cast<int>(m.rows());
    const int k = static_cast<int>(m.cols());
    return Tensor(1, r, 1, k, std::move(m));
  }

  [[nodiscard]] int plane() const { return h * w; }
  [[nodiscard]] Eigen::Index size() const { return data.size(); }
  [[nodiscard]] bool empty() const { return data.size() == 0; }
  [[nodiscard]] bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }

  Scalar& at(int b, int ch, int y, int x) { return data(ch, (static_cast<Eigen::Index>(b) * h + y) * w + x); }
  [[nodiscard]] Scalar at(int b, int ch, int y, int x) const {
    return data(ch, (static_cast<Eigen::Index>(b) * h + y) * w + x);
  }

  // One (batch, channel) image plane as an h x w row-major map.
  Eigen::Map<Mat<Scalar>> slice(int b, int ch) {
    return Eigen::Map<Mat<Scalar>>(data.row(ch).data() + static_cast<Eigen::Index>(b) * plane(), h, w);
  }
  [[nodiscard]] Eigen::Map<const Mat<Scalar>> slice(int b, int ch) const {
    return Eigen::Map<const Mat<Scalar>>(data.row(ch).data() + static_cast<Eigen::Index>(b) * plane(), h, w);
  }

  [[nodiscard]] bool all_finite() const { return data.allFinite(); }

  template <typename Other>
  [[nodiscard]] Tensor<Other> cast() const {
    return Tensor<Other>(n, c, h, w, data.template cast<Other>());
  }

  [[nodiscard]] std::string shape_string() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

}  // namespace seaseg
