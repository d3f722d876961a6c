#pragma once

// Differentiable operations on Graph nodes. Every op records its own
// backward closure; all are instantiated for float and double.

#include "seaseg/box.hpp"
#include "seaseg/graph.hpp"

#include <vector>

namespace seaseg {

// Zero-padded (pad = kernel/2) convolution. Weight is (out, in*kernel*kernel)
// with column index (ci*kernel + ky)*kernel + kx; bias is (out, 1).
template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias, int kernel, int stride = 1);

// 2x2 stride-2 transposed convolution. Weight is (out*4, in) with row index
// co*4 + dy*2 + dx; bias is (out, 1).
template <typename Scalar>
Var<Scalar> deconv2x2(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias);

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> x);

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> x);

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b);

template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b);

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s);

// Element-wise sum of equally shaped nodes.
template <typename Scalar>
Var<Scalar> sum(const std::vector<Var<Scalar>>& xs);

// Separable linear resize: every plane X becomes rows * X * cols^T.
template <typename Scalar>
Var<Scalar> resize(Var<Scalar> x, const Mat<Scalar>& rows, const Mat<Scalar>& cols);

template <typename Scalar>
Var<Scalar> concat_channels(const std::vector<Var<Scalar>>& xs);

// Reinterprets the storage under a new shape with the same channel count and
// column count, e.g. a (1, c, 1, n*h*w) parameter as (n, c, h, w).
template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> x, int n, int c, int h, int w);

// (n, c, h, w) -> (n, c*h*w, 1, 1).
template <typename Scalar>
Var<Scalar> flatten(Var<Scalar> x);

// Picks channel channels[b] from sample b: (n, c, h, w) -> (n, 1, h, w).
template <typename Scalar>
Var<Scalar> select_channel(Var<Scalar> x, const std::vector<int>& channels);

// Per-position softmax over the channel axis.
template <typename Scalar>
Var<Scalar> softmax_channels(Var<Scalar> x);

struct RoiRequest {
  int level = 0;       // index into the `levels` argument
  Box box;             // image coordinates
  double stride = 1;   // image pixels per feature cell of that level
};

// RoI-Align over several single-image feature maps. Output is
// (rois, channels, out, out); every bin averages sampling x sampling bilinear
// samples taken at half-pixel-aligned continuous coordinates.
template <typename Scalar>
Var<Scalar> roi_align(const std::vector<Var<Scalar>>& levels, const std::vector<RoiRequest>& rois, int out = 14,
                      int sampling = 2);

// Scalar losses -----------------------------------------------------------

// Mean over positions of -log softmax(logits)[label]. One label per column
// of the storage matrix, i.e. per (sample, y, x).
template <typename Scalar>
Var<Scalar> softmax_cross_entropy(Var<Scalar> logits, const std::vector<int>& labels);

// sum(weight * BCE(sigmoid(logits), target)) / normalizer, evaluated in the
// numerically stable logit form. An empty weight tensor means all ones.
template <typename Scalar>
Var<Scalar> sigmoid_bce(Var<Scalar> logits, const Tensor<Scalar>& targets, const Tensor<Scalar>& weights,
                        Scalar normalizer);

// sum(weight * smoothL1_beta(pred - target)) / normalizer.
template <typename Scalar>
Var<Scalar> smooth_l1(Var<Scalar> pred, const Tensor<Scalar>& targets, const Tensor<Scalar>& weights, Scalar beta,
                      Scalar normalizer);

template <typename Scalar>
Var<Scalar> sum_all(Var<Scalar> x);

// sum_i weights[i] * terms[i] over scalar nodes.
template <typename Scalar>
Var<Scalar> weighted_sum(const std::vector<Var<Scalar>>& terms, const std::vector<Scalar>& weights);

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) {
  return add(a, b);
}
template <typename Scalar>
Var<Scalar> operator*(Var<Scalar> a, Var<Scalar> b) {
  return mul(a, b);
}

// Convenience: parameter lookup by name on the node's graph.
template <typename Scalar>
Var<Scalar> param(Graph<Scalar>& g, const std::string& name) {
  return g.param(name);
}

// conv2d with weight `<prefix>.w` and bias `<prefix>.b`.
template <typename Scalar>
Var<Scalar> conv(Var<Scalar> x, const std::string& prefix, int kernel, int stride = 1) {
  Graph<Scalar>& g = *x.graph;
  return conv2d(x, g.param(prefix + ".w"), g.param(prefix + ".b"), kernel, stride);
}

}  // namespace seaseg
