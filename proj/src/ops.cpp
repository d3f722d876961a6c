#include "seaseg/ops.hpp"

#include <Eigen/SparseCore>

#include <algorithm>
#include <cmath>

namespace seaseg {

namespace {

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
}

template <typename Scalar>
Mat<Scalar> im2col(const Tensor<Scalar>& x, int kernel, int stride, int pad, int oh, int ow) {
  const Eigen::Index cols = static_cast<Eigen::Index>(x.n) * oh * ow;
  Mat<Scalar> col(static_cast<Eigen::Index>(x.c) * kernel * kernel, cols);
  for (int ci = 0; ci < x.c; ++ci) {
    const Scalar* src = x.data.row(ci).data();
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        Scalar* dst = col.row((static_cast<Eigen::Index>(ci) * kernel + ky) * kernel + kx).data();
        for (int b = 0; b < x.n; ++b) {
          const Scalar* plane = src + static_cast<Eigen::Index>(b) * x.h * x.w;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride + ky - pad;
            Scalar* out = dst + (static_cast<Eigen::Index>(b) * oh + oy) * ow;
            if (iy < 0 || iy >= x.h) {
              std::fill(out, out + ow, Scalar(0));
              continue;
            }
            const Scalar* in_row = plane + static_cast<Eigen::Index>(iy) * x.w;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride + kx - pad;
              out[ox] = (ix >= 0 && ix < x.w) ? in_row[ix] : Scalar(0);
            }
          }
        }
      }
    }
  }
  return col;
}

template <typename Scalar>
void col2im_add(const Mat<Scalar>& col, Tensor<Scalar>& dx, int kernel, int stride, int pad, int oh, int ow) {
  for (int ci = 0; ci < dx.c; ++ci) {
    Scalar* dst = dx.data.row(ci).data();
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        const Scalar* src = col.row((static_cast<Eigen::Index>(ci) * kernel + ky) * kernel + kx).data();
        for (int b = 0; b < dx.n; ++b) {
          Scalar* plane = dst + static_cast<Eigen::Index>(b) * dx.h * dx.w;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= dx.h) continue;
            const Scalar* in = src + (static_cast<Eigen::Index>(b) * oh + oy) * ow;
            Scalar* out_row = plane + static_cast<Eigen::Index>(iy) * dx.w;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride + kx - pad;
              if (ix >= 0 && ix < dx.w) out_row[ix] += in[ox];
            }
          }
        }
      }
    }
  }
}

template <typename Scalar>
Tensor<Scalar> scalar_tensor(Scalar v) {
  return Tensor<Scalar>::constant(1, 1, 1, 1, v);
}

}  // namespace

template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias, int kernel, int stride) {
  Graph<Scalar>& g = *x.graph;
  const Tensor<Scalar>& in = x.value();
  const Mat<Scalar>& w = weight.value().data;
  const Mat<Scalar>& b = bias.value().data;
  if (w.cols() != static_cast<Eigen::Index>(in.c) * kernel * kernel)
    throw ShapeError("conv2d: weight expects " + std::to_string(w.cols() / (kernel * kernel)) + " input channels, got " +
                     std::to_string(in.c));
  if (b.rows() != w.rows() || b.cols() != 1) throw ShapeError("conv2d: bias shape mismatch");
  const int pad = kernel / 2;
  const int oh = (in.h + 2 * pad - kernel) / stride + 1;
  const int ow = (in.w + 2 * pad - kernel) / stride + 1;
  const bool pointwise = kernel == 1 && stride == 1;

  Mat<Scalar> col;
  if (!pointwise) col = im2col(in, kernel, stride, pad, oh, ow);
  const Mat<Scalar>& cols = pointwise ? in.data : col;
  Mat<Scalar> out_data = w * cols;
  out_data.colwise() += b.col(0);
  Tensor<Scalar> out(in.n, static_cast<int>(w.rows()), oh, ow, std::move(out_data));

  const int xi = x.id, wi = weight.id, bi = bias.id;
  return g.push(std::move(out), {x, weight, bias},
                [xi, wi, bi, kernel, stride, pad, oh, ow, pointwise, col = std::move(col)](Graph<Scalar>& g, int self) {
                  const Mat<Scalar>& go = g.grad(self).data;
                  const Tensor<Scalar>& in = g.value(xi);
                  const Mat<Scalar>& cols = pointwise ? in.data : col;
                  if (g.requires_grad(Var<Scalar>{&g, wi})) g.grad_acc(wi).noalias() += go * cols.transpose();
                  if (g.requires_grad(Var<Scalar>{&g, bi})) g.grad_acc(bi).col(0) += go.rowwise().sum();
                  if (g.requires_grad(Var<Scalar>{&g, xi})) {
                    const Mat<Scalar>& w = g.value(wi).data;
                    if (pointwise) {
                      g.grad_acc(xi).noalias() += w.transpose() * go;
                    } else {
                      Mat<Scalar> dcol = w.transpose() * go;
                      g.grad_acc(xi);
                      Tensor<Scalar> dx(in.n, in.c, in.h, in.w);
                      col2im_add(dcol, dx, kernel, stride, pad, oh, ow);
                      g.grad_acc(xi) += dx.data;
                    }
                  }
                });
}

template <typename Scalar>
Var<Scalar> deconv2x2(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias) {
  Graph<Scalar>& g = *x.graph;
  const Tensor<Scalar>& in = x.value();
  const Mat<Scalar>& w = weight.value().data;
  const Mat<Scalar>& b = bias.value().data;
  if (w.cols() != in.c || w.rows() % 4 != 0 || b.rows() * 4 != w.rows()) throw ShapeError("deconv2x2: parameter shape mismatch");
  const int cout = static_cast<int>(b.rows());
  const Mat<Scalar> tmp = w * in.data;
  Tensor<Scalar> out(in.n, cout, in.h * 2, in.w * 2);
  for (int co = 0; co < cout; ++co)
    for (int bt = 0; bt < in.n; ++bt)
      for (int y = 0; y < in.h; ++y)
        for (int xx = 0; xx < in.w; ++xx) {
          const Eigen::Index src = (static_cast<Eigen::Index>(bt) * in.h + y) * in.w + xx;
          for (int d = 0; d < 4; ++d) out.at(bt, co, 2 * y + d / 2, 2 * xx + d % 2) = tmp(co * 4 + d, src) + b(co, 0);
        }
  const int xi = x.id, wi = weight.id, bi = bias.id;
  return g.push(std::move(out), {x, weight, bias}, [xi, wi, bi, cout](Graph<Scalar>& g, int self) {
    const Tensor<Scalar>& go = g.grad(self);
    const Tensor<Scalar>& in = g.value(xi);
    Mat<Scalar> gtmp(cout * 4, in.data.cols());
    for (int co = 0; co < cout; ++co)
      for (int bt = 0; bt < in.n; ++bt)
        for (int y = 0; y < in.h; ++y)
          for (int xx = 0; xx < in.w; ++xx) {
            const Eigen::Index dst = (static_cast<Eigen::Index>(bt) * in.h + y) * in.w + xx;
            for (int d = 0; d < 4; ++d) gtmp(co * 4 + d, dst) = go.at(bt, co, 2 * y + d / 2, 2 * xx + d % 2);
          }
    if (g.requires_grad(Var<Scalar>{&g, wi})) g.grad_acc(wi).noalias() += gtmp * in.data.transpose();
    if (g.requires_grad(Var<Scalar>{&g, bi})) g.grad_acc(bi).col(0) += go.data.rowwise().sum();
    if (g.requires_grad(Var<Scalar>{&g, xi})) g.grad_acc(xi).noalias() += g.value(wi).data.transpose() * gtmp;
  });
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> x) {
  Graph<Scalar>& g = *x.graph;
  const Tensor<Scalar>& in = x.value();
  Tensor<Scalar> out(in.n, in.c, in.h, in.w, in.data.cwiseMax(Scalar(0)));
  const int xi = x.id;
  return g.push(std::move(out), {x}, [xi](Graph<Scalar>& g, int self) {
    const Mat<Scalar>& y = g.value(self).data;
    g.grad_acc(xi) += (y.array() > Scalar(0)).select(g.grad(self).data, Scalar(0));
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> x) {
  Graph<Scalar>& g = *x.graph;
  const Tensor<Scalar>& in = x.value();
  Mat<Scalar> y = (Scalar(1) / (Scalar(1) + (-in.data.array()).exp())).matrix();
  Tensor<Scalar> out(in.n, in.c, in.h, in.w, std::move(y));
  const int xi = x.id;
  return g.push(std::move(out), {x}, [xi](Graph<Scalar>& g, int self) {
    const auto y = g.value(self).data.array();
    g.grad_acc(xi) += (g.grad(self).data.array() * y * (Scalar(1) - y)).matrix();
  });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  Graph<Scalar>& g = *a.graph;
  require_same_shape(a.value(), b.value(), "add");
  const Tensor<Scalar>& av = a.value();
  Tensor<Scalar> out(av.n, av.c, av.h, av.w, av.data + b.value().data);
  const int ai = a.id, bi = b.id;
  return g.push(std::move(out), {a, b}, [ai, bi](Graph<Scalar>& g, int self) {
    if (g.requires_grad(Var<Scalar>{&g, ai})) g.grad_acc(ai) += g.grad(self).data;
    if (g.requires_grad(Var<Scalar>{&g, bi})) g.grad_acc(bi) += g.grad(self).data;
  });
}

template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  Graph<Scalar>& g = *a.graph;
  require_same_shape(a.value(), b.value(), "mul");
  const Tensor<Scalar>& av = a.value();
  Tensor<Scalar> out(av.n, av.c, av.h, av.w, av.data.cwiseProduct(b.value().data));
  const int ai = a.id, bi = b.id;
  return g.push(std::move(out), {a, b}, [ai, bi](Graph<Scalar>& g, int self) {
    const Mat<Scalar>& go = g.grad(self).data;
    if (g.requires_grad(Var<Scalar>{&g, ai})) g.grad_acc(ai) += go.cwiseProduct(g.value(bi).data);
    if (g.requires_grad(Var<Scalar>{&g, bi})) g.grad_acc(bi) += go.cwiseProduct(g.value(ai).data);
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  Graph<Scalar>& g = *a.graph;
  const Tensor<Scalar>& av = a.value();
  Tensor<Scalar> out(av.n, av.c, av.h, av.w, av.data * s);
  const int ai = a.id;
  return g.push(std::move(out), {a}, [ai, s](Graph<Scalar>& g, int self) { g.grad_acc(ai) += g.grad(self).data * s; });
}

template <typename Scalar>
Var<Scalar> sum(const std::vector<Var<Scalar>>& xs) {
  if (xs.empty()) throw ShapeError("sum: no inputs");
  Graph<Scalar>& g = *xs.front().graph;
  Tensor<Scalar> out = xs.front().value();
  for (std::size_t i = 1; i < xs.size(); ++i) {
    require_same_shape(out, xs[i].value(), "sum");
    out.data += xs[i].value().data;
  }
  std::vector<int> ids;
  for (const auto& v : xs) ids.push_back(v.id);
  return g.push(std::move(out), xs, [ids](Graph<Scalar>& g, int self) {
    for (int id : ids)
      if (g.requires_grad(Var<Scalar>{&g, id})) g.grad_acc(id) += g.grad(self).data;
  });
}

template <typename Scalar>
Var<Scalar> resize(Var<Scalar> x, const Mat<Scalar>& rows, const Mat<Scalar>& cols) {
  Graph<Scalar>& g = *x.graph;
  const Tensor<Scalar>& in = x.value();
  if (rows.cols() != in.h || cols.cols() != in.w) throw ShapeError("resize: interpolation matrices do not match input " + in.shape_string());
  const int oh = static_cast<int>(rows.rows());
  const int ow = static_cast<int>(cols.rows());
  Tensor<Scalar> out(in.n, in.c, oh, ow);
  const Mat<Scalar> cols_t = cols.transpose();
  for (int b = 0; b < in.n; ++b)
    for (int ch = 0; ch < in.c; ++ch) out.slice(b, ch).noalias() = rows * in.slice(b, ch) * cols_t;
  const int xi = x.id;
  return g.push(std::move(out), {x}, [xi, rows, cols](Graph<Scalar>& g, int self) {
    const Tensor<Scalar>& go = g.grad(self);
    g.grad_acc(xi);
    const Tensor<Scalar>& in = g.value(xi);
    Tensor<Scalar> dx(in.n, in.c, in.h, in.w);
    const Mat<Scalar> rows_t = rows.transpose();
    for (int b = 0; b < in.n; ++b)
      for (int ch = 0; ch < in.c; ++ch) dx.slice(b, ch).noalias() = rows_t * go.slice(b, ch) * cols;
    g.grad_acc(xi) += dx.data;
  });
}

template <typename Scalar>
Var<Scalar> concat_channels(const std::vector<Var<Scalar>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  Graph<Scalar>& g = *xs.front().graph;
  const Tensor<Scalar>& first = xs.front().value();
  int total = 0;
  for (const auto& v : xs) {
    const Tensor<Scalar>& t = v.value();
    if (t.n != first.n || t.h != first.h || t.w != first.w) throw ShapeError("concat_channels: spatial mismatch");
    total += t.c;
  }
  Tensor<Scalar> out(first.n, total, first.h, first.w);
  std::vector<std::pair<int, int>> spans;  // (node id, channel offset)
  int offset = 0;
  for (const auto& v : xs) {
    const Tensor<Scalar>& t = v.value();
    out.data.middleRows(offset, t.c) = t.data;
    spans.emplace_back(v.id, offset);
    offset += t.c;
  }
  return g.push(std::move(out), xs, [spans](Graph<Scalar>& g, int self) {
    for (const auto& [id, off] : spans)
      if (g.requires_grad(Var<Scalar>{&g, id})) {
        const int c = g.value(id).c;
        g.grad_acc(id) += g.grad(self).data.middleRows(off, c);
      }
  });
}

template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> x, int n, int c, int h, int w) {
  Graph<Scalar>& g = *x.graph;
  const Tensor<Scalar>& in = x.value();
  if (in.data.rows() != c || in.data.cols() != static_cast<Eigen::Index>(n) * h * w)
    throw ShapeError("reshape: " + in.shape_string() + " storage does not fit the requested shape");
  const int xi = x.id;
  return g.push(Tensor<Scalar>(n, c, h, w, in.data), {x},
                [xi](Graph<Scalar>& g, int self) { g.grad_acc(xi) += g.grad(self).data; });
}

template <typename Scalar>
Var<Scalar> flatten(Var<Scalar> x) {
  Graph<Scalar>& g = *x.graph;
  const Tensor<Scalar>& in = x.value();
  const int hw = in.plane();
  Tensor<Scalar> out(in.n, in.c * hw, 1, 1);
  for (int ch = 0; ch < in.c; ++ch)
    for (int b = 0; b < in.n; ++b)
      for (int p = 0; p < hw; ++p) out.data(static_cast<Eigen::Index>(ch) * hw + p, b) = in.data(ch, static_cast<Eigen::Index>(b) * hw + p);
  const int xi = x.id;
  return g.push(std::move(out), {x}, [xi](Graph<Scalar>& g, int self) {
    const Mat<Scalar>& go = g.grad(self).data;
    Mat<Scalar>& dx = g.grad_acc(xi);
    const Tensor<Scalar>& in = g.value(xi);
    const int hw = in.plane();
    for (int ch = 0; ch < in.c; ++ch)
      for (int b = 0; b < in.n; ++b)
        for (int p = 0; p < hw; ++p) dx(ch, static_cast<Eigen::Index>(b) * hw + p) += go(static_cast<Eigen::Index>(ch) * hw + p, b);
  });
}

template <typename Scalar>
Var<Scalar> select_channel(Var<Scalar> x, const std::vector<int>& channels) {
  Graph<Scalar>& g = *x.graph;
  const Tensor<Scalar>& in = x.value();
  if (static_cast<int>(channels.size()) != in.n) throw ShapeError("select_channel: one channel per sample required");
  const int hw = in.plane();
  Tensor<Scalar> out(in.n, 1, in.h, in.w);
  for (int b = 0; b < in.n; ++b) {
    if (channels[b] < 0 || channels[b] >= in.c) throw std::out_of_range("select_channel: channel out of range");
    out.data.middleCols(static_cast<Eigen::Index>(b) * hw, hw) = in.data.block(channels[b], static_cast<Eigen::Index>(b) * hw, 1, hw);
  }
  const int xi = x.id;
  return g.push(std::move(out), {x}, [xi, channels, hw](Graph<Scalar>& g, int self) {
    const Mat<Scalar>& go = g.grad(self).data;
    Mat<Scalar>& dx = g.grad_acc(xi);
    for (std::size_t b = 0; b < channels.size(); ++b)
      dx.block(channels[b], static_cast<Eigen::Index>(b) * hw, 1, hw) += go.middleCols(static_cast<Eigen::Index>(b) * hw, hw);
  });
}

template <typename Scalar>
Var<Scalar> softmax_channels(Var<Scalar> x) {
  Graph<Scalar>& g = *x.graph;
  const Tensor<Scalar>& in = x.value();
  Mat<Scalar> e = (in.data.rowwise() - in.data.colwise().maxCoeff()).array().exp().matrix();
  const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> denom = e.colwise().sum();
  e.array().rowwise() /= denom.array();
  Tensor<Scalar> out(in.n, in.c, in.h, in.w, std::move(e));
  const int xi = x.id;
  return g.push(std::move(out), {x}, [xi](Graph<Scalar>& g, int self) {
    const Mat<Scalar>& y = g.value(self).data;
    const Mat<Scalar>& go = g.grad(self).data;
    const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> dot = y.cwiseProduct(go).colwise().sum();
    g.grad_acc(xi) += y.cwiseProduct((go.rowwise() - dot));
  });
}

template <typename Scalar>
Var<Scalar> roi_align(const std::vector<Var<Scalar>>& levels, const std::vector<RoiRequest>& rois, int out, int sampling) {
  if (levels.empty()) throw ShapeError("roi_align: no feature levels");
  Graph<Scalar>& g = *levels.front().graph;
  const int channels = levels.front().value().c;
  const int bins = out * out;
  const Eigen::Index total_cols = static_cast<Eigen::Index>(rois.size()) * bins;

  using Sparse = Eigen::SparseMatrix<Scalar, Eigen::ColMajor>;
  std::vector<std::vector<Eigen::Triplet<Scalar>>> triplets(levels.size());
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const RoiRequest& req = rois[r];
    if (req.level < 0 || req.level >= static_cast<int>(levels.size())) throw std::out_of_range("roi_align: bad level index");
    if (req.box.w <= 0 || req.box.h <= 0) throw ShapeError("roi_align: degenerate box");
    const Tensor<Scalar>& f = levels[req.level].value();
    if (f.n != 1 || f.c != channels) throw ShapeError("roi_align: levels must be single-image with equal channels");
    const double x0 = req.box.x / req.stride - 0.5;
    const double y0 = req.box.y / req.stride - 0.5;
    const double bin_w = req.box.w / req.stride / out;
    const double bin_h = req.box.h / req.stride / out;
    const double norm = 1.0 / (sampling * sampling);
    for (int by = 0; by < out; ++by)
      for (int bx = 0; bx < out; ++bx) {
        const Eigen::Index col = static_cast<Eigen::Index>(r) * bins + by * out + bx;
        for (int sy = 0; sy < sampling; ++sy)
          for (int sx = 0; sx < sampling; ++sx) {
            double y = y0 + (by + (sy + 0.5) / sampling) * bin_h;
            double x = x0 + (bx + (sx + 0.5) / sampling) * bin_w;
            if (y < -1.0 || y > f.h || x < -1.0 || x > f.w) continue;
            y = std::max(y, 0.0);
            x = std::max(x, 0.0);
            int ylo = static_cast<int>(y);
            int xlo = static_cast<int>(x);
            int yhi = ylo + 1;
            int xhi = xlo + 1;
            if (ylo >= f.h - 1) {
              ylo = yhi = f.h - 1;
              y = ylo;
            }
            if (xlo >= f.w - 1) {
              xlo = xhi = f.w - 1;
              x = xlo;
            }
            const double ly = y - ylo, lx = x - xlo;
            const double hy = 1 - ly, hx = 1 - lx;
            auto& tl = triplets[req.level];
            tl.emplace_back(ylo * f.w + xlo, col, static_cast<Scalar>(hy * hx * norm));
            tl.emplace_back(ylo * f.w + xhi, col, static_cast<Scalar>(hy * lx * norm));
            tl.emplace_back(yhi * f.w + xlo, col, static_cast<Scalar>(ly * hx * norm));
            tl.emplace_back(yhi * f.w + xhi, col, static_cast<Scalar>(ly * lx * norm));
          }
      }
  }

  Mat<Scalar> result = Mat<Scalar>::Zero(channels, total_cols);
  std::vector<std::pair<int, Sparse>> maps;  // (node id, sampling matrix)
  for (std::size_t l = 0; l < levels.size(); ++l) {
    if (triplets[l].empty()) continue;
    const Tensor<Scalar>& f = levels[l].value();
    Sparse a(f.plane(), total_cols);
    a.setFromTriplets(triplets[l].begin(), triplets[l].end());
    result.noalias() += f.data * a;
    maps.emplace_back(levels[l].id, std::move(a));
  }
  Tensor<Scalar> t(static_cast<int>(rois.size()), channels, out, out, std::move(result));
  return g.push(std::move(t), levels, [maps = std::move(maps)](Graph<Scalar>& g, int self) {
    const Mat<Scalar>& go = g.grad(self).data;
    for (const auto& [id, a] : maps)
      if (g.requires_grad(Var<Scalar>{&g, id})) g.grad_acc(id).noalias() += go * a.transpose();
  });
}

template <typename Scalar>
Var<Scalar> softmax_cross_entropy(Var<Scalar> logits, const std::vector<int>& labels) {
  Graph<Scalar>& g = *logits.graph;
  const Mat<Scalar>& z = logits.value().data;
  if (static_cast<Eigen::Index>(labels.size()) != z.cols()) throw ShapeError("softmax_cross_entropy: label count mismatch");
  if (z.cols() == 0) throw ShapeError("softmax_cross_entropy: empty input");
  Mat<Scalar> p = (z.rowwise() - z.colwise().maxCoeff()).array().exp().matrix();
  const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> denom = p.colwise().sum();
  double total = 0;
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    const int y = labels[j];
    if (y < 0 || y >= z.rows()) throw std::out_of_range("softmax_cross_entropy: label out of range");
    total += std::log(static_cast<double>(denom(j))) - std::log(static_cast<double>(p(y, j)));
  }
  p.array().rowwise() /= denom.array();
  const Scalar n = static_cast<Scalar>(z.cols());
  const int li = logits.id;
  return g.push(scalar_tensor(static_cast<Scalar>(total / static_cast<double>(n))), {logits},
                [li, labels, p = std::move(p), n](Graph<Scalar>& g, int self) {
                  const Scalar go = g.grad(self).data(0, 0);
                  Mat<Scalar> d = p;
                  for (std::size_t j = 0; j < labels.size(); ++j) d(labels[j], static_cast<Eigen::Index>(j)) -= Scalar(1);
                  g.grad_acc(li) += d * (go / n);
                });
}

template <typename Scalar>
Var<Scalar> sigmoid_bce(Var<Scalar> logits, const Tensor<Scalar>& targets, const Tensor<Scalar>& weights, Scalar normalizer) {
  Graph<Scalar>& g = *logits.graph;
  const Tensor<Scalar>& z = logits.value();
  require_same_shape(z, targets, "sigmoid_bce");
  const bool weighted = !weights.empty();
  if (weighted) require_same_shape(z, weights, "sigmoid_bce weights");
  const auto za = z.data.array();
  const auto ta = targets.data.array();
  Mat<Scalar> per = (za.max(Scalar(0)) - za * ta + (Scalar(1) + (-za.abs()).exp()).log()).matrix();
  if (weighted) per = per.cwiseProduct(weights.data);
  const Scalar value = per.sum() / normalizer;
  const int li = logits.id;
  return g.push(scalar_tensor(value), {logits}, [li, targets, weights, weighted, normalizer](Graph<Scalar>& g, int self) {
    const Scalar go = g.grad(self).data(0, 0);
    const auto za = g.value(li).data.array();
    Mat<Scalar> d = ((Scalar(1) / (Scalar(1) + (-za).exp())) - targets.data.array()).matrix();
    if (weighted) d = d.cwiseProduct(weights.data);
    g.grad_acc(li) += d * (go / normalizer);
  });
}

template <typename Scalar>
Var<Scalar> smooth_l1(Var<Scalar> pred, const Tensor<Scalar>& targets, const Tensor<Scalar>& weights, Scalar beta,
                      Scalar normalizer) {
  Graph<Scalar>& g = *pred.graph;
  require_same_shape(pred.value(), targets, "smooth_l1");
  require_same_shape(pred.value(), weights, "smooth_l1 weights");
  const Mat<Scalar> diff = pred.value().data - targets.data;
  const auto ad = diff.array().abs();
  const Mat<Scalar> per = (ad < beta).select(Scalar(0.5) * ad.square() / beta, ad - Scalar(0.5) * beta).matrix();
  const Scalar value = per.cwiseProduct(weights.data).sum() / normalizer;
  const int pi = pred.id;
  return g.push(scalar_tensor(value), {pred}, [pi, diff, weights, beta, normalizer](Graph<Scalar>& g, int self) {
    const Scalar go = g.grad(self).data(0, 0);
    const auto da = diff.array();
    const Mat<Scalar> d = (da.abs() < beta).select(da / beta, da.sign()).matrix();
    g.grad_acc(pi) += d.cwiseProduct(weights.data) * (go / normalizer);
  });
}

template <typename Scalar>
Var<Scalar> sum_all(Var<Scalar> x) {
  Graph<Scalar>& g = *x.graph;
  const int xi = x.id;
  return g.push(scalar_tensor(x.value().data.sum()), {x}, [xi](Graph<Scalar>& g, int self) {
    g.grad_acc(xi).array() += g.grad(self).data(0, 0);
  });
}

template <typename Scalar>
Var<Scalar> weighted_sum(const std::vector<Var<Scalar>>& terms, const std::vector<Scalar>& weights) {
  if (terms.empty() || terms.size() != weights.size()) throw ShapeError("weighted_sum: terms/weights mismatch");
  Graph<Scalar>& g = *terms.front().graph;
  Scalar total = 0;
  std::vector<std::pair<int, Scalar>> parts;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].value().size() != 1) throw ShapeError("weighted_sum: terms must be scalars");
    total += weights[i] * terms[i].value().data(0, 0);
    parts.emplace_back(terms[i].id, weights[i]);
  }
  return g.push(scalar_tensor(total), terms, [parts](Graph<Scalar>& g, int self) {
    const Scalar go = g.grad(self).data(0, 0);
    for (const auto& [id, w] : parts)
      if (g.requires_grad(Var<Scalar>{&g, id})) g.grad_acc(id).array() += go * w;
  });
}

#define SEASEG_INSTANTIATE_OPS(S)                                                                              \
  template Var<S> conv2d<S>(Var<S>, Var<S>, Var<S>, int, int);                                                 \
  template Var<S> deconv2x2<S>(Var<S>, Var<S>, Var<S>);                                                        \
  template Var<S> relu<S>(Var<S>);                                                                             \
  template Var<S> sigmoid<S>(Var<S>);                                                                          \
  template Var<S> add<S>(Var<S>, Var<S>);                                                                      \
  template Var<S> mul<S>(Var<S>, Var<S>);                                                                      \
  template Var<S> scale<S>(Var<S>, S);                                                                         \
  template Var<S> sum<S>(const std::vector<Var<S>>&);                                                          \
  template Var<S> resize<S>(Var<S>, const Mat<S>&, const Mat<S>&);                                             \
  template Var<S> concat_channels<S>(const std::vector<Var<S>>&);                                              \
  template Var<S> reshape<S>(Var<S>, int, int, int, int);                                                      \
  template Var<S> flatten<S>(Var<S>);                                                                          \
  template Var<S> select_channel<S>(Var<S>, const std::vector<int>&);                                          \
  template Var<S> softmax_channels<S>(Var<S>);                                                                 \
  template Var<S> roi_align<S>(const std::vector<Var<S>>&, const std::vector<RoiRequest>&, int, int);          \
  template Var<S> softmax_cross_entropy<S>(Var<S>, const std::vector<int>&);                                   \
  template Var<S> sigmoid_bce<S>(Var<S>, const Tensor<S>&, const Tensor<S>&, S);                               \
  template Var<S> smooth_l1<S>(Var<S>, const Tensor<S>&, const Tensor<S>&, S, S);                              \
  template Var<S> sum_all<S>(Var<S>);                                                                          \
  template Var<S> weighted_sum<S>(const std::vector<Var<S>>&, const std::vector<S>&);

SEASEG_INSTANTIATE_OPS(float)
SEASEG_INSTANTIATE_OPS(double)

}  // namespace seaseg
