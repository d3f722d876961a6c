#include "gradcheck.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

#include "seaseg/resize.hpp"

#include <doctest.h>

using namespace seaseg;
using testing::add_input;
using testing::input;
using testing::probe;
using testing::random_tensor;

namespace {

Eigen::MatrixXd resize_plane(const Eigen::MatrixXd& x, const Mat<double>& ry, const Mat<double>& rx) { return ry * x * rx.transpose(); }

// Direct zero-padded convolution for one output entry.
double conv_at(const Tensor<double>& x, const Mat<double>& w, const Mat<double>& b, int k, int stride, int bn, int co, int oy, int ox) {
  const int pad = k / 2;
  double s = b(co, 0);
  for (int ci = 0; ci < x.c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const int iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
        if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) continue;
        s += w(co, (ci * k + ky) * k + kx) * x.at(bn, ci, iy, ix);
      }
  return s;
}

template <typename Build>
gradcheck::Report op_gradcheck(ParamStore<double>& params, Build build) {
  Graph<double> g(&params);
  Var<double> loss = build(g);
  g.backward(loss);
  const auto grads = g.param_grads();
  return gradcheck::check(params, grads, [&](const ParamStore<double>& p) {
    Graph<double> h(&p, false);
    return build(h).value().data(0, 0);
  });
}

}  // namespace

TEST_CASE("bilinear 2x2 to 4x4 matches the per-pixel oracle") {
  Eigen::MatrixXd x(2, 2);
  x << 0, 1, 2, 3;
  const Eigen::MatrixXd got = resize_plane(x, bilinear_matrix<double>(2, 4), bilinear_matrix<double>(2, 4));
  const Eigen::MatrixXd want = oracle::bilinear_resize(x, 4, 4);
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(got(0, 0) == doctest::Approx(0.0));
  CHECK(got(1, 1) == doctest::Approx(0.75));
  CHECK(got(3, 3) == doctest::Approx(3.0));
}

TEST_CASE("bilinear and average pooling match oracles on random planes") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-2, 2);
  const std::vector<std::pair<int, int>> ups{{1, 2}, {2, 4}, {3, 7}, {7, 28}, {14, 28}, {5, 16}, {8, 32}};
  for (auto [in, out] : ups) {
    Eigen::MatrixXd x(in, in + 1);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
    const Eigen::MatrixXd got = resize_plane(x, bilinear_matrix<double>(in, out), bilinear_matrix<double>(in + 1, out + 3));
    CHECK((got - oracle::bilinear_resize(x, out, out + 3)).cwiseAbs().maxCoeff() < 1e-6);
  }
  for (int f : {2, 4, 8}) {
    Eigen::MatrixXd x(16, 8);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
    const Eigen::MatrixXd got = resize_plane(x, avgpool_matrix<double>(16, f), avgpool_matrix<double>(8, f));
    CHECK((got - oracle::average_pool(x, f)).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("constants are fixed points of every resize") {
  const Eigen::MatrixXd c = Eigen::MatrixXd::Constant(8, 8, 2.5);
  for (const Mat<double>& r : {bilinear_matrix<double>(8, 32), avgpool_matrix<double>(8, 4), nearest_up_matrix<double>(8, 2),
                               subsample_matrix<double>(8, 2), rescale_matrix<double>(8, 8)}) {
    const Eigen::MatrixXd got = r * c * r.transpose();
    CHECK((got.array() - 2.5).abs().maxCoeff() == 0.0);
  }
}

TEST_CASE("subsample and nearest upsampling pick the expected samples") {
  const Mat<double> s = subsample_matrix<double>(4, 2);
  CHECK(s.rows() == 2);
  CHECK(s(0, 0) == 1);
  CHECK(s(1, 2) == 1);
  const Mat<double> n = nearest_up_matrix<double>(2, 2);
  CHECK(n(1, 0) == 1);
  CHECK(n(2, 1) == 1);
  CHECK_THROWS_AS(avgpool_matrix<double>(7, 2), ShapeError);
}

TEST_CASE("conv2d matches direct convolution") {
  std::mt19937_64 rng(5);
  for (auto [k, stride] : {std::pair{3, 1}, std::pair{3, 2}, std::pair{1, 1}, std::pair{1, 2}}) {
    const Tensor<double> x = random_tensor(2, 3, 6, 8, rng);
    const Tensor<double> w = random_tensor(1, 4, 1, 3 * k * k, rng);
    const Tensor<double> b = random_tensor(1, 4, 1, 1, rng);
    Graph<double> g;
    Var<double> y = conv2d(g.constant(x), g.constant(w), g.constant(b), k, stride);
    const auto& v = y.value();
    CHECK(v.h == (stride == 1 ? 6 : 3));
    CHECK(v.w == (stride == 1 ? 8 : 4));
    double err = 0;
    for (int bn = 0; bn < v.n; ++bn)
      for (int co = 0; co < v.c; ++co)
        for (int oy = 0; oy < v.h; ++oy)
          for (int ox = 0; ox < v.w; ++ox)
            err = std::max(err, std::abs(v.at(bn, co, oy, ox) - conv_at(x, w.data, b.data, k, stride, bn, co, oy, ox)));
    CHECK(err < 1e-12);
  }
}

TEST_CASE("deconv2x2 places every input pixel into its 2x2 block") {
  std::mt19937_64 rng(6);
  const Tensor<double> x = random_tensor(1, 2, 3, 3, rng);
  const Tensor<double> w = random_tensor(1, 3 * 4, 1, 2, rng);
  const Tensor<double> b = random_tensor(1, 3, 1, 1, rng);
  Graph<double> g;
  const auto& y = deconv2x2(g.constant(x), g.constant(w), g.constant(b)).value();
  REQUIRE(y.h == 6);
  for (int co = 0; co < 3; ++co)
    for (int oy = 0; oy < 6; ++oy)
      for (int ox = 0; ox < 6; ++ox) {
        double want = b.data(co, 0);
        for (int ci = 0; ci < 2; ++ci) want += w.data(co * 4 + (oy % 2) * 2 + ox % 2, ci) * x.at(0, ci, oy / 2, ox / 2);
        CHECK(y.at(0, co, oy, ox) == doctest::Approx(want).epsilon(1e-12));
      }
}

TEST_CASE("roi_align: constant map gives a constant feature") {
  Graph<double> g;
  Var<double> f = g.constant(Tensor<double>::constant(1, 2, 16, 16, 1.75));
  const auto& r = roi_align<double>({f}, {RoiRequest{0, {10, 12, 30, 21}, 4}}, 14, 2).value();
  CHECK(r.n == 1);
  CHECK(r.h == 14);
  CHECK((r.data.array() - 1.75).abs().maxCoeff() < 1e-12);
}

TEST_CASE("roi_align: box over one feature cell matches the per-sample oracle") {
  std::mt19937_64 rng(8);
  const Tensor<double> t = random_tensor(1, 1, 8, 8, rng);
  Graph<double> g;
  const Box box{12, 20, 4, 4};  // exactly cell (5, 3) at stride 4
  const auto& r = roi_align<double>({g.constant(t)}, {RoiRequest{0, box, 4}}, 14, 2).value();
  const Eigen::MatrixXd want = oracle::roi_align(testing::plane(t, 0, 0), box, 4, 14, 2);
  CHECK((testing::plane(r, 0, 0) - want).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("roi_align reproduces a linear ramp") {
  Tensor<double> t(1, 1, 16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) t.at(0, 0, y, x) = x;
  Graph<double> g;
  const Box box{9.3, 14.1, 37.7, 22.9};
  const double stride = 4;
  const auto& r = roi_align<double>({g.constant(t)}, {RoiRequest{0, box, stride}}, 14, 2).value();
  double err = 0;
  for (int i = 0; i < 14; ++i)
    for (int j = 0; j < 14; ++j) {
      const double want = box.x / stride - 0.5 + (j + 0.5) * box.w / stride / 14;
      err = std::max(err, std::abs(r.at(0, 0, i, j) - want));
    }
  CHECK(err < 1e-6);
}

TEST_CASE("roi_align matches the oracle on random boxes and levels") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 1);
  const Tensor<double> a = random_tensor(1, 2, 16, 12, rng), b = random_tensor(1, 2, 8, 6, rng);
  Graph<double> g;
  std::vector<RoiRequest> reqs;
  for (int k = 0; k < 12; ++k) {
    const double x = u(rng) * 40 - 4, y = u(rng) * 56 - 4, w = 1 + u(rng) * 30, h = 1 + u(rng) * 30;
    reqs.push_back({k % 2, {x, y, w, h}, k % 2 ? 8.0 : 4.0});
  }
  const auto& r = roi_align<double>({g.constant(a), g.constant(b)}, reqs, 7, 2).value();
  double err = 0;
  for (std::size_t k = 0; k < reqs.size(); ++k)
    for (int c = 0; c < 2; ++c) {
      const Tensor<double>& f = reqs[k].level ? b : a;
      const Eigen::MatrixXd want = oracle::roi_align(testing::plane(f, 0, c), reqs[k].box, reqs[k].stride, 7, 2);
      err = std::max(err, (testing::plane(r, static_cast<int>(k), c) - want).cwiseAbs().maxCoeff());
    }
  CHECK(err < 1e-12);
}

TEST_CASE("op gradients match central differences") {
  std::mt19937_64 rng(11);
  ParamStore<double> p;
  add_input(p, "x", random_tensor(2, 3, 6, 6, rng));
  add_input(p, "y", random_tensor(2, 3, 6, 6, rng));
  p.add("w3", random_tensor(1, 4, 1, 27, rng).data);
  p.add("w1", random_tensor(1, 4, 1, 3, rng).data);
  p.add("b", random_tensor(1, 4, 1, 1, rng).data);
  p.add("wd", random_tensor(1, 8, 1, 3, rng).data);
  p.add("bd", random_tensor(1, 2, 1, 1, rng).data);
  auto x = [](Graph<double>& g) { return input(g, "x", 2, 3, 6, 6); };
  auto y = [](Graph<double>& g) { return input(g, "y", 2, 3, 6, 6); };

  SUBCASE("conv2d 3x3 stride 1 and 2, 1x1") {
    for (int stride : {1, 2}) {
      auto r = op_gradcheck(p, [&](Graph<double>& g) { return probe(conv2d(x(g), g.param("w3"), g.param("b"), 3, stride)); });
      CHECK(r.worst < 1e-7);
    }
    auto r = op_gradcheck(p, [&](Graph<double>& g) { return probe(conv2d(x(g), g.param("w1"), g.param("b"), 1, 1)); });
    CHECK(r.worst < 1e-7);
  }
  SUBCASE("deconv2x2") {
    auto r = op_gradcheck(p, [&](Graph<double>& g) { return probe(deconv2x2(x(g), g.param("wd"), g.param("bd"))); });
    CHECK(r.worst < 1e-7);
  }
  SUBCASE("element-wise ops") {
    auto r = op_gradcheck(p, [&](Graph<double>& g) {
      return probe(add(mul(sigmoid(x(g)), relu(y(g))), scale(sum<double>({x(g), y(g), x(g)}), 0.3)));
    });
    CHECK(r.worst < 1e-7);
  }
  SUBCASE("resize, concat, flatten, select, softmax") {
    auto r = op_gradcheck(p, [&](Graph<double>& g) {
      Var<double> a = resize(x(g), bilinear_matrix<double>(6, 14), avgpool_matrix<double>(6, 2));
      Var<double> c = concat_channels<double>({x(g), y(g)});
      Var<double> s = select_channel(softmax_channels(c), {1, 4});
      return add(add(probe(a, 1), probe(flatten(c), 2)), probe(s, 3));
    });
    CHECK(r.worst < 1e-7);
  }
  SUBCASE("roi_align") {
    auto r = op_gradcheck(p, [&](Graph<double>& g) {
      Var<double> lvl = reshape(g.param("x"), 1, 3, 6, 12);
      return probe(roi_align<double>({lvl}, {RoiRequest{0, {3, 2, 17, 9}, 2}, RoiRequest{0, {0, 0, 24, 12}, 2}}, 5, 2));
    });
    CHECK(r.worst < 1e-7);
  }
  SUBCASE("losses") {
    Tensor<double> targets = random_tensor(2, 3, 6, 6, rng, 0, 1);
    targets.data = targets.data.array().round().matrix();
    const Tensor<double> weights = random_tensor(2, 3, 6, 6, rng, 0, 1);
    const Tensor<double> reg_t = random_tensor(2, 3, 6, 6, rng, -2, 2);
    std::vector<int> labels(72);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 3);
    auto r = op_gradcheck(p, [&](Graph<double>& g) {
      return weighted_sum<double>({softmax_cross_entropy(x(g), labels), sigmoid_bce(y(g), targets, weights, 7.0),
                                   sigmoid_bce(x(g), targets, Tensor<double>{}, 3.0), smooth_l1(y(g), reg_t, weights, 1.0, 5.0)},
                                  {1.0, 0.5, 2.0, 1.5});
    });
    CHECK(r.worst < 1e-7);
  }
}

TEST_CASE("loss values match scalar oracles") {
  std::mt19937_64 rng(12);
  const Tensor<double> z = random_tensor(3, 4, 2, 2, rng, -3, 3);
  Tensor<double> t = random_tensor(3, 4, 2, 2, rng, 0, 1);
  t.data = t.data.array().round().matrix();
  const Tensor<double> w = random_tensor(3, 4, 2, 2, rng, 0, 1);
  Graph<double> g;
  const double bce = sigmoid_bce(g.constant(z), t, w, 6.0).value().data(0, 0);
  double want = 0;
  for (Eigen::Index i = 0; i < z.data.size(); ++i)
    want += w.data.data()[i] * oracle::bce(oracle::sigmoid(z.data.data()[i]), t.data.data()[i]);
  CHECK(bce == doctest::Approx(want / 6.0).epsilon(1e-12));

  const double sl1 = smooth_l1(g.constant(z), t, w, 1.0, 2.0).value().data(0, 0);
  double want_sl1 = 0;
  for (Eigen::Index i = 0; i < z.data.size(); ++i) {
    const double d = std::abs(z.data.data()[i] - t.data.data()[i]);
    want_sl1 += w.data.data()[i] * (d < 1 ? 0.5 * d * d : d - 0.5);
  }
  CHECK(sl1 == doctest::Approx(want_sl1 / 2.0).epsilon(1e-12));

  const Tensor<double> zeros(1, 16, 3, 3);
  const double ce = softmax_cross_entropy(g.constant(zeros), std::vector<int>(9, 5)).value().data(0, 0);
  CHECK(std::abs(ce - std::log(16.0)) < 1e-12);
}

TEST_CASE("graph bookkeeping") {
  ParamStore<double> p;
  p.add("a", Mat<double>::Constant(1, 1, 3.0));
  Graph<double> g(&p);
  Var<double> a = g.param("a");
  Var<double> sq = mul(a, g.param("a"));  // same node, gradient accumulates to 2a
  g.backward(sq);
  CHECK(g.param_grads().at("a")(0, 0) == doctest::Approx(6.0));
  Graph<double> h(&p);
  CHECK_THROWS_AS(h.backward(h.constant(Tensor<double>(1, 2, 1, 1))), ShapeError);
  Graph<double> off(&p, false);
  CHECK_THROWS(off.backward(off.param("a")));
  CHECK_THROWS_AS(reshape(g.param("a"), 1, 2, 1, 1), ShapeError);
}
