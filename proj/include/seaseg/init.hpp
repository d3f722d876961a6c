#pragma once

#include "seaseg/graph.hpp"

#include <cmath>
#include <random>
#include <string>

namespace seaseg {

// Registers `<name>.w` / `<name>.b` for a conv (or, with kernel 1 on a
// flattened input, an affine layer). A positive `stddev` draws weights from
// N(0, stddev); otherwise He-normal scaling for ReLU fan-in is used. Biases
// start at zero.
template <typename Scalar>
void add_conv(ParamStore<Scalar>& params, const std::string& name, int in, int out, int kernel, Rng& rng,
              double stddev = 0.0) {
  const int fan_in = in * kernel * kernel;
  const double sd = stddev > 0 ? stddev : std::sqrt(2.0 / fan_in);
  std::normal_distribution<double> dist(0.0, sd);
  Mat<Scalar> w(out, fan_in);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(dist(rng));
  params.add(name + ".w", std::move(w));
  params.add(name + ".b", Mat<Scalar>::Zero(out, 1));
}

// Transposed 2x2 conv parameters: weight (out*4, in).
template <typename Scalar>
void add_deconv(ParamStore<Scalar>& params, const std::string& name, int in, int out, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / in));
  Mat<Scalar> w(out * 4, in);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(dist(rng));
  params.add(name + ".w", std::move(w));
  params.add(name + ".b", Mat<Scalar>::Zero(out, 1));
}

// Standard deviation for freshly added prediction layers.
inline constexpr double kPredictorStd = 0.01;

}  // namespace seaseg
