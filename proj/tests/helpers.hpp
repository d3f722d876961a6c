#pragma once

#include "seaseg/ops.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace testing {

using seaseg::Graph;
using seaseg::Mat;
using seaseg::ParamStore;
using seaseg::Tensor;
using seaseg::Var;

template <typename Scalar = double>
Tensor<Scalar> random_tensor(int n, int c, int h, int w, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<Scalar> t(n, c, h, w);
  for (Eigen::Index i = 0; i < t.data.size(); ++i) t.data.data()[i] = static_cast<Scalar>(u(rng));
  return t;
}

// Registers a tensor as parameter `name` so gradients with respect to it can
// be checked; read it back with input().
inline void add_input(ParamStore<double>& params, const std::string& name, const Tensor<double>& t) {
  params.add(name, t.data);
}

inline Var<double> input(Graph<double>& g, const std::string& name, int n, int c, int h, int w) {
  return seaseg::reshape(g.param(name), n, c, h, w);
}

// Scalar probe sum(x * r) with a fixed random r, so every output entry gets a
// distinct gradient.
inline Var<double> probe(Var<double> x, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  const auto& v = x.value();
  Var<double> r = x.graph->constant(random_tensor(v.n, v.c, v.h, v.w, rng));
  return seaseg::sum_all(seaseg::mul(x, r));
}

// Nonzero biases keep ReLU pre-activations off the kink at exactly zero,
// which dead neighborhoods with zero biases would otherwise hit.
inline void randomize_biases(ParamStore<double>& params, std::uint64_t seed = 5, double scale = 0.1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& [name, m] : params.all())
    if (name.size() > 2 && name.compare(name.size() - 2, 2, ".b") == 0)
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
}

inline Eigen::MatrixXd plane(const Tensor<double>& t, int b, int c) { return t.slice(b, c); }

// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("seaseg-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

}  // namespace testing
