#pragma once

#include "seaseg/config.hpp"
#include "seaseg/ops.hpp"

#include <array>

namespace seaseg {

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline constexpr std::array<int, 5> kPyramidStrides{4, 8, 16, 32, 64};

// Throws DimensionError unless the image is (1, 3, H, W) with H, W >= 64 and
// divisible by 64.
template <typename Scalar>
void check_image(const Tensor<Scalar>& image);

// Stage outputs C2..C5 at strides 4, 8, 16, 32.
template <typename Scalar>
using StageFeatures = std::array<Var<Scalar>, 4>;

// P2..P6. level(i) addresses the level with stride 2^i.
template <typename Scalar>
struct FeaturePyramid {
  std::array<Var<Scalar>, 5> levels;

  Var<Scalar>& level(int i) { return levels.at(i - 2); }
  [[nodiscard]] const Var<Scalar>& level(int i) const { return levels.at(i - 2); }
  [[nodiscard]] int channels() const { return levels[0].value().c; }
};

template <typename Scalar>
void init_backbone(ParamStore<Scalar>& params, const BackboneConfig& cfg, Rng& rng);

// Stem conv (stride 2) then four stages of [3x3 stride-2 conv, 3x3 conv],
// ReLU after every conv.
template <typename Scalar>
StageFeatures<Scalar> backbone_forward(Var<Scalar> image, const BackboneConfig& cfg);

template <typename Scalar>
void init_fpn(ParamStore<Scalar>& params, const FpnConfig& cfg, const BackboneConfig& backbone, Rng& rng);

// Lateral 1x1 projections, nearest x2 top-down merge, 3x3 smoothing; P6 keeps
// every second sample of P5.
template <typename Scalar>
FeaturePyramid<Scalar> fpn_forward(const StageFeatures<Scalar>& stages, const FpnConfig& cfg);

}  // namespace seaseg
