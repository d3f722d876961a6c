#include "seaseg/fpn_backbone.hpp"

#include "seaseg/init.hpp"
#include "seaseg/resize.hpp"

namespace seaseg {

template <typename Scalar>
void check_image(const Tensor<Scalar>& image) {
  if (image.n != 1 || image.c != 3) throw DimensionError("image must have shape (1, 3, H, W), got " + image.shape_string());
  if (image.h < 64 || image.w < 64 || image.h % 64 != 0 || image.w % 64 != 0)
    throw DimensionError("image height and width must be >= 64 and divisible by 64, got " + std::to_string(image.h) + "x" +
                         std::to_string(image.w));
}

template <typename Scalar>
void init_backbone(ParamStore<Scalar>& params, const BackboneConfig& cfg, Rng& rng) {
  add_conv(params, "backbone.stem", 3, cfg.stem_width, 3, rng);
  int in = cfg.stem_width;
  for (int s = 0; s < 4; ++s) {
    const int out = cfg.stage_widths.at(s);
    const std::string p = "backbone.stage" + std::to_string(s + 2);
    add_conv(params, p + ".down", in, out, 3, rng);
    add_conv(params, p + ".conv", out, out, 3, rng);
    in = out;
  }
}

template <typename Scalar>
StageFeatures<Scalar> backbone_forward(Var<Scalar> image, const BackboneConfig& cfg) {
  check_image(image.value());
  Var<Scalar> x = relu(conv(image, "backbone.stem", 3, 2));
  StageFeatures<Scalar> out;
  for (int s = 0; s < 4; ++s) {
    const std::string p = "backbone.stage" + std::to_string(s + 2);
    x = relu(conv(x, p + ".down", 3, 2));
    x = relu(conv(x, p + ".conv", 3, 1));
    if (x.value().c != cfg.stage_widths.at(s)) throw ShapeError("backbone: stage width does not match config");
    out[s] = x;
  }
  return out;
}

template <typename Scalar>
void init_fpn(ParamStore<Scalar>& params, const FpnConfig& cfg, const BackboneConfig& backbone, Rng& rng) {
  for (int s = 0; s < 4; ++s) {
    const std::string p = "fpn.p" + std::to_string(s + 2);
    add_conv(params, p + ".lateral", backbone.stage_widths.at(s), cfg.channels, 1, rng, 0.0);
    add_conv(params, p + ".smooth", cfg.channels, cfg.channels, 3, rng, 0.0);
  }
}

template <typename Scalar>
FeaturePyramid<Scalar> fpn_forward(const StageFeatures<Scalar>& stages, const FpnConfig& cfg) {
  std::array<Var<Scalar>, 4> merged;
  for (int s = 3; s >= 0; --s) {
    const std::string p = "fpn.p" + std::to_string(s + 2);
    Var<Scalar> lateral = conv(stages[s], p + ".lateral", 1);
    if (lateral.value().c != cfg.channels) throw ShapeError("fpn: lateral width does not match fpn.channels");
    if (s == 3) {
      merged[s] = lateral;
    } else {
      const Tensor<Scalar>& top = merged[s + 1].value();
      Var<Scalar> up = resize(merged[s + 1], nearest_up_matrix<Scalar>(top.h, 2), nearest_up_matrix<Scalar>(top.w, 2));
      merged[s] = add(lateral, up);
    }
  }
  FeaturePyramid<Scalar> pyr;
  for (int s = 0; s < 4; ++s) pyr.levels[s] = conv(merged[s], "fpn.p" + std::to_string(s + 2) + ".smooth", 3);
  const Tensor<Scalar>& p5 = pyr.levels[3].value();
  pyr.levels[4] = resize(pyr.levels[3], subsample_matrix<Scalar>(p5.h, 2), subsample_matrix<Scalar>(p5.w, 2));
  return pyr;
}

#define SEASEG_INSTANTIATE(S)                                                                \
  template void check_image<S>(const Tensor<S>&);                                            \
  template void init_backbone<S>(ParamStore<S>&, const BackboneConfig&, Rng&);               \
  template StageFeatures<S> backbone_forward<S>(Var<S>, const BackboneConfig&);              \
  template void init_fpn<S>(ParamStore<S>&, const FpnConfig&, const BackboneConfig&, Rng&); \
  template FeaturePyramid<S> fpn_forward<S>(const StageFeatures<S>&, const FpnConfig&);

SEASEG_INSTANTIATE(float)
SEASEG_INSTANTIATE(double)

}  // namespace seaseg
