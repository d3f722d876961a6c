#include "seaseg/sea.hpp"

#include "seaseg/init.hpp"
#include "seaseg/resize.hpp"

#include <cmath>

namespace seaseg {

namespace {

template <typename Scalar>
Var<Scalar> resize_to(Var<Scalar> x, int h, int w) {
  const Tensor<Scalar>& t = x.value();
  if (t.h == h && t.w == w) return x;
  return resize(x, rescale_matrix<Scalar>(t.h, h), rescale_matrix<Scalar>(t.w, w));
}

}  // namespace

template <typename Scalar>
Var<Scalar> rescale_pyramid(const FeaturePyramid<Scalar>& pyramid, int uniform_level) {
  if (uniform_level < 3 || uniform_level > 6) throw std::invalid_argument("rescale_pyramid: uniform level must be in 3..6");
  const int h = pyramid.level(uniform_level).value().h;
  const int w = pyramid.level(uniform_level).value().w;
  std::vector<Var<Scalar>> resized;
  for (int i = 2; i <= 6; ++i) resized.push_back(resize_to(pyramid.level(i), h, w));
  return scale(sum(resized), Scalar(1) / Scalar(5));
}

template <typename Scalar>
void init_sea(ParamStore<Scalar>& params, const SeaConfig& cfg, int pyramid_channels, int num_classes, Rng& rng) {
  int in = pyramid_channels;
  for (int k = 1; k <= 4; ++k) {
    add_conv(params, "sea.extract" + std::to_string(k), in, cfg.channels, 3, rng);
    in = cfg.channels;
  }
  add_conv(params, "sea.attention", cfg.channels, pyramid_channels, 1, rng, kPredictorStd);
  add_conv(params, "sea.predict", cfg.channels, num_classes + 1, 1, rng, kPredictorStd);
  if (cfg.fusion == FusionMode::Concate) add_conv(params, "sea.concat_reduce", 2 * pyramid_channels, pyramid_channels, 1, rng);
}

template <typename Scalar>
SeaBranchOutputs<Scalar> enrich(Var<Scalar> pnorm, const SeaConfig& cfg, int num_classes) {
  SeaBranchOutputs<Scalar> out;
  Var<Scalar> x = pnorm;
  for (int k = 1; k <= 4; ++k) x = relu(conv(x, "sea.extract" + std::to_string(k), 3));
  out.intermediate = x;
  out.attention = conv(x, "sea.attention", 1);
  if (out.attention.value().c != pnorm.value().c) throw ShapeError("sea: attention width must equal pyramid width");
  out.logits = conv(x, "sea.predict", 1);
  if (out.logits.value().c != num_classes + 1) throw ShapeError("sea: prediction stream must have C+1 channels");
  out.probabilities = softmax_channels(out.logits);
  if (cfg.fusion == FusionMode::Multiply)
    out.enriched = mul(pnorm, out.attention);
  else
    out.enriched = conv(concat_channels<Scalar>({pnorm, out.attention}), "sea.concat_reduce", 1);
  return out;
}

template <typename Scalar>
FeaturePyramid<Scalar> integrate(const FeaturePyramid<Scalar>& pyramid, Var<Scalar> enriched) {
  FeaturePyramid<Scalar> out;
  for (int i = 2; i <= 6; ++i) {
    const Tensor<Scalar>& level = pyramid.level(i).value();
    out.level(i) = add(resize_to(enriched, level.h, level.w), pyramid.level(i));
  }
  return out;
}

template <typename Scalar>
double segmentation_loss(const Tensor<Scalar>& probabilities, const LabelMap& target) {
  if (probabilities.n != 1 || probabilities.h != target.rows() || probabilities.w != target.cols())
    throw ShapeError("segmentation_loss: target size does not match probability map");
  double total = 0;
  for (int y = 0; y < probabilities.h; ++y)
    for (int x = 0; x < probabilities.w; ++x) {
      const int label = target(y, x);
      if (label < 0 || label >= probabilities.c) throw std::out_of_range("segmentation_loss: class label out of range");
      total -= std::log(static_cast<double>(probabilities.at(0, label, y, x)));
    }
  return total / (static_cast<double>(probabilities.h) * probabilities.w);
}

template <typename Scalar>
SeaResult<Scalar> sea_forward(const FeaturePyramid<Scalar>& pyramid, const LabelMap* target, const SeaConfig& cfg,
                              int num_classes) {
  if (!cfg.enabled) return {pyramid, std::nullopt, std::nullopt};
  Var<Scalar> pnorm = rescale_pyramid(pyramid, cfg.uniform_level);
  SeaBranchOutputs<Scalar> branch = enrich(pnorm, cfg, num_classes);
  SeaResult<Scalar> result{integrate(pyramid, branch.enriched), std::nullopt, branch};
  if (target != nullptr) {
    const Tensor<Scalar>& logits = branch.logits.value();
    if (target->rows() != logits.h || target->cols() != logits.w)
      throw ShapeError("sea: semantic target must be given at the uniform scale");
    std::vector<int> labels(target->data(), target->data() + target->size());
    for (int l : labels)
      if (l < 0 || l > num_classes) throw std::out_of_range("sea: class label out of range");
    result.loss = softmax_cross_entropy(branch.logits, labels);
  }
  return result;
}

#define SEASEG_INSTANTIATE(S)                                                                                  \
  template Var<S> rescale_pyramid<S>(const FeaturePyramid<S>&, int);                                           \
  template void init_sea<S>(ParamStore<S>&, const SeaConfig&, int, int, Rng&);                                 \
  template SeaBranchOutputs<S> enrich<S>(Var<S>, const SeaConfig&, int);                                       \
  template FeaturePyramid<S> integrate<S>(const FeaturePyramid<S>&, Var<S>);                                   \
  template double segmentation_loss<S>(const Tensor<S>&, const LabelMap&);                                     \
  template SeaResult<S> sea_forward<S>(const FeaturePyramid<S>&, const LabelMap*, const SeaConfig&, int);

SEASEG_INSTANTIATE(float)
SEASEG_INSTANTIATE(double)

}  // namespace seaseg
