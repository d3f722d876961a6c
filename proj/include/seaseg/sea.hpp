#pragma once

// Semantic attention over the feature pyramid: rescale every level to one
// uniform scale and average, run a supervised segmentation branch whose
// attention stream gates the averaged map, then add the gated map back onto
// each level.

#include "seaseg/fpn_backbone.hpp"
#include "seaseg/types.hpp"

#include <optional>

namespace seaseg {

// Average of all five levels resized to the spatial size of `uniform_level`
// (bilinear up, average-pool down).
template <typename Scalar>
Var<Scalar> rescale_pyramid(const FeaturePyramid<Scalar>& pyramid, int uniform_level);

template <typename Scalar>
struct SeaBranchOutputs {
  Var<Scalar> intermediate;   // four 3x3 convs
  Var<Scalar> attention;      // 1x1 conv, pyramid width
  Var<Scalar> logits;         // 1x1 conv, C+1 channels
  Var<Scalar> probabilities;  // softmax over classes
  Var<Scalar> enriched;       // pnorm (.) attention, or the CONCATE reduction
};

template <typename Scalar>
void init_sea(ParamStore<Scalar>& params, const SeaConfig& cfg, int pyramid_channels, int num_classes, Rng& rng);

template <typename Scalar>
SeaBranchOutputs<Scalar> enrich(Var<Scalar> pnorm, const SeaConfig& cfg, int num_classes);

// F_out_i = resize(enriched -> level i) + P_i.
template <typename Scalar>
FeaturePyramid<Scalar> integrate(const FeaturePyramid<Scalar>& pyramid, Var<Scalar> enriched);

// Mean over pixels of -log p[target]. Probabilities are (1, C+1, h, w).
template <typename Scalar>
double segmentation_loss(const Tensor<Scalar>& probabilities, const LabelMap& target);

template <typename Scalar>
struct SeaResult {
  FeaturePyramid<Scalar> features;
  std::optional<Var<Scalar>> loss;
  std::optional<SeaBranchOutputs<Scalar>> branch;  // absent when disabled
};

// Full module. `target` is the semantic label map at the uniform scale; the
// loss is produced only when it is given. Disabled => input returned as is.
template <typename Scalar>
SeaResult<Scalar> sea_forward(const FeaturePyramid<Scalar>& pyramid, const LabelMap* target, const SeaConfig& cfg,
                              int num_classes);

}  // namespace seaseg
