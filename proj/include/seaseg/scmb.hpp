#pragma once

// Scale complementary mask branch: a shared FCN trunk feeds three paths at
// 7x7, 14x14 and 28x28, each with its own supervised guidance prediction,
// and the paths are fused at 28x28 into per-class mask logits.

#include "seaseg/config.hpp"
#include "seaseg/ops.hpp"
#include "seaseg/types.hpp"

#include <array>

namespace seaseg {

inline constexpr std::array<int, 3> kTridentSizes{7, 14, 28};

template <typename Scalar>
struct TridentFeatures {
  Var<Scalar> f1;  // (R, channels/2, 7, 7)
  Var<Scalar> f2;  // (R, channels/2, 14, 14)
  Var<Scalar> f3;  // (R, channels/2, 28, 28)

  [[nodiscard]] Var<Scalar> path(int size) const { return size == 7 ? f1 : size == 14 ? f2 : f3; }
};

template <typename Scalar>
struct GuidancePredictions {
  std::array<Var<Scalar>, 3> logits;         // one channel each
  std::array<Var<Scalar>, 3> probabilities;  // sigmoid(logits)
};

template <typename Scalar>
void init_scmb(ParamStore<Scalar>& params, const ScmbConfig& cfg, int roi_channels, int num_classes, Rng& rng);

template <typename Scalar>
TridentFeatures<Scalar> trident_forward(Var<Scalar> roi, const ScmbConfig& cfg);

template <typename Scalar>
GuidancePredictions<Scalar> guidance_forward(const TridentFeatures<Scalar>& tf);

// Per-class mask logits (R, C, 28, 28) from the paths listed in
// cfg.branches.
template <typename Scalar>
Var<Scalar> fusion_forward(const TridentFeatures<Scalar>& tf, const ScmbConfig& cfg, int num_classes);

template <typename Scalar>
struct ScmbLosses {
  Var<Scalar> scg;    // sum of the guidance path losses in the branch set
  Var<Scalar> ff;     // fused prediction loss on the ground-truth class
  Var<Scalar> total;  // scg + ff
};

// Losses are means over pixels and over the given RoIs.
template <typename Scalar>
ScmbLosses<Scalar> scmb_losses(const GuidancePredictions<Scalar>& guidance, Var<Scalar> fusion_logits,
                               const std::vector<MaskSupervisionSet>& targets, const std::vector<int>& gt_classes,
                               const ScmbConfig& cfg);

// Plain-value forms of the losses on probabilities, clamped to [eps, 1-eps].
double binary_cross_entropy(const Eigen::Ref<const Eigen::MatrixXd>& pred, const BinaryMap& target, double eps = 1e-12);
double scg_loss(const std::array<Eigen::MatrixXd, 3>& preds, const MaskSupervisionSet& targets,
                const std::vector<int>& branches, double eps = 1e-12);
// fusion_probs holds one 28x28 map per class; only gt_class (1-based) is used.
double scmb_loss(const std::vector<Eigen::MatrixXd>& fusion_probs, const std::array<Eigen::MatrixXd, 3>& guidance_preds,
                 const MaskSupervisionSet& targets, int gt_class, const std::vector<int>& branches, double eps = 1e-12);

// Mask head used when SCMB is disabled: FCN, 2x2 deconv, 1x1 predictor.
template <typename Scalar>
void init_deconv_mask_head(ParamStore<Scalar>& params, const ScmbConfig& cfg, int roi_channels, int num_classes, Rng& rng);
template <typename Scalar>
Var<Scalar> deconv_mask_head(Var<Scalar> roi);

// Straight-line single-scale head that shares SCMB parameter names: trunk,
// 14x14 reduction, x2 bilinear, fusion convs, predictor. Equal to SCMB with
// branches {14} by construction of the math, but written independently.
template <typename Scalar>
Var<Scalar> single_scale_mask_head(Var<Scalar> roi);

// Stacks the size x size targets of every RoI into (R, 1, size, size).
template <typename Scalar>
Tensor<Scalar> mask_targets_tensor(const std::vector<MaskSupervisionSet>& targets, int size);

}  // namespace seaseg
