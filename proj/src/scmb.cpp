#include "seaseg/scmb.hpp"

#include "seaseg/init.hpp"
#include "seaseg/resize.hpp"

#include <algorithm>
#include <cmath>

namespace seaseg {

namespace {

bool has_branch(const std::vector<int>& branches, int size) {
  return std::find(branches.begin(), branches.end(), size) != branches.end();
}

int path_index(int size) { return size == 7 ? 0 : size == 14 ? 1 : 2; }

template <typename Scalar>
Var<Scalar> fcn_trunk(Var<Scalar> roi) {
  Var<Scalar> x = roi;
  for (int k = 1; k <= 4; ++k) x = relu(conv(x, "scmb.fcn" + std::to_string(k), 3));
  return x;
}

template <typename Scalar>
Var<Scalar> bilinear_to(Var<Scalar> x, int size) {
  const Tensor<Scalar>& t = x.value();
  if (t.h == size && t.w == size) return x;
  return resize(x, bilinear_matrix<Scalar>(t.h, size), bilinear_matrix<Scalar>(t.w, size));
}

}  // namespace

template <typename Scalar>
void init_scmb(ParamStore<Scalar>& params, const ScmbConfig& cfg, int roi_channels, int num_classes, Rng& rng) {
  int in = roi_channels;
  for (int k = 1; k <= 4; ++k) {
    add_conv(params, "scmb.fcn" + std::to_string(k), in, cfg.channels, 3, rng);
    in = cfg.channels;
  }
  const int half = cfg.channels / 2;
  for (int p = 1; p <= 3; ++p) {
    add_conv(params, "scmb.reduce" + std::to_string(p), cfg.channels, half, 1, rng);
    add_conv(params, "scmb.guide" + std::to_string(p), half, 1, 1, rng, kPredictorStd);
  }
  const bool concat = cfg.fusion == FusionMode::Concate && !cfg.single_scale_reference;
  const int used = cfg.single_scale_reference ? 1 : static_cast<int>(cfg.branches.size());
  in = concat ? half * used : half;
  for (int k = 1; k <= 4; ++k) {
    add_conv(params, "scmb.fuse" + std::to_string(k), in, cfg.fusion_channels, 3, rng);
    in = cfg.fusion_channels;
  }
  add_conv(params, "scmb.predict", cfg.fusion_channels, num_classes, 1, rng, kPredictorStd);
}

template <typename Scalar>
TridentFeatures<Scalar> trident_forward(Var<Scalar> roi, const ScmbConfig& cfg) {
  const Tensor<Scalar>& r = roi.value();
  if (r.h != 14 || r.w != 14) throw ShapeError("trident_forward: RoI features must be 14x14, got " + r.shape_string());
  Var<Scalar> shared = fcn_trunk(roi);
  TridentFeatures<Scalar> tf;
  const Mat<Scalar> pool = avgpool_matrix<Scalar>(14, 2);
  const Mat<Scalar> up = bilinear_matrix<Scalar>(14, 28);
  tf.f1 = conv(resize(shared, pool, pool), "scmb.reduce1", 1);
  tf.f2 = conv(shared, "scmb.reduce2", 1);
  tf.f3 = conv(resize(shared, up, up), "scmb.reduce3", 1);
  if (tf.f2.value().c * 2 != cfg.channels) throw ShapeError("trident_forward: reduction must halve the trunk width");
  return tf;
}

template <typename Scalar>
GuidancePredictions<Scalar> guidance_forward(const TridentFeatures<Scalar>& tf) {
  GuidancePredictions<Scalar> g;
  for (int p = 0; p < 3; ++p) {
    g.logits[p] = conv(tf.path(kTridentSizes[p]), "scmb.guide" + std::to_string(p + 1), 1);
    g.probabilities[p] = sigmoid(g.logits[p]);
  }
  return g;
}

template <typename Scalar>
Var<Scalar> fusion_forward(const TridentFeatures<Scalar>& tf, const ScmbConfig& cfg, int num_classes) {
  std::vector<Var<Scalar>> parts;
  for (int size : kTridentSizes)
    if (has_branch(cfg.branches, size)) parts.push_back(bilinear_to(tf.path(size), 28));
  if (parts.empty()) throw std::invalid_argument("fusion_forward: empty branch set");
  Var<Scalar> x;
  if (cfg.fusion == FusionMode::Concate) {
    x = parts.size() == 1 ? parts.front() : concat_channels(parts);
  } else {
    x = parts.front();
    for (std::size_t i = 1; i < parts.size(); ++i) x = mul(x, parts[i]);
  }
  for (int k = 1; k <= 4; ++k) x = relu(conv(x, "scmb.fuse" + std::to_string(k), 3));
  Var<Scalar> logits = conv(x, "scmb.predict", 1);
  if (logits.value().c != num_classes) throw ShapeError("fusion_forward: predictor must have C channels");
  return logits;
}

template <typename Scalar>
Tensor<Scalar> mask_targets_tensor(const std::vector<MaskSupervisionSet>& targets, int size) {
  Tensor<Scalar> t(static_cast<int>(targets.size()), 1, size, size);
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const BinaryMap& m = targets[r].at_size(size);
    if (m.rows() != size || m.cols() != size) throw ShapeError("mask target size mismatch");
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) t.at(static_cast<int>(r), 0, y, x) = static_cast<Scalar>(m(y, x));
  }
  return t;
}

template <typename Scalar>
ScmbLosses<Scalar> scmb_losses(const GuidancePredictions<Scalar>& guidance, Var<Scalar> fusion_logits,
                               const std::vector<MaskSupervisionSet>& targets, const std::vector<int>& gt_classes,
                               const ScmbConfig& cfg) {
  const int rois = fusion_logits.value().n;
  if (static_cast<int>(targets.size()) != rois || static_cast<int>(gt_classes.size()) != rois)
    throw ShapeError("scmb_losses: one target and class per RoI required");
  std::vector<Var<Scalar>> guide_terms;
  for (int size : kTridentSizes) {
    if (!has_branch(cfg.branches, size)) continue;
    const Scalar norm = static_cast<Scalar>(rois) * size * size;
    guide_terms.push_back(sigmoid_bce(guidance.logits[path_index(size)], mask_targets_tensor<Scalar>(targets, size),
                                      Tensor<Scalar>{}, norm));
  }
  std::vector<int> channels;
  for (int c : gt_classes) {
    if (c < 1 || c > fusion_logits.value().c) throw std::out_of_range("scmb_losses: invalid class id");
    channels.push_back(c - 1);
  }
  ScmbLosses<Scalar> out;
  out.scg = guide_terms.size() == 1 ? guide_terms.front() : weighted_sum(guide_terms, std::vector<Scalar>(guide_terms.size(), 1));
  out.ff = sigmoid_bce(select_channel(fusion_logits, channels), mask_targets_tensor<Scalar>(targets, 28), Tensor<Scalar>{},
                       static_cast<Scalar>(rois) * 28 * 28);
  out.total = weighted_sum<Scalar>({out.scg, out.ff}, {Scalar(1), Scalar(1)});
  return out;
}

double binary_cross_entropy(const Eigen::Ref<const Eigen::MatrixXd>& pred, const BinaryMap& target, double eps) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw ShapeError("binary_cross_entropy: size mismatch");
  double total = 0;
  for (Eigen::Index y = 0; y < pred.rows(); ++y)
    for (Eigen::Index x = 0; x < pred.cols(); ++x) {
      const double p = std::clamp(pred(y, x), eps, 1.0 - eps);
      total -= target(y, x) ? std::log(p) : std::log(1.0 - p);
    }
  return total / static_cast<double>(pred.size());
}

double scg_loss(const std::array<Eigen::MatrixXd, 3>& preds, const MaskSupervisionSet& targets,
                const std::vector<int>& branches, double eps) {
  double total = 0;
  for (int size : kTridentSizes)
    if (has_branch(branches, size)) total += binary_cross_entropy(preds[path_index(size)], targets.at_size(size), eps);
  return total;
}

double scmb_loss(const std::vector<Eigen::MatrixXd>& fusion_probs, const std::array<Eigen::MatrixXd, 3>& guidance_preds,
                 const MaskSupervisionSet& targets, int gt_class, const std::vector<int>& branches, double eps) {
  if (gt_class < 1 || gt_class > static_cast<int>(fusion_probs.size())) throw std::out_of_range("scmb_loss: invalid class id");
  return scg_loss(guidance_preds, targets, branches, eps) + binary_cross_entropy(fusion_probs[gt_class - 1], targets.m28, eps);
}

template <typename Scalar>
void init_deconv_mask_head(ParamStore<Scalar>& params, const ScmbConfig& cfg, int roi_channels, int num_classes, Rng& rng) {
  int in = roi_channels;
  for (int k = 1; k <= 4; ++k) {
    add_conv(params, "mask.fcn" + std::to_string(k), in, cfg.channels, 3, rng);
    in = cfg.channels;
  }
  add_deconv(params, "mask.deconv", cfg.channels, cfg.channels, rng);
  add_conv(params, "mask.predict", cfg.channels, num_classes, 1, rng, kPredictorStd);
}

template <typename Scalar>
Var<Scalar> deconv_mask_head(Var<Scalar> roi) {
  Graph<Scalar>& g = *roi.graph;
  Var<Scalar> x = roi;
  for (int k = 1; k <= 4; ++k) x = relu(conv(x, "mask.fcn" + std::to_string(k), 3));
  x = relu(deconv2x2(x, g.param("mask.deconv.w"), g.param("mask.deconv.b")));
  return conv(x, "mask.predict", 1);
}

template <typename Scalar>
Var<Scalar> single_scale_mask_head(Var<Scalar> roi) {
  Var<Scalar> x = roi;
  for (int k = 1; k <= 4; ++k) x = relu(conv(x, "scmb.fcn" + std::to_string(k), 3));
  x = conv(x, "scmb.reduce2", 1);
  const Mat<Scalar> up = bilinear_matrix<Scalar>(14, 28);
  x = resize(x, up, up);
  for (int k = 1; k <= 4; ++k) x = relu(conv(x, "scmb.fuse" + std::to_string(k), 3));
  return conv(x, "scmb.predict", 1);
}

#define SEASEG_INSTANTIATE(S)                                                                                        \
  template void init_scmb<S>(ParamStore<S>&, const ScmbConfig&, int, int, Rng&);                                     \
  template TridentFeatures<S> trident_forward<S>(Var<S>, const ScmbConfig&);                                         \
  template GuidancePredictions<S> guidance_forward<S>(const TridentFeatures<S>&);                                    \
  template Var<S> fusion_forward<S>(const TridentFeatures<S>&, const ScmbConfig&, int);                              \
  template Tensor<S> mask_targets_tensor<S>(const std::vector<MaskSupervisionSet>&, int);                            \
  template ScmbLosses<S> scmb_losses<S>(const GuidancePredictions<S>&, Var<S>, const std::vector<MaskSupervisionSet>&, \
                                        const std::vector<int>&, const ScmbConfig&);                                 \
  template void init_deconv_mask_head<S>(ParamStore<S>&, const ScmbConfig&, int, int, Rng&);                         \
  template Var<S> deconv_mask_head<S>(Var<S>);                                                                       \
  template Var<S> single_scale_mask_head<S>(Var<S>);

SEASEG_INSTANTIATE(float)
SEASEG_INSTANTIATE(double)

}  // namespace seaseg
