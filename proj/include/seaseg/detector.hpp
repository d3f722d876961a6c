#pragma once

// Two-stage assembly: backbone + FPN, semantic attention, proposals,
// RoI-Align, detection head, mask head (SCMB or a baseline), the weighted
// joint loss, inference post-processing and the SGD update.

#include "seaseg/config.hpp"
#include "seaseg/fpn_backbone.hpp"
#include "seaseg/rle.hpp"
#include "seaseg/scmb.hpp"
#include "seaseg/sea.hpp"
#include "seaseg/supervision.hpp"

#include <array>
#include <optional>

namespace seaseg {

enum class ProposalSource { GtJitter, RpnLite, AnchorGrid, External };

struct Proposal {
  Box box;
  double score = 1.0;
  ProposalSource source = ProposalSource::GtJitter;
};

struct DetectionResult {
  Box box;
  int class_id = 0;
  double score = 0.0;
  RleMask mask;  // image resolution, nonzero only inside box
};

struct JointLossReport {
  double l_detection = 0;
  double l_segmentation = 0;
  double l_scmb = 0;
  double l_total = 0;
  std::array<double, 3> alpha{1.0, 1.0, 1.0};
};

struct NonFiniteLoss : std::runtime_error {
  JointLossReport report;
  NonFiniteLoss(const std::string& what, JointLossReport r) : std::runtime_error(what), report(r) {}
};

// Weighted sum of the three loss families; throws on non-finite input.
JointLossReport joint_loss(double l_detection, double l_segmentation, double l_scmb,
                           std::array<double, 3> alpha = {1.0, 1.0, 1.0});

// FPN level for a box: clamp(floor(4 + log2(sqrt(w*h)/224)), 2, 5).
int assign_level(const Box& box);

// Builds every parameter of the configured model.
template <typename Scalar>
ParamStore<Scalar> init_model(const ModelConfig& cfg, std::uint64_t seed);

// GT_JITTER proposals: `jitter_copies` noisy copies of each gt box plus
// `random_boxes` uniformly placed boxes, all clipped to the image.
std::vector<Proposal> propose_gt_jitter(const std::vector<Box>& gt_boxes, int height, int width, const ProposalConfig& cfg,
                                        Rng& rng);

// Dense multi-scale anchor boxes used as inference proposals when the model
// was trained with GT_JITTER proposals.
std::vector<Box> anchor_grid(int height, int width, const InferConfig& cfg);

// Greedy class-wise NMS: keeps a detection unless a kept detection of the
// same class overlaps it with IoU > threshold. Output is sorted by score.
std::vector<DetectionResult> nms(std::vector<DetectionResult> detections, double iou_threshold);

// NMS followed by truncation to the top `max_dets` scores.
std::vector<DetectionResult> select_detections(std::vector<DetectionResult> candidates, const InferConfig& cfg);

// Pastes a 28x28 probability map into `box` at image resolution, bilinear
// resampled and thresholded. Pixels whose centers fall outside the box stay 0.
BinaryMap paste_mask(const Eigen::MatrixXd& probs, const Box& box, int height, int width, double threshold = 0.5);

template <typename Scalar>
Tensor<Scalar> image_tensor(const Image& image);

// One training image with cached ground truth.
struct TrainSample {
  Image image;
  std::vector<InstanceAnnotation> annotations;
  std::vector<BinaryMap> masks;  // decoded annotation masks
  LabelMap semantic;             // image-resolution semantic labels

  static TrainSample make(Image image, std::vector<InstanceAnnotation> annotations);
};

// Detection-head outputs for a batch of RoIs.
template <typename Scalar>
struct HeadOutputs {
  Var<Scalar> class_logits;  // (R, C+1, 1, 1)
  Var<Scalar> box_deltas;    // (R, 4C, 1, 1), normalized by kDeltaWeights
};

// Regression targets are encode_deltas() scaled by these weights.
inline constexpr std::array<double, 4> kDeltaWeights{10.0, 10.0, 5.0, 5.0};

template <typename Scalar>
HeadOutputs<Scalar> detection_head(Var<Scalar> roi_features);

// Softmax cross-entropy over all RoIs plus smooth-L1 (beta = 1) on the
// ground-truth class deltas of foreground RoIs, both normalized by the RoI
// count.
template <typename Scalar>
Var<Scalar> detection_loss(const HeadOutputs<Scalar>& out, const std::vector<DetectionTarget>& targets);

// RoI-Align every box on its assigned level of a pyramid.
template <typename Scalar>
Var<Scalar> pyramid_roi_align(const FeaturePyramid<Scalar>& pyramid, const std::vector<Box>& boxes, const HeadConfig& cfg);

template <typename Scalar>
struct TrainForward {
  Var<Scalar> total;
  Var<Scalar> detection;
  Var<Scalar> segmentation;
  Var<Scalar> scmb;
  JointLossReport report;
  std::vector<Proposal> proposals;
  int sampled_rois = 0;
  int mask_rois = 0;
};

// Builds the full training graph for one image on `g`.
template <typename Scalar>
TrainForward<Scalar> forward_train(Graph<Scalar>& g, const ModelConfig& cfg, const TrainSample& sample, Rng& rng);

struct InferOptions {
  // When set, these boxes replace the configured proposal source.
  std::optional<std::vector<Box>> proposals;
  int roi_batch = 256;
};

template <typename Scalar>
std::vector<DetectionResult> infer(const ParamStore<Scalar>& params, const ModelConfig& cfg, const Image& image,
                                   const InferOptions& options = {});

// Intermediate maps used for figures.
template <typename Scalar>
struct VizMaps {
  std::array<Tensor<Scalar>, 5> before;   // FPN levels
  std::array<Tensor<Scalar>, 5> after;    // SEA output levels
  std::optional<Tensor<Scalar>> attention;
  std::optional<Tensor<Scalar>> probabilities;
};

template <typename Scalar>
VizMaps<Scalar> feature_maps(const ParamStore<Scalar>& params, const ModelConfig& cfg, const Image& image);

template <typename Scalar>
struct SgdState {
  std::map<std::string, Mat<Scalar>> momentum;
  long step = 0;
};

double learning_rate(const TrainConfig& cfg, long step);

// v = momentum * v + (grad + weight_decay * w);  w -= lr * v.
template <typename Scalar>
void sgd_update(ParamStore<Scalar>& params, const std::map<std::string, Mat<Scalar>>& grads, SgdState<Scalar>& state,
                double lr, double momentum, double weight_decay);

template <typename Scalar>
JointLossReport train_step(ParamStore<Scalar>& params, SgdState<Scalar>& state, const ModelConfig& cfg,
                           const TrainSample& sample, Rng& rng);

}  // namespace seaseg
