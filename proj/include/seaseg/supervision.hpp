#pragma once

// Ground-truth transforms: instance annotations to the semantic label map,
// per-RoI mask targets at 7/14/28, and detection targets for proposals.

#include "seaseg/box.hpp"
#include "seaseg/rle.hpp"
#include "seaseg/types.hpp"

#include <vector>

namespace seaseg {

struct InstanceAnnotation {
  int id = 0;
  int image_id = 0;
  int class_id = 0;
  RleMask mask;
  Box bbox;                 // tight integer box of the mask
  std::uint64_t area = 0;   // number of mask pixels

  // Builds an annotation whose bbox and area are derived from `mask`.
  static InstanceAnnotation from_mask(const BinaryMap& mask, int class_id, int id = 0, int image_id = 0);
};

// Paints instances in decreasing-area order so smaller instances win on
// overlaps. Input order does not matter; equal areas break ties by id.
LabelMap instances_to_semantic_map(const std::vector<InstanceAnnotation>& annotations, int height, int width);

// Nearest-neighbour label sampling with half-pixel centers.
LabelMap downsample_labels(const LabelMap& labels, int height, int width);

// Crops the mask to the pixels the proposal touches, bilinearly resamples
// the crop to 28x28 (edge samples clamp to the crop) and thresholds at 0.5.
// 14 and 7 come from 2x2 average pooling of the next larger target followed
// by the same threshold.
MaskSupervisionSet roi_mask_targets(const BinaryMap& instance_mask, const Box& proposal);
MaskSupervisionSet roi_mask_targets(const InstanceAnnotation& instance, const Box& proposal);

// Thresholded 2x2 average pooling (value >= 0.5 becomes 1).
BinaryMap pool_binary(const BinaryMap& m);

struct DetectionTarget {
  int label = 0;         // 0 = background, otherwise class id
  BoxDeltas deltas{};    // regression target toward the matched gt
  int gt_index = -1;     // highest-IoU gt, -1 when there are none
  double iou = 0.0;
};

std::vector<DetectionTarget> detection_targets(const std::vector<Box>& proposals, const std::vector<Box>& gt_boxes,
                                               const std::vector<int>& gt_classes, double fg_iou = 0.5);

}  // namespace seaseg
