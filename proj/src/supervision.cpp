#include "seaseg/supervision.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace seaseg {

InstanceAnnotation InstanceAnnotation::from_mask(const BinaryMap& mask, int class_id, int id, int image_id) {
  InstanceAnnotation a;
  a.id = id;
  a.image_id = image_id;
  a.class_id = class_id;
  a.mask = rle_encode(mask);
  a.bbox = rle_bbox(a.mask);
  a.area = rle_area(a.mask);
  return a;
}

LabelMap instances_to_semantic_map(const std::vector<InstanceAnnotation>& annotations, int height, int width) {
  LabelMap labels = LabelMap::Zero(height, width);
  std::vector<std::size_t> order(annotations.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = annotations[a];
    const auto& y = annotations[b];
    if (x.area != y.area) return x.area > y.area;
    if (x.id != y.id) return x.id > y.id;
    return x.class_id > y.class_id;
  });
  for (std::size_t idx : order) {
    const InstanceAnnotation& a = annotations[idx];
    if (a.mask.height != height || a.mask.width != width) throw std::invalid_argument("instances_to_semantic_map: mask/image size mismatch");
    const BinaryMap m = rle_decode(a.mask);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        if (m(y, x)) labels(y, x) = a.class_id;
  }
  return labels;
}

LabelMap downsample_labels(const LabelMap& labels, int height, int width) {
  LabelMap out(height, width);
  const double sy = static_cast<double>(labels.rows()) / height;
  const double sx = static_cast<double>(labels.cols()) / width;
  for (int y = 0; y < height; ++y) {
    const auto iy = std::min<Eigen::Index>(static_cast<Eigen::Index>((y + 0.5) * sy), labels.rows() - 1);
    for (int x = 0; x < width; ++x) {
      const auto ix = std::min<Eigen::Index>(static_cast<Eigen::Index>((x + 0.5) * sx), labels.cols() - 1);
      out(y, x) = labels(iy, ix);
    }
  }
  return out;
}

BinaryMap pool_binary(const BinaryMap& m) {
  BinaryMap out(m.rows() / 2, m.cols() / 2);
  for (Eigen::Index y = 0; y < out.rows(); ++y)
    for (Eigen::Index x = 0; x < out.cols(); ++x) {
      const int s = m(2 * y, 2 * x) + m(2 * y, 2 * x + 1) + m(2 * y + 1, 2 * x) + m(2 * y + 1, 2 * x + 1);
      out(y, x) = s * 2 >= 4 ? 1 : 0;
    }
  return out;
}

MaskSupervisionSet roi_mask_targets(const BinaryMap& mask, const Box& proposal) {
  if (proposal.w < 1 || proposal.h < 1) throw std::invalid_argument("roi_mask_targets: degenerate proposal box");
  const Eigen::Index H = mask.rows(), W = mask.cols();
  auto pixel = [&](Eigen::Index y, Eigen::Index x) -> double {
    if (y < 0 || y >= H || x < 0 || x >= W) return 0.0;
    return mask(y, x);
  };
  // Sampling stays inside the crop: pixels touched by the proposal.
  const double cx0 = std::floor(proposal.x), cx1 = std::ceil(proposal.x2()) - 1;
  const double cy0 = std::floor(proposal.y), cy1 = std::ceil(proposal.y2()) - 1;
  MaskSupervisionSet t;
  t.m28 = BinaryMap::Zero(28, 28);
  for (int i = 0; i < 28; ++i) {
    // Pixel centers sit at integer + 0.5, hence the -0.5 shift into index space.
    const double v = std::clamp(proposal.y + (i + 0.5) * proposal.h / 28.0 - 0.5, cy0, cy1);
    const auto y0 = static_cast<Eigen::Index>(std::floor(v));
    const double fy = v - static_cast<double>(y0);
    for (int j = 0; j < 28; ++j) {
      const double u = std::clamp(proposal.x + (j + 0.5) * proposal.w / 28.0 - 0.5, cx0, cx1);
      const auto x0 = static_cast<Eigen::Index>(std::floor(u));
      const double fx = u - static_cast<double>(x0);
      const double value = (1 - fy) * ((1 - fx) * pixel(y0, x0) + fx * pixel(y0, x0 + 1)) +
                           fy * ((1 - fx) * pixel(y0 + 1, x0) + fx * pixel(y0 + 1, x0 + 1));
      t.m28(i, j) = value >= 0.5 ? 1 : 0;
    }
  }
  t.m14 = pool_binary(t.m28);
  t.m7 = pool_binary(t.m14);
  return t;
}

MaskSupervisionSet roi_mask_targets(const InstanceAnnotation& instance, const Box& proposal) {
  return roi_mask_targets(rle_decode(instance.mask), proposal);
}

std::vector<DetectionTarget> detection_targets(const std::vector<Box>& proposals, const std::vector<Box>& gt_boxes,
                                               const std::vector<int>& gt_classes, double fg_iou) {
  if (gt_boxes.size() != gt_classes.size()) throw std::invalid_argument("detection_targets: boxes/classes size mismatch");
  std::vector<DetectionTarget> out(proposals.size());
  for (std::size_t p = 0; p < proposals.size(); ++p) {
    DetectionTarget& t = out[p];
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
      const double v = iou(proposals[p], gt_boxes[g]);
      if (v > t.iou || t.gt_index < 0) {
        t.iou = v;
        t.gt_index = static_cast<int>(g);
      }
    }
    if (t.gt_index >= 0 && t.iou >= fg_iou) {
      t.label = gt_classes[t.gt_index];
      t.deltas = encode_deltas(proposals[p], gt_boxes[t.gt_index]);
    }
  }
  return out;
}

}  // namespace seaseg
