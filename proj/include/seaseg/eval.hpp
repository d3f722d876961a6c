#pragma once

// COCO-style average precision for boxes and masks with remote-sensing area
// ranges and a configurable per-image detection cap.

#include "seaseg/dataio.hpp"
#include "seaseg/detector.hpp"

#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace seaseg {

struct AreaRange {
  std::string name;
  double lo = 0;  // inclusive, pixels^2
  double hi = std::numeric_limits<double>::infinity();  // exclusive
  bool contains(double area) const { return area >= lo && area < hi; }
};

struct EvalConfig {
  std::vector<double> iou_thresholds;  // 0.50:0.05:0.95
  int max_dets = 1000;
  std::vector<AreaRange> area_ranges;  // all, small, medium, large

  EvalConfig();
};

// Undefined values (no ground truth) are std::nullopt.
using Metric = std::optional<double>;

double iou_box(const Box& a, const Box& b);
// 0 when both masks are empty. Throws RleError on a size mismatch.
double iou_mask(const RleMask& a, const RleMask& b);

enum class MatchFlag { TruePositive, FalsePositive, Ignored };

// Greedy matching of detections (rows, sorted by descending score) against
// ground truths (columns). A detection takes the unmatched gt with the
// highest IoU >= threshold, preferring gts that are not ignored. Detections
// matched to an ignored gt, or unmatched and flagged out of range, are Ignored.
std::vector<MatchFlag> match(const Eigen::MatrixXd& ious, const std::vector<bool>& gt_ignore,
                             const std::vector<bool>& det_out_of_range, double threshold);

struct ScoredMatch {
  double score = 0;
  MatchFlag flag = MatchFlag::FalsePositive;
};

// 101-point interpolated AP over the detections of one class pooled across
// images. Ignored entries are dropped. nullopt when num_gt == 0.
Metric average_precision(std::vector<ScoredMatch> matches, int num_gt);

// A detection attached to an image.
struct ResultRecord {
  int image_id = 0;
  DetectionResult det;
};

struct MetricSet {
  Metric ap, ap50, ap75, aps, apm, apl;
  std::map<int, Metric> per_class;  // AP over all thresholds, area "all"
};

struct EvalReport {
  MetricSet box;
  MetricSet mask;
  int num_images = 0;
  int num_gt = 0;
  int num_detections = 0;
};

// Results are cut to the `max_dets` highest scores per image before matching.
// Throws std::invalid_argument for unknown class or image ids.
EvalReport evaluate(const std::vector<ResultRecord>& results, const DatasetManifest& manifest, const EvalConfig& cfg = {});

nlohmann::json to_json(const EvalReport& report, const DatasetManifest& manifest);
std::string format_report(const EvalReport& report, const DatasetManifest& manifest);

// Results file: array of {image_id, category_id, score, bbox, segmentation}.
nlohmann::json results_to_json(const std::vector<ResultRecord>& results);
std::vector<ResultRecord> results_from_json(const nlohmann::json& j);

}  // namespace seaseg
