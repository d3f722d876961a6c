#pragma once

// Reference implementations used only by the tests. Each one is written from
// the definition, in a different form from the library code it checks.

#include "seaseg/detector.hpp"
#include "seaseg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <tuple>
#include <vector>

namespace oracle {

using seaseg::Box;

inline double tent(double d) { return std::max(0.0, 1.0 - std::abs(d)); }

// Bilinear resize (half-pixel centers, source clamped to [0, n-1]) evaluated
// with the tent kernel at every output pixel.
inline Eigen::MatrixXd bilinear_resize(const Eigen::MatrixXd& in, int out_h, int out_w) {
  Eigen::MatrixXd out(out_h, out_w);
  const auto H = in.rows(), W = in.cols();
  for (int i = 0; i < out_h; ++i)
    for (int j = 0; j < out_w; ++j) {
      const double sy = std::clamp((i + 0.5) * H / out_h - 0.5, 0.0, static_cast<double>(H - 1));
      const double sx = std::clamp((j + 0.5) * W / out_w - 0.5, 0.0, static_cast<double>(W - 1));
      double v = 0;
      for (Eigen::Index p = 0; p < H; ++p)
        for (Eigen::Index q = 0; q < W; ++q) v += tent(sy - p) * tent(sx - q) * in(p, q);
      out(i, j) = v;
    }
  return out;
}

inline Eigen::MatrixXd average_pool(const Eigen::MatrixXd& in, int factor) {
  Eigen::MatrixXd out(in.rows() / factor, in.cols() / factor);
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
      double s = 0;
      for (int a = 0; a < factor; ++a)
        for (int b = 0; b < factor; ++b) s += in(i * factor + a, j * factor + b);
      out(i, j) = s / (factor * factor);
    }
  return out;
}

// One bilinear sample of a feature plane at continuous cell coordinates
// (cell centers at integers), zero outside [-1, size] and clamped inside.
inline double feature_sample(const Eigen::MatrixXd& f, double y, double x) {
  const auto H = static_cast<double>(f.rows()), W = static_cast<double>(f.cols());
  if (y < -1.0 || y > H || x < -1.0 || x > W) return 0.0;
  y = std::clamp(y, 0.0, H - 1);
  x = std::clamp(x, 0.0, W - 1);
  double v = 0;
  for (Eigen::Index p = 0; p < f.rows(); ++p)
    for (Eigen::Index q = 0; q < f.cols(); ++q) v += tent(y - p) * tent(x - q) * f(p, q);
  return v;
}

// RoI-Align for one box on one plane: mean of sampling^2 samples per bin at
// regular sub-bin positions, image coordinates mapped by x / stride - 0.5.
inline Eigen::MatrixXd roi_align(const Eigen::MatrixXd& f, const Box& box, double stride, int out, int sampling) {
  Eigen::MatrixXd r(out, out);
  for (int i = 0; i < out; ++i)
    for (int j = 0; j < out; ++j) {
      double acc = 0;
      for (int a = 0; a < sampling; ++a)
        for (int b = 0; b < sampling; ++b) {
          const double img_y = box.y + (i + (a + 0.5) / sampling) * box.h / out;
          const double img_x = box.x + (j + (b + 0.5) / sampling) * box.w / out;
          acc += feature_sample(f, img_y / stride - 0.5, img_x / stride - 0.5);
        }
      r(i, j) = acc / (sampling * sampling);
    }
  return r;
}

// Greedy NMS characterised as the unique subset S in which a detection is
// kept iff no higher-scored kept detection of the same class overlaps it by
// more than the threshold. Found by enumerating every subset.
inline std::vector<std::size_t> nms_subset(const std::vector<seaseg::DetectionResult>& dets, double thr) {
  const std::size_t n = dets.size();
  std::vector<std::size_t> found;
  int solutions = 0;
  for (std::uint64_t mask = 0; mask < (1ULL << n); ++mask) {
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i) {
      bool suppressed = false;
      for (std::size_t j = 0; j < n; ++j)
        if ((mask >> j & 1) && j != i && dets[j].class_id == dets[i].class_id &&
            (dets[j].score > dets[i].score || (dets[j].score == dets[i].score && j < i)) &&
            seaseg::iou(dets[i].box, dets[j].box) > thr)
          suppressed = true;
      const bool kept = mask >> i & 1;
      ok = kept == !suppressed;
    }
    if (ok) {
      ++solutions;
      found.clear();
      for (std::size_t i = 0; i < n; ++i)
        if (mask >> i & 1) found.push_back(i);
    }
  }
  if (solutions != 1) throw std::logic_error("nms oracle: fixpoint not unique");
  return found;
}

// Patch origins by scanning every admissible integer origin.
inline std::vector<int> tile_origins(int dim, int patch, int stride) {
  if (dim <= patch) return {0};
  std::vector<int> out;
  for (int o = 0; o <= dim - patch; ++o)
    if (o % stride == 0 || o == dim - patch) out.push_back(o);
  return out;
}

// Semantic label at every pixel: the class of the smallest covering
// instance; among equal areas the lower id wins.
inline seaseg::LabelMap paint_order(const std::vector<std::set<std::pair<int, int>>>& pixel_sets,
                                    const std::vector<int>& classes, const std::vector<int>& ids, int h, int w) {
  seaseg::LabelMap out = seaseg::LabelMap::Zero(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int best = -1;
      for (std::size_t k = 0; k < pixel_sets.size(); ++k) {
        if (!pixel_sets[k].count({y, x})) continue;
        if (best < 0 || pixel_sets[k].size() < pixel_sets[best].size() ||
            (pixel_sets[k].size() == pixel_sets[best].size() && ids[k] < ids[best]))
          best = static_cast<int>(k);
      }
      if (best >= 0) out(y, x) = classes[best];
    }
  return out;
}

inline double bce(double p, double t) { return -(t * std::log(p) + (1 - t) * std::log(1 - p)); }
inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// ---- evaluation ----

// Exhaustive matching: among all injective assignments of detections (in
// score order) to gts with IoU >= thr, the lexicographically best one where
// each detection prefers a regular gt, then an ignored gt, then none, and
// higher IoU then lower gt index within a kind. Returns +1 TP, 0 FP, -1 ignored.
inline std::vector<int> exhaustive_match(const std::vector<std::vector<double>>& ious, const std::vector<bool>& gt_ignore,
                                         const std::vector<bool>& det_out, double thr) {
  const std::size_t D = ious.size(), G = gt_ignore.size();
  using Key = std::tuple<int, double, int>;  // smaller is better
  auto key = [&](std::size_t d, int g) -> Key {
    if (g < 0) return {2, 0.0, 0};
    return {gt_ignore[g] ? 1 : 0, -ious[d][g], g};
  };
  std::vector<int> best_assign, cur(D, -1);
  std::vector<Key> best_keys;
  bool have = false;
  std::function<void(std::size_t, std::vector<bool>&, std::vector<Key>&)> rec = [&](std::size_t d, std::vector<bool>& used,
                                                                                     std::vector<Key>& keys) {
    if (d == D) {
      if (!have || keys < best_keys) {
        have = true;
        best_keys = keys;
        best_assign = cur;
      }
      return;
    }
    for (int g = -1; g < static_cast<int>(G); ++g) {
      if (g >= 0 && (used[g] || ious[d][g] < thr)) continue;
      if (g >= 0) used[g] = true;
      cur[d] = g;
      keys.push_back(key(d, g));
      rec(d + 1, used, keys);
      keys.pop_back();
      if (g >= 0) used[g] = false;
    }
  };
  std::vector<bool> used(G, false);
  std::vector<Key> keys;
  rec(0, used, keys);
  std::vector<int> flags(D);
  for (std::size_t d = 0; d < D; ++d) {
    const int g = best_assign[d];
    if (g >= 0) flags[d] = gt_ignore[g] ? -1 : 1;
    else flags[d] = det_out[d] ? -1 : 0;
  }
  return flags;
}

// AP from the prefix points of the ranked list: at each of the 101 recall
// levels take the best precision among prefixes reaching that recall.
inline std::optional<double> prefix_ap(const std::vector<std::pair<double, int>>& scored_flags, int num_gt) {
  if (num_gt == 0) return std::nullopt;
  std::vector<std::pair<double, int>> v;
  for (const auto& sf : scored_flags)
    if (sf.second >= 0) v.push_back(sf);
  std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<double> prec, rec;
  for (std::size_t k = 1; k <= v.size(); ++k) {
    int tp = 0;
    for (std::size_t i = 0; i < k; ++i) tp += v[i].second;
    prec.push_back(static_cast<double>(tp) / static_cast<double>(k));
    rec.push_back(static_cast<double>(tp) / num_gt);
  }
  double sum = 0;
  for (int r = 0; r <= 100; ++r) {
    double best = 0;
    for (std::size_t k = 0; k < prec.size(); ++k)
      if (rec[k] >= r / 100.0) best = std::max(best, prec[k]);
    sum += best;
  }
  return sum / 101.0;
}

inline double box_iou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double ih = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = iw * ih;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// Pixel-counting mask IoU on decoded maps.
inline double mask_iou(const seaseg::RleMask& a, const seaseg::RleMask& b) {
  if (a.height == 0 || b.height == 0) return 0.0;
  const seaseg::BinaryMap ma = seaseg::rle_decode(a), mb = seaseg::rle_decode(b);
  double inter = 0, uni = 0;
  for (Eigen::Index i = 0; i < ma.size(); ++i) {
    inter += (ma.data()[i] && mb.data()[i]) ? 1 : 0;
    uni += (ma.data()[i] || mb.data()[i]) ? 1 : 0;
  }
  return uni > 0 ? inter / uni : 0.0;
}

struct BruteMetrics {
  std::optional<double> ap, ap50, ap75, aps, apm, apl;
};

// Direct evaluation: per family, threshold, area range and class, exhaustive
// matching per image, prefix AP over the pooled list, then plain means over
// the defined entries.
inline BruteMetrics brute_evaluate(const std::vector<seaseg::ResultRecord>& results, const seaseg::DatasetManifest& manifest,
                                   bool masks, const seaseg::EvalConfig& cfg) {
  std::vector<int> image_ids, class_ids;
  for (const auto& r : manifest.images) image_ids.push_back(r.id);
  for (const auto& c : manifest.categories) class_ids.push_back(c.id);
  std::sort(image_ids.begin(), image_ids.end());
  std::sort(class_ids.begin(), class_ids.end());

  std::map<int, std::vector<seaseg::DetectionResult>> kept;
  for (int img : image_ids) {
    std::vector<seaseg::DetectionResult> d;
    for (const auto& r : results)
      if (r.image_id == img) d.push_back(r.det);
    std::stable_sort(d.begin(), d.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
    if (static_cast<int>(d.size()) > cfg.max_dets) d.resize(static_cast<std::size_t>(cfg.max_dets));
    kept[img] = d;
  }
  auto det_area = [&](const seaseg::DetectionResult& d) {
    if (!masks) return d.box.w * d.box.h;
    if (d.mask.height == 0) return 0.0;
    return static_cast<double>(seaseg::rle_decode(d.mask).cast<int>().sum());
  };

  // values[range][threshold] -> per-class AP list
  std::vector<std::vector<std::vector<std::optional<double>>>> values(
      cfg.area_ranges.size(), std::vector<std::vector<std::optional<double>>>(cfg.iou_thresholds.size()));
  for (std::size_t a = 0; a < cfg.area_ranges.size(); ++a) {
    const auto& range = cfg.area_ranges[a];
    for (std::size_t t = 0; t < cfg.iou_thresholds.size(); ++t)
      for (int c : class_ids) {
        std::vector<std::pair<double, int>> pool;
        int num_gt = 0;
        for (int img : image_ids) {
          std::vector<seaseg::DetectionResult> dets;
          for (const auto& d : kept[img])
            if (d.class_id == c) dets.push_back(d);
          std::vector<seaseg::InstanceAnnotation> gts;
          for (const auto& g : manifest.annotations)
            if (g.image_id == img && g.class_id == c) gts.push_back(g);
          std::vector<std::vector<double>> ious(dets.size(), std::vector<double>(gts.size()));
          for (std::size_t i = 0; i < dets.size(); ++i)
            for (std::size_t j = 0; j < gts.size(); ++j)
              ious[i][j] = masks ? mask_iou(dets[i].mask, gts[j].mask) : box_iou(dets[i].box, gts[j].bbox);
          std::vector<bool> gt_ignore, det_out;
          for (const auto& g : gts) {
            const auto area = static_cast<double>(g.area);
            gt_ignore.push_back(!(area >= range.lo && area < range.hi));
            if (!gt_ignore.back()) ++num_gt;
          }
          for (const auto& d : dets) {
            const double area = det_area(d);
            det_out.push_back(!(area >= range.lo && area < range.hi));
          }
          const auto flags = exhaustive_match(ious, gt_ignore, det_out, cfg.iou_thresholds[t]);
          for (std::size_t i = 0; i < dets.size(); ++i) pool.emplace_back(dets[i].score, flags[i]);
        }
        values[a][t].push_back(prefix_ap(pool, num_gt));
      }
  }
  auto mean = [&](std::size_t a, int only_t) -> std::optional<double> {
    double s = 0;
    int n = 0;
    for (std::size_t t = 0; t < cfg.iou_thresholds.size(); ++t) {
      if (only_t >= 0 && static_cast<int>(t) != only_t) continue;
      for (const auto& v : values[a][t])
        if (v) {
          s += *v;
          ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return s / n;
  };
  return {mean(0, -1), mean(0, 0), mean(0, 5), mean(1, -1), mean(2, -1), mean(3, -1)};
}

}  // namespace oracle
