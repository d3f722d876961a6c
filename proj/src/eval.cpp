#include "seaseg/eval.hpp"

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

namespace seaseg {

using nlohmann::json;

EvalConfig::EvalConfig() {
  for (int i = 0; i < 10; ++i) iou_thresholds.push_back(0.5 + 0.05 * i);
  area_ranges = {{"all", 0.0, std::numeric_limits<double>::infinity()},
                 {"small", 10.0 * 10.0, 144.0 * 144.0},
                 {"medium", 144.0 * 144.0, 512.0 * 512.0},
                 {"large", 512.0 * 512.0, std::numeric_limits<double>::infinity()}};
}

double iou_box(const Box& a, const Box& b) { return iou(a, b); }

double iou_mask(const RleMask& a, const RleMask& b) {
  const auto inter = static_cast<double>(rle_intersection(a, b));
  const double uni = static_cast<double>(rle_area(a)) + static_cast<double>(rle_area(b)) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

std::vector<MatchFlag> match(const Eigen::MatrixXd& ious, const std::vector<bool>& gt_ignore,
                             const std::vector<bool>& det_out_of_range, double threshold) {
  const auto D = ious.rows(), G = ious.cols();
  std::vector<bool> taken(static_cast<std::size_t>(G), false);
  std::vector<MatchFlag> flags(static_cast<std::size_t>(D), MatchFlag::FalsePositive);
  for (Eigen::Index d = 0; d < D; ++d) {
    Eigen::Index best = -1;
    // First pass over regular gts, second over ignored ones.
    for (bool ignored_pass : {false, true}) {
      double best_iou = threshold;
      for (Eigen::Index g = 0; g < G; ++g) {
        if (taken[g] || gt_ignore[g] != ignored_pass) continue;
        if (ious(d, g) >= best_iou && (best < 0 || ious(d, g) > best_iou)) {
          best_iou = ious(d, g);
          best = g;
        }
      }
      if (best >= 0) break;
    }
    if (best >= 0) {
      taken[best] = true;
      flags[d] = gt_ignore[best] ? MatchFlag::Ignored : MatchFlag::TruePositive;
    } else if (det_out_of_range[d]) {
      flags[d] = MatchFlag::Ignored;
    }
  }
  return flags;
}

Metric average_precision(std::vector<ScoredMatch> matches, int num_gt) {
  if (num_gt <= 0) return std::nullopt;
  std::stable_sort(matches.begin(), matches.end(), [](const ScoredMatch& a, const ScoredMatch& b) { return a.score > b.score; });
  std::vector<double> recall, precision;
  int tp = 0, fp = 0;
  for (const auto& m : matches) {
    if (m.flag == MatchFlag::Ignored) continue;
    (m.flag == MatchFlag::TruePositive ? tp : fp) += 1;
    recall.push_back(static_cast<double>(tp) / num_gt);
    precision.push_back(static_cast<double>(tp) / (tp + fp));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

namespace {

struct Family {
  bool masks;
  double area(const DetectionResult& d) const { return masks ? static_cast<double>(d.mask.height ? rle_area(d.mask) : 0) : d.box.area(); }
  double overlap(const DetectionResult& d, const InstanceAnnotation& g) const {
    if (!masks) return iou_box(d.box, g.bbox);
    if (d.mask.height == 0) return 0.0;
    return iou_mask(d.mask, g.mask);
  }
};

Metric mean_of(const std::vector<Metric>& values) {
  double s = 0;
  int n = 0;
  for (const auto& v : values)
    if (v) {
      s += *v;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return s / n;
}

MetricSet evaluate_family(const Family& fam, const std::vector<int>& image_ids,
                          const std::map<int, std::vector<const DetectionResult*>>& dets_by_image,
                          const std::map<int, std::vector<const InstanceAnnotation*>>& gts_by_image,
                          const std::vector<int>& class_ids, const EvalConfig& cfg) {
  const std::size_t T = cfg.iou_thresholds.size(), A = cfg.area_ranges.size();
  // ap[a][t] collects per-class APs.
  std::vector<std::vector<std::vector<Metric>>> ap(A, std::vector<std::vector<Metric>>(T));
  std::map<int, std::vector<Metric>> per_class_all;
  for (int c : class_ids) {
    // pools[a][t]: matches for this class pooled over images.
    std::vector<std::vector<std::vector<ScoredMatch>>> pools(A, std::vector<std::vector<ScoredMatch>>(T));
    std::vector<int> num_gt(A, 0);
    for (int img : image_ids) {
      std::vector<const DetectionResult*> dets;
      std::vector<const InstanceAnnotation*> gts;
      if (auto it = dets_by_image.find(img); it != dets_by_image.end())
        for (auto* d : it->second)
          if (d->class_id == c) dets.push_back(d);
      if (auto it = gts_by_image.find(img); it != gts_by_image.end())
        for (auto* g : it->second)
          if (g->class_id == c) gts.push_back(g);
      if (dets.empty() && gts.empty()) continue;
      Eigen::MatrixXd ious(static_cast<Eigen::Index>(dets.size()), static_cast<Eigen::Index>(gts.size()));
      for (std::size_t d = 0; d < dets.size(); ++d)
        for (std::size_t g = 0; g < gts.size(); ++g)
          ious(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(g)) = fam.overlap(*dets[d], *gts[g]);
      for (std::size_t a = 0; a < A; ++a) {
        const AreaRange& range = cfg.area_ranges[a];
        std::vector<bool> gt_ignore, det_out;
        for (auto* g : gts) {
          gt_ignore.push_back(!range.contains(static_cast<double>(g->area)));
          if (!gt_ignore.back()) ++num_gt[a];
        }
        for (auto* d : dets) det_out.push_back(!range.contains(fam.area(*d)));
        for (std::size_t t = 0; t < T; ++t) {
          const auto flags = match(ious, gt_ignore, det_out, cfg.iou_thresholds[t]);
          for (std::size_t d = 0; d < dets.size(); ++d) pools[a][t].push_back({dets[d]->score, flags[d]});
        }
      }
    }
    for (std::size_t a = 0; a < A; ++a)
      for (std::size_t t = 0; t < T; ++t) {
        const Metric v = average_precision(pools[a][t], num_gt[a]);
        ap[a][t].push_back(v);
        if (a == 0) per_class_all[c].push_back(v);
      }
  }

  auto range_ap = [&](std::size_t a, std::optional<std::size_t> only_t) -> Metric {
    std::vector<Metric> all;
    for (std::size_t t = 0; t < T; ++t)
      if (!only_t || *only_t == t) all.insert(all.end(), ap[a][t].begin(), ap[a][t].end());
    return mean_of(all);
  };
  auto threshold_index = [&](double v) -> std::optional<std::size_t> {
    for (std::size_t t = 0; t < T; ++t)
      if (std::abs(cfg.iou_thresholds[t] - v) < 1e-9) return t;
    return std::nullopt;
  };
  auto range_index = [&](const std::string& name) -> std::optional<std::size_t> {
    for (std::size_t a = 0; a < A; ++a)
      if (cfg.area_ranges[a].name == name) return a;
    return std::nullopt;
  };

  MetricSet out;
  const auto all = range_index("all").value_or(0);
  out.ap = range_ap(all, std::nullopt);
  if (auto t = threshold_index(0.5)) out.ap50 = range_ap(all, t);
  if (auto t = threshold_index(0.75)) out.ap75 = range_ap(all, t);
  if (auto a = range_index("small")) out.aps = range_ap(*a, std::nullopt);
  if (auto a = range_index("medium")) out.apm = range_ap(*a, std::nullopt);
  if (auto a = range_index("large")) out.apl = range_ap(*a, std::nullopt);
  for (const auto& [c, v] : per_class_all) out.per_class[c] = mean_of(v);
  return out;
}

}  // namespace

EvalReport evaluate(const std::vector<ResultRecord>& results, const DatasetManifest& manifest, const EvalConfig& cfg) {
  std::set<int> known_classes;
  for (const auto& c : manifest.categories) known_classes.insert(c.id);
  std::vector<int> image_ids;
  for (const auto& r : manifest.images) image_ids.push_back(r.id);
  std::sort(image_ids.begin(), image_ids.end());
  const std::set<int> known_images(image_ids.begin(), image_ids.end());

  std::map<int, std::vector<const DetectionResult*>> dets_by_image;
  for (const auto& r : results) {
    if (!known_classes.count(r.det.class_id))
      throw std::invalid_argument("evaluate: unknown class id " + std::to_string(r.det.class_id) + " in results");
    if (!known_images.count(r.image_id)) throw std::invalid_argument("evaluate: unknown image id " + std::to_string(r.image_id));
    dets_by_image[r.image_id].push_back(&r.det);
  }
  EvalReport report;
  for (auto& [img, dets] : dets_by_image) {
    std::stable_sort(dets.begin(), dets.end(), [](const DetectionResult* a, const DetectionResult* b) { return a->score > b->score; });
    if (static_cast<int>(dets.size()) > cfg.max_dets) dets.resize(static_cast<std::size_t>(cfg.max_dets));
    report.num_detections += static_cast<int>(dets.size());
  }
  std::map<int, std::vector<const InstanceAnnotation*>> gts_by_image;
  for (const auto& a : manifest.annotations) gts_by_image[a.image_id].push_back(&a);

  const std::vector<int> class_ids(known_classes.begin(), known_classes.end());
  report.box = evaluate_family(Family{false}, image_ids, dets_by_image, gts_by_image, class_ids, cfg);
  report.mask = evaluate_family(Family{true}, image_ids, dets_by_image, gts_by_image, class_ids, cfg);
  report.num_images = static_cast<int>(image_ids.size());
  report.num_gt = static_cast<int>(manifest.annotations.size());
  return report;
}

namespace {

json metric_json(const Metric& m) { return m ? json(*m) : json("undefined"); }

std::string metric_text(const Metric& m) {
  if (!m) return "undefined";
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(4) << *m;
  return ss.str();
}

json metric_set_json(const MetricSet& s, const DatasetManifest& manifest) {
  json per_class = json::object();
  for (const auto& c : manifest.categories)
    if (auto it = s.per_class.find(c.id); it != s.per_class.end()) per_class[c.name] = metric_json(it->second);
  return {{"AP", metric_json(s.ap)},   {"AP50", metric_json(s.ap50)}, {"AP75", metric_json(s.ap75)},
          {"APs", metric_json(s.aps)}, {"APm", metric_json(s.apm)},   {"APl", metric_json(s.apl)},
          {"per_class", per_class}};
}

}  // namespace

json to_json(const EvalReport& report, const DatasetManifest& manifest) {
  return {{"box", metric_set_json(report.box, manifest)},
          {"mask", metric_set_json(report.mask, manifest)},
          {"num_images", report.num_images},
          {"num_gt", report.num_gt},
          {"num_detections", report.num_detections}};
}

std::string format_report(const EvalReport& report, const DatasetManifest& manifest) {
  std::ostringstream ss;
  ss << "images " << report.num_images << "  gt " << report.num_gt << "  detections " << report.num_detections << "\n";
  ss << std::left << std::setw(8) << "" << std::setw(11) << "AP" << std::setw(11) << "AP50" << std::setw(11) << "AP75"
     << std::setw(11) << "APs" << std::setw(11) << "APm" << std::setw(11) << "APl" << "\n";
  for (auto [name, s] : {std::pair{"mask", &report.mask}, std::pair{"box", &report.box}}) {
    ss << std::setw(8) << name;
    for (const Metric* m : {&s->ap, &s->ap50, &s->ap75, &s->aps, &s->apm, &s->apl}) ss << std::setw(11) << metric_text(*m);
    ss << "\n";
  }
  ss << "\nper-class AP\n" << std::setw(16) << "class" << std::setw(11) << "mask" << std::setw(11) << "box" << "\n";
  for (const auto& c : manifest.categories) {
    auto get = [&](const MetricSet& s) {
      auto it = s.per_class.find(c.id);
      return it == s.per_class.end() ? Metric{} : it->second;
    };
    ss << std::setw(16) << c.name << std::setw(11) << metric_text(get(report.mask)) << std::setw(11) << metric_text(get(report.box))
       << "\n";
  }
  return ss.str();
}

json results_to_json(const std::vector<ResultRecord>& results) {
  json out = json::array();
  for (const auto& r : results) {
    json j = {{"image_id", r.image_id},
              {"category_id", r.det.class_id},
              {"score", r.det.score},
              {"bbox", {r.det.box.x, r.det.box.y, r.det.box.w, r.det.box.h}}};
    if (r.det.mask.height > 0) j["segmentation"] = rle_to_json(r.det.mask);
    out.push_back(std::move(j));
  }
  return out;
}

std::vector<ResultRecord> results_from_json(const json& j) {
  std::vector<ResultRecord> out;
  try {
    for (const auto& r : j) {
      ResultRecord rec;
      rec.image_id = r.at("image_id").get<int>();
      rec.det.class_id = r.at("category_id").get<int>();
      rec.det.score = r.at("score").get<double>();
      const auto& b = r.at("bbox");
      rec.det.box = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
      if (r.contains("segmentation")) rec.det.mask = rle_from_json(r.at("segmentation"));
      out.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("results: ") + e.what());
  }
  return out;
}

}  // namespace seaseg
