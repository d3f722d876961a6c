#include "seaseg/detector.hpp"

#include "seaseg/init.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace seaseg {

JointLossReport joint_loss(double l_detection, double l_segmentation, double l_scmb, std::array<double, 3> alpha) {
  JointLossReport r{l_detection, l_segmentation, l_scmb, 0.0, alpha};
  if (!std::isfinite(l_detection) || !std::isfinite(l_segmentation) || !std::isfinite(l_scmb))
    throw NonFiniteLoss("joint_loss: non-finite loss component", r);
  r.l_total = alpha[0] * l_detection + alpha[1] * l_segmentation + alpha[2] * l_scmb;
  return r;
}

int assign_level(const Box& box) {
  const double scale = std::sqrt(std::max(box.w * box.h, 1e-12));
  const int k = static_cast<int>(std::floor(4.0 + std::log2(scale / 224.0)));
  return std::clamp(k, 2, 5);
}

namespace {

constexpr int kRpnFirstLevel = 3;
constexpr int kRpnLastLevel = 5;
constexpr int kRpnSamples = 128;

bool uses_scmb_head(const ModelConfig& cfg) { return cfg.scmb.enabled || cfg.scmb.single_scale_reference; }

void init_rpn(ParamStore<float>* pf, ParamStore<double>* pd, const ModelConfig& cfg, Rng& rng) {
  const int ch = cfg.fpn.channels;
  if (pf) {
    add_conv(*pf, "rpn.conv", ch, ch, 3, rng);
    add_conv(*pf, "rpn.obj", ch, 1, 1, rng, kPredictorStd);
    add_conv(*pf, "rpn.box", ch, 4, 1, rng, kPredictorStd);
  } else {
    add_conv(*pd, "rpn.conv", ch, ch, 3, rng);
    add_conv(*pd, "rpn.obj", ch, 1, 1, rng, kPredictorStd);
    add_conv(*pd, "rpn.box", ch, 4, 1, rng, kPredictorStd);
  }
}

Box rpn_anchor(int level, int y, int x) {
  const double stride = std::ldexp(1.0, level);
  const double side = 4 * stride;
  return {(x + 0.5) * stride - side / 2, (y + 0.5) * stride - side / 2, side, side};
}

template <typename Scalar>
struct RpnLevelOutput {
  int level;
  Var<Scalar> objectness;  // (1, 1, h, w)
  Var<Scalar> deltas;      // (1, 4, h, w)
};

template <typename Scalar>
std::vector<RpnLevelOutput<Scalar>> rpn_forward(const FeaturePyramid<Scalar>& feats) {
  std::vector<RpnLevelOutput<Scalar>> out;
  for (int l = kRpnFirstLevel; l <= kRpnLastLevel; ++l) {
    Var<Scalar> h = relu(conv(feats.level(l), "rpn.conv", 3));
    out.push_back({l, conv(h, "rpn.obj", 1), conv(h, "rpn.box", 1)});
  }
  return out;
}

template <typename Scalar>
std::vector<Proposal> rpn_proposals(const std::vector<RpnLevelOutput<Scalar>>& levels, int height, int width,
                                    const ProposalConfig& cfg) {
  std::vector<DetectionResult> cands;
  for (const auto& lv : levels) {
    const Tensor<Scalar>& obj = lv.objectness.value();
    const Tensor<Scalar>& del = lv.deltas.value();
    for (int y = 0; y < obj.h; ++y)
      for (int x = 0; x < obj.w; ++x) {
        const double score = 1.0 / (1.0 + std::exp(-static_cast<double>(obj.at(0, 0, y, x))));
        BoxDeltas d;
        for (int k = 0; k < 4; ++k) d[k] = static_cast<double>(del.at(0, k, y, x)) / kDeltaWeights[k];
        const Box b = clip_box(decode_deltas(rpn_anchor(lv.level, y, x), d), width, height);
        if (b.w >= 1 && b.h >= 1) cands.push_back({b, 1, score, {}});
      }
  }
  std::vector<DetectionResult> kept = nms(std::move(cands), cfg.rpn_nms);
  if (static_cast<int>(kept.size()) > cfg.rpn_top_k) kept.resize(cfg.rpn_top_k);
  std::vector<Proposal> out;
  for (const auto& k : kept) out.push_back({k.box, k.score, ProposalSource::RpnLite});
  return out;
}

template <typename Scalar>
Var<Scalar> rpn_loss(Graph<Scalar>& g, const std::vector<RpnLevelOutput<Scalar>>& levels, const std::vector<Box>& gts, Rng& rng) {
  struct AnchorRef {
    std::size_t level;
    int y, x;
    int gt;
    double iou;
  };
  std::vector<AnchorRef> anchors;
  std::vector<double> best_for_gt(gts.size(), -1.0);
  for (std::size_t li = 0; li < levels.size(); ++li) {
    const Tensor<Scalar>& obj = levels[li].objectness.value();
    for (int y = 0; y < obj.h; ++y)
      for (int x = 0; x < obj.w; ++x) {
        const Box a = rpn_anchor(levels[li].level, y, x);
        AnchorRef r{li, y, x, -1, 0.0};
        for (std::size_t k = 0; k < gts.size(); ++k) {
          const double v = iou(a, gts[k]);
          if (v > r.iou) {
            r.iou = v;
            r.gt = static_cast<int>(k);
          }
          best_for_gt[k] = std::max(best_for_gt[k], v);
        }
        anchors.push_back(r);
      }
  }
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const auto& a = anchors[i];
    const bool best = a.gt >= 0 && a.iou > 0 && a.iou >= best_for_gt[a.gt] - 1e-12;
    if (a.iou >= 0.5 || best)
      pos.push_back(i);
    else if (a.iou < 0.3)
      neg.push_back(i);
  }
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  pos.resize(std::min<std::size_t>(pos.size(), kRpnSamples / 2));
  neg.resize(std::min<std::size_t>(neg.size(), kRpnSamples - pos.size()));
  const Scalar norm = static_cast<Scalar>(std::max<std::size_t>(pos.size() + neg.size(), 1));

  std::vector<Tensor<Scalar>> obj_t, obj_w, box_t, box_w;
  for (const auto& lv : levels) {
    const Tensor<Scalar>& o = lv.objectness.value();
    obj_t.emplace_back(1, 1, o.h, o.w);
    obj_w.emplace_back(1, 1, o.h, o.w);
    box_t.emplace_back(1, 4, o.h, o.w);
    box_w.emplace_back(1, 4, o.h, o.w);
  }
  for (std::size_t i : neg) obj_w[anchors[i].level].at(0, 0, anchors[i].y, anchors[i].x) = 1;
  for (std::size_t i : pos) {
    const auto& a = anchors[i];
    obj_t[a.level].at(0, 0, a.y, a.x) = 1;
    obj_w[a.level].at(0, 0, a.y, a.x) = 1;
    const BoxDeltas d = encode_deltas(rpn_anchor(levels[a.level].level, a.y, a.x), gts[a.gt]);
    for (int k = 0; k < 4; ++k) {
      box_t[a.level].at(0, k, a.y, a.x) = static_cast<Scalar>(d[k] * kDeltaWeights[k]);
      box_w[a.level].at(0, k, a.y, a.x) = 1;
    }
  }
  std::vector<Var<Scalar>> terms;
  for (std::size_t li = 0; li < levels.size(); ++li) {
    terms.push_back(sigmoid_bce(levels[li].objectness, obj_t[li], obj_w[li], norm));
    terms.push_back(smooth_l1(levels[li].deltas, box_t[li], box_w[li], Scalar(1), norm));
  }
  (void)g;
  return weighted_sum(terms, std::vector<Scalar>(terms.size(), Scalar(1)));
}

template <typename Scalar>
Var<Scalar> scalar_constant(Graph<Scalar>& g, Scalar v) {
  return g.constant(Tensor<Scalar>::constant(1, 1, 1, 1, v));
}

template <typename Scalar>
FeaturePyramid<Scalar> features_with_sea(Graph<Scalar>& g, const ModelConfig& cfg, const Image& image, const LabelMap* semantic,
                                         std::optional<Var<Scalar>>* seg_loss, FeaturePyramid<Scalar>* raw = nullptr,
                                         std::optional<SeaBranchOutputs<Scalar>>* branch = nullptr) {
  Var<Scalar> img = g.constant(image_tensor<Scalar>(image));
  FeaturePyramid<Scalar> pyr = fpn_forward(backbone_forward(img, cfg.backbone), cfg.fpn);
  if (raw) *raw = pyr;
  if (!cfg.sea.enabled) return pyr;
  std::optional<LabelMap> target;
  if (semantic) {
    const Tensor<Scalar>& u = pyr.level(cfg.sea.uniform_level).value();
    target = downsample_labels(*semantic, u.h, u.w);
  }
  SeaResult<Scalar> r = sea_forward(pyr, target ? &*target : nullptr, cfg.sea, cfg.num_classes);
  if (seg_loss) *seg_loss = r.loss;
  if (branch) *branch = r.branch;
  return r.features;
}

// Mask logits (R, C, 28, 28) from the configured head.
template <typename Scalar>
Var<Scalar> mask_logits(Var<Scalar> rois, const ModelConfig& cfg) {
  if (cfg.scmb.single_scale_reference) return single_scale_mask_head(rois);
  if (cfg.scmb.enabled) return fusion_forward(trident_forward(rois, cfg.scmb), cfg.scmb, cfg.num_classes);
  return deconv_mask_head(rois);
}

}  // namespace

template <typename Scalar>
ParamStore<Scalar> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore<Scalar> params;
  Rng rng(seed);
  init_backbone(params, cfg.backbone, rng);
  init_fpn(params, cfg.fpn, cfg.backbone, rng);
  if (cfg.sea.enabled) init_sea(params, cfg.sea, cfg.fpn.channels, cfg.num_classes, rng);
  const int roi_in = cfg.fpn.channels * cfg.head.roi_size * cfg.head.roi_size;
  add_conv(params, "head.fc1", roi_in, cfg.head.hidden, 1, rng);
  add_conv(params, "head.fc2", cfg.head.hidden, cfg.head.hidden, 1, rng);
  add_conv(params, "head.cls", cfg.head.hidden, cfg.num_classes + 1, 1, rng, kPredictorStd);
  add_conv(params, "head.box", cfg.head.hidden, 4 * cfg.num_classes, 1, rng, 0.001);
  if (uses_scmb_head(cfg))
    init_scmb(params, cfg.scmb, cfg.fpn.channels, cfg.num_classes, rng);
  else
    init_deconv_mask_head(params, cfg.scmb, cfg.fpn.channels, cfg.num_classes, rng);
  if (cfg.proposals.mode == ProposalMode::RpnLite) {
    if constexpr (std::is_same_v<Scalar, float>)
      init_rpn(&params, nullptr, cfg, rng);
    else
      init_rpn(nullptr, &params, cfg, rng);
  }
  return params;
}

std::vector<Proposal> propose_gt_jitter(const std::vector<Box>& gt_boxes, int height, int width, const ProposalConfig& cfg,
                                        Rng& rng) {
  std::vector<Proposal> out;
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (const Box& gt : gt_boxes) {
    for (int k = 0; k < cfg.jitter_copies; ++k) {
      const double dx = unit(rng) * cfg.jitter_center * gt.w;
      const double dy = unit(rng) * cfg.jitter_center * gt.h;
      const double sw = std::exp(unit(rng) * cfg.jitter_size);
      const double sh = std::exp(unit(rng) * cfg.jitter_size);
      const double w = gt.w * sw, h = gt.h * sh;
      Box b = clip_box({gt.cx() + dx - w / 2, gt.cy() + dy - h / 2, w, h}, width, height);
      if (b.w < 1 || b.h < 1) b = clip_box(gt, width, height);
      out.push_back({b, 1.0, ProposalSource::GtJitter});
    }
  }
  const double min_side = 8.0;
  const double max_side = std::max(min_side, static_cast<double>(std::min(height, width)));
  std::uniform_real_distribution<double> log_side(std::log(min_side), std::log(max_side));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int k = 0; k < cfg.random_boxes; ++k) {
    const double w = std::exp(log_side(rng));
    const double h = std::exp(log_side(rng));
    const double x = u01(rng) * std::max(0.0, width - w);
    const double y = u01(rng) * std::max(0.0, height - h);
    out.push_back({clip_box({x, y, w, h}, width, height), 0.0, ProposalSource::GtJitter});
  }
  return out;
}

std::vector<Box> anchor_grid(int height, int width, const InferConfig& cfg) {
  std::vector<Box> out;
  for (int size : cfg.anchor_sizes) {
    const double stride = std::max(4.0, size / 2.0);
    for (double aspect : cfg.anchor_aspects) {
      const double w = size / std::sqrt(aspect);
      const double h = size * std::sqrt(aspect);
      for (double cy = stride / 2; cy < height; cy += stride)
        for (double cx = stride / 2; cx < width; cx += stride) {
          const Box b = clip_box({cx - w / 2, cy - h / 2, w, h}, width, height);
          if (b.w >= 1 && b.h >= 1) out.push_back(b);
        }
    }
  }
  return out;
}

std::vector<DetectionResult> nms(std::vector<DetectionResult> detections, double iou_threshold) {
  std::stable_sort(detections.begin(), detections.end(),
                   [](const DetectionResult& a, const DetectionResult& b) { return a.score > b.score; });
  std::vector<DetectionResult> kept;
  std::vector<bool> removed(detections.size(), false);
  for (std::size_t i = 0; i < detections.size(); ++i) {
    if (removed[i]) continue;
    kept.push_back(detections[i]);
    for (std::size_t j = i + 1; j < detections.size(); ++j)
      if (!removed[j] && detections[j].class_id == detections[i].class_id &&
          iou(detections[i].box, detections[j].box) > iou_threshold)
        removed[j] = true;
  }
  return kept;
}

std::vector<DetectionResult> select_detections(std::vector<DetectionResult> candidates, const InferConfig& cfg) {
  std::vector<DetectionResult> kept = nms(std::move(candidates), cfg.nms);
  if (static_cast<int>(kept.size()) > cfg.max_dets) kept.resize(cfg.max_dets);
  return kept;
}

BinaryMap paste_mask(const Eigen::MatrixXd& probs, const Box& box, int height, int width, double threshold) {
  BinaryMap out = BinaryMap::Zero(height, width);
  if (box.w <= 0 || box.h <= 0) return out;
  const Eigen::Index mh = probs.rows(), mw = probs.cols();
  auto sample = [&](double v, Eigen::Index n, Eigen::Index& i0, Eigen::Index& i1, double& f) {
    v = std::clamp(v, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<Eigen::Index>(std::floor(v));
    i1 = std::min(i0 + 1, n - 1);
    f = v - static_cast<double>(i0);
  };
  const int y_begin = std::max(0, static_cast<int>(std::floor(box.y)));
  const int y_end = std::min(height, static_cast<int>(std::ceil(box.y2())));
  const int x_begin = std::max(0, static_cast<int>(std::floor(box.x)));
  const int x_end = std::min(width, static_cast<int>(std::ceil(box.x2())));
  for (int py = y_begin; py < y_end; ++py) {
    const double cy = py + 0.5;
    if (cy < box.y || cy >= box.y2()) continue;
    Eigen::Index y0, y1;
    double fy;
    sample((cy - box.y) / box.h * static_cast<double>(mh) - 0.5, mh, y0, y1, fy);
    for (int px = x_begin; px < x_end; ++px) {
      const double cx = px + 0.5;
      if (cx < box.x || cx >= box.x2()) continue;
      Eigen::Index x0, x1;
      double fx;
      sample((cx - box.x) / box.w * static_cast<double>(mw) - 0.5, mw, x0, x1, fx);
      const double v = (1 - fy) * ((1 - fx) * probs(y0, x0) + fx * probs(y0, x1)) + fy * ((1 - fx) * probs(y1, x0) + fx * probs(y1, x1));
      out(py, px) = v >= threshold ? 1 : 0;
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> image_tensor(const Image& image) {
  Tensor<Scalar> t(1, 3, image.height, image.width);
  for (int c = 0; c < 3; ++c) t.slice(0, c) = image.planes[c].template cast<Scalar>();
  return t;
}

TrainSample TrainSample::make(Image image, std::vector<InstanceAnnotation> annotations) {
  TrainSample s;
  s.semantic = instances_to_semantic_map(annotations, image.height, image.width);
  for (const auto& a : annotations) s.masks.push_back(rle_decode(a.mask));
  s.image = std::move(image);
  s.annotations = std::move(annotations);
  return s;
}

template <typename Scalar>
HeadOutputs<Scalar> detection_head(Var<Scalar> roi_features) {
  Var<Scalar> x = flatten(roi_features);
  x = relu(conv(x, "head.fc1", 1));
  x = relu(conv(x, "head.fc2", 1));
  return {conv(x, "head.cls", 1), conv(x, "head.box", 1)};
}

template <typename Scalar>
Var<Scalar> detection_loss(const HeadOutputs<Scalar>& out, const std::vector<DetectionTarget>& targets) {
  const Tensor<Scalar>& deltas = out.box_deltas.value();
  const int rois = deltas.n;
  if (static_cast<int>(targets.size()) != rois) throw ShapeError("detection_loss: target/proposal count mismatch");
  const int num_classes = deltas.c / 4;
  std::vector<int> labels;
  Tensor<Scalar> t(rois, deltas.c, 1, 1), w(rois, deltas.c, 1, 1);
  for (int r = 0; r < rois; ++r) {
    const DetectionTarget& tg = targets[r];
    if (tg.label < 0 || tg.label > num_classes) throw std::out_of_range("detection_loss: label out of range");
    labels.push_back(tg.label);
    if (tg.label == 0) continue;
    for (int k = 0; k < 4; ++k) {
      const int row = (tg.label - 1) * 4 + k;
      t.data(row, r) = static_cast<Scalar>(tg.deltas[k] * kDeltaWeights[k]);
      w.data(row, r) = 1;
    }
  }
  Var<Scalar> cls = softmax_cross_entropy(out.class_logits, labels);
  Var<Scalar> reg = smooth_l1(out.box_deltas, t, w, Scalar(1), static_cast<Scalar>(rois));
  return weighted_sum<Scalar>({cls, reg}, {Scalar(1), Scalar(1)});
}

template <typename Scalar>
Var<Scalar> pyramid_roi_align(const FeaturePyramid<Scalar>& pyramid, const std::vector<Box>& boxes, const HeadConfig& cfg) {
  std::vector<Var<Scalar>> levels{pyramid.level(2), pyramid.level(3), pyramid.level(4), pyramid.level(5)};
  std::vector<RoiRequest> reqs;
  reqs.reserve(boxes.size());
  for (const Box& b : boxes) {
    const int l = assign_level(b);
    reqs.push_back({l - 2, b, std::ldexp(1.0, l)});
  }
  return roi_align(levels, reqs, cfg.roi_size, cfg.sampling);
}

template <typename Scalar>
TrainForward<Scalar> forward_train(Graph<Scalar>& g, const ModelConfig& cfg, const TrainSample& sample, Rng& rng) {
  TrainForward<Scalar> out;
  std::optional<Var<Scalar>> seg;
  FeaturePyramid<Scalar> feats = features_with_sea(g, cfg, sample.image, &sample.semantic, &seg);
  out.segmentation = seg ? *seg : scalar_constant<Scalar>(g, 0);

  std::vector<Box> gt_boxes;
  std::vector<int> gt_classes;
  for (const auto& a : sample.annotations) {
    gt_boxes.push_back(a.bbox);
    gt_classes.push_back(a.class_id);
  }
  const int H = sample.image.height, W = sample.image.width;

  std::optional<Var<Scalar>> rpn_term;
  if (cfg.proposals.mode == ProposalMode::GtJitter) {
    out.proposals = propose_gt_jitter(gt_boxes, H, W, cfg.proposals, rng);
  } else {
    auto rpn = rpn_forward(feats);
    rpn_term = rpn_loss(g, rpn, gt_boxes, rng);
    out.proposals = rpn_proposals(rpn, H, W, cfg.proposals);
    for (const Box& b : gt_boxes) out.proposals.push_back({b, 1.0, ProposalSource::GtJitter});
  }

  std::vector<Box> boxes;
  for (const auto& p : out.proposals) boxes.push_back(p.box);
  const std::vector<DetectionTarget> targets = detection_targets(boxes, gt_boxes, gt_classes, cfg.sampling.fg_iou);
  std::vector<std::size_t> fg, bg;
  for (std::size_t i = 0; i < targets.size(); ++i) (targets[i].label > 0 ? fg : bg).push_back(i);
  std::shuffle(fg.begin(), fg.end(), rng);
  std::shuffle(bg.begin(), bg.end(), rng);
  const auto fg_quota = static_cast<std::size_t>(std::lround(cfg.sampling.rois_per_image * cfg.sampling.fg_fraction));
  fg.resize(std::min(fg.size(), fg_quota));
  bg.resize(std::min(bg.size(), static_cast<std::size_t>(cfg.sampling.rois_per_image) - fg.size()));

  std::vector<Box> sampled_boxes;
  std::vector<DetectionTarget> sampled_targets;
  for (std::size_t i : fg) {
    sampled_boxes.push_back(boxes[i]);
    sampled_targets.push_back(targets[i]);
  }
  for (std::size_t i : bg) {
    sampled_boxes.push_back(boxes[i]);
    sampled_targets.push_back(targets[i]);
  }
  out.sampled_rois = static_cast<int>(sampled_boxes.size());
  if (sampled_boxes.empty()) {
    out.detection = scalar_constant<Scalar>(g, 0);
  } else {
    HeadOutputs<Scalar> head = detection_head(pyramid_roi_align(feats, sampled_boxes, cfg.head));
    out.detection = detection_loss(head, sampled_targets);
  }
  if (rpn_term) out.detection = weighted_sum<Scalar>({out.detection, *rpn_term}, {Scalar(1), Scalar(1)});

  const std::size_t mask_count = std::min(fg.size(), static_cast<std::size_t>(std::max(cfg.sampling.max_mask_rois, 0)));
  out.mask_rois = static_cast<int>(mask_count);
  if (mask_count == 0) {
    out.scmb = scalar_constant<Scalar>(g, 0);
  } else {
    std::vector<Box> mboxes;
    std::vector<MaskSupervisionSet> mtargets;
    std::vector<int> mclasses;
    for (std::size_t k = 0; k < mask_count; ++k) {
      const std::size_t i = fg[k];
      mboxes.push_back(boxes[i]);
      mtargets.push_back(roi_mask_targets(sample.masks.at(targets[i].gt_index), boxes[i]));
      mclasses.push_back(targets[i].label);
    }
    Var<Scalar> rois = pyramid_roi_align(feats, mboxes, cfg.head);
    if (cfg.scmb.enabled && !cfg.scmb.single_scale_reference) {
      TridentFeatures<Scalar> tf = trident_forward(rois, cfg.scmb);
      GuidancePredictions<Scalar> gp = guidance_forward(tf);
      Var<Scalar> logits = fusion_forward(tf, cfg.scmb, cfg.num_classes);
      out.scmb = scmb_losses(gp, logits, mtargets, mclasses, cfg.scmb).total;
    } else {
      std::vector<int> channels;
      for (int c : mclasses) channels.push_back(c - 1);
      Var<Scalar> logits = mask_logits(rois, cfg);
      out.scmb = sigmoid_bce(select_channel(logits, channels), mask_targets_tensor<Scalar>(mtargets, 28), Tensor<Scalar>{},
                             static_cast<Scalar>(mask_count) * 28 * 28);
    }
  }

  const auto& a = cfg.train.loss_weights;
  out.total = weighted_sum<Scalar>({out.detection, out.segmentation, out.scmb},
                                   {static_cast<Scalar>(a[0]), static_cast<Scalar>(a[1]), static_cast<Scalar>(a[2])});
  const auto v = [](Var<Scalar> x) { return static_cast<double>(x.value().data(0, 0)); };
  out.report = JointLossReport{v(out.detection), v(out.segmentation), v(out.scmb), v(out.total), {a[0], a[1], a[2]}};
  return out;
}

template <typename Scalar>
std::vector<DetectionResult> infer(const ParamStore<Scalar>& params, const ModelConfig& cfg, const Image& image,
                                   const InferOptions& options) {
  const int H = image.height, W = image.width;
  Graph<Scalar> g(&params, false);
  FeaturePyramid<Scalar> feats = features_with_sea<Scalar>(g, cfg, image, nullptr, nullptr);

  std::vector<Box> proposals;
  if (options.proposals) {
    for (const Box& b : *options.proposals) {
      const Box c = clip_box(b, W, H);
      if (c.w >= 1 && c.h >= 1) proposals.push_back(c);
    }
  } else if (cfg.proposals.mode == ProposalMode::RpnLite) {
    for (const auto& p : rpn_proposals(rpn_forward(feats), H, W, cfg.proposals)) proposals.push_back(p.box);
  } else {
    proposals = anchor_grid(H, W, cfg.infer);
  }

  // Level tensors are copied into a fresh graph per RoI chunk so memory stays
  // bounded by the chunk size.
  std::array<Tensor<Scalar>, 5> level_values;
  for (int i = 2; i <= 6; ++i) level_values[i - 2] = feats.level(i).value();
  auto chunk_pyramid = [&](Graph<Scalar>& cg) {
    FeaturePyramid<Scalar> p;
    for (int i = 2; i <= 6; ++i) p.level(i) = cg.constant(level_values[i - 2]);
    return p;
  };

  const int C = cfg.num_classes;
  std::vector<std::vector<DetectionResult>> per_class(C + 1);
  const int batch = std::max(1, options.roi_batch);
  for (std::size_t start = 0; start < proposals.size(); start += batch) {
    const std::size_t end = std::min(proposals.size(), start + batch);
    const std::vector<Box> chunk(proposals.begin() + static_cast<long>(start), proposals.begin() + static_cast<long>(end));
    Graph<Scalar> cg(&params, false);
    HeadOutputs<Scalar> head = detection_head(pyramid_roi_align(chunk_pyramid(cg), chunk, cfg.head));
    const Tensor<Scalar>& logits = head.class_logits.value();
    const Tensor<Scalar>& deltas = head.box_deltas.value();
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      const auto col = logits.data.col(static_cast<Eigen::Index>(r)).template cast<double>();
      const Eigen::VectorXd e = (col.array() - col.maxCoeff()).exp();
      const Eigen::VectorXd p = e / e.sum();
      for (int c = 1; c <= C; ++c) {
        if (p(c) <= cfg.infer.score_floor) continue;
        BoxDeltas d;
        for (int k = 0; k < 4; ++k) d[k] = static_cast<double>(deltas.data((c - 1) * 4 + k, static_cast<Eigen::Index>(r))) / kDeltaWeights[k];
        const Box b = clip_box(decode_deltas(chunk[r], d), W, H);
        if (b.w < 1 || b.h < 1) continue;
        per_class[c].push_back({b, c, p(c), {}});
      }
    }
  }
  std::vector<DetectionResult> candidates;
  for (auto& list : per_class) {
    std::stable_sort(list.begin(), list.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
    if (static_cast<int>(list.size()) > cfg.infer.pre_nms_top_k) list.resize(cfg.infer.pre_nms_top_k);
    candidates.insert(candidates.end(), list.begin(), list.end());
  }
  std::vector<DetectionResult> dets = select_detections(std::move(candidates), cfg.infer);

  for (std::size_t start = 0; start < dets.size(); start += batch) {
    const std::size_t end = std::min(dets.size(), start + batch);
    std::vector<Box> chunk;
    std::vector<int> channels;
    for (std::size_t i = start; i < end; ++i) {
      chunk.push_back(dets[i].box);
      channels.push_back(dets[i].class_id - 1);
    }
    Graph<Scalar> cg(&params, false);
    Var<Scalar> logits = select_channel(mask_logits(pyramid_roi_align(chunk_pyramid(cg), chunk, cfg.head), cfg), channels);
    const Tensor<Scalar>& m = logits.value();
    for (std::size_t i = start; i < end; ++i) {
      const int r = static_cast<int>(i - start);
      Eigen::MatrixXd probs(m.h, m.w);
      for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) probs(y, x) = 1.0 / (1.0 + std::exp(-static_cast<double>(m.at(r, 0, y, x))));
      dets[i].mask = rle_encode(paste_mask(probs, dets[i].box, H, W, cfg.infer.mask_threshold));
    }
  }
  return dets;
}

template <typename Scalar>
VizMaps<Scalar> feature_maps(const ParamStore<Scalar>& params, const ModelConfig& cfg, const Image& image) {
  Graph<Scalar> g(&params, false);
  FeaturePyramid<Scalar> raw;
  std::optional<SeaBranchOutputs<Scalar>> branch;
  FeaturePyramid<Scalar> feats = features_with_sea<Scalar>(g, cfg, image, nullptr, nullptr, &raw, &branch);
  VizMaps<Scalar> out;
  for (int i = 2; i <= 6; ++i) {
    out.before[i - 2] = raw.level(i).value();
    out.after[i - 2] = feats.level(i).value();
  }
  if (branch) {
    out.attention = branch->attention.value();
    out.probabilities = branch->probabilities.value();
  }
  return out;
}

double learning_rate(const TrainConfig& cfg, long step) {
  double lr = cfg.lr;
  for (int s : cfg.lr_steps)
    if (step >= s) lr *= cfg.lr_gamma;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) lr *= static_cast<double>(step + 1) / cfg.warmup_steps;
  return lr;
}

template <typename Scalar>
void sgd_update(ParamStore<Scalar>& params, const std::map<std::string, Mat<Scalar>>& grads, SgdState<Scalar>& state,
                double lr, double momentum, double weight_decay) {
  const auto lr_s = static_cast<Scalar>(lr);
  const auto mu = static_cast<Scalar>(momentum);
  const auto wd = static_cast<Scalar>(weight_decay);
  for (const auto& [name, grad] : grads) {
    Mat<Scalar>& w = params.at(name);
    auto it = state.momentum.find(name);
    if (it == state.momentum.end()) it = state.momentum.emplace(name, Mat<Scalar>::Zero(w.rows(), w.cols())).first;
    Mat<Scalar>& v = it->second;
    v = mu * v + grad + wd * w;
    w -= lr_s * v;
  }
}

template <typename Scalar>
JointLossReport train_step(ParamStore<Scalar>& params, SgdState<Scalar>& state, const ModelConfig& cfg,
                           const TrainSample& sample, Rng& rng) {
  Graph<Scalar> g(&params, true);
  TrainForward<Scalar> fwd = forward_train(g, cfg, sample, rng);
  const JointLossReport& r = fwd.report;
  if (!std::isfinite(r.l_total) || !std::isfinite(r.l_detection) || !std::isfinite(r.l_segmentation) || !std::isfinite(r.l_scmb))
    throw NonFiniteLoss("non-finite loss at step " + std::to_string(state.step), r);
  g.backward(fwd.total);
  std::map<std::string, Mat<Scalar>> grads = g.param_grads();
  if (cfg.train.clip_grad_norm > 0) {
    double sq = 0;
    for (const auto& [k, v] : grads) sq += static_cast<double>(v.squaredNorm());
    const double norm = std::sqrt(sq);
    if (norm > cfg.train.clip_grad_norm) {
      const auto f = static_cast<Scalar>(cfg.train.clip_grad_norm / norm);
      for (auto& [k, v] : grads) v *= f;
    }
  }
  sgd_update(params, grads, state, learning_rate(cfg.train, state.step), cfg.train.momentum, cfg.train.weight_decay);
  ++state.step;
  return r;
}

#define SEASEG_INSTANTIATE(S)                                                                                          \
  template ParamStore<S> init_model<S>(const ModelConfig&, std::uint64_t);                                             \
  template Tensor<S> image_tensor<S>(const Image&);                                                                    \
  template HeadOutputs<S> detection_head<S>(Var<S>);                                                                   \
  template Var<S> detection_loss<S>(const HeadOutputs<S>&, const std::vector<DetectionTarget>&);                       \
  template Var<S> pyramid_roi_align<S>(const FeaturePyramid<S>&, const std::vector<Box>&, const HeadConfig&);          \
  template TrainForward<S> forward_train<S>(Graph<S>&, const ModelConfig&, const TrainSample&, Rng&);                  \
  template std::vector<DetectionResult> infer<S>(const ParamStore<S>&, const ModelConfig&, const Image&,               \
                                                 const InferOptions&);                                                 \
  template VizMaps<S> feature_maps<S>(const ParamStore<S>&, const ModelConfig&, const Image&);                         \
  template void sgd_update<S>(ParamStore<S>&, const std::map<std::string, Mat<S>>&, SgdState<S>&, double, double,      \
                              double);                                                                                 \
  template JointLossReport train_step<S>(ParamStore<S>&, SgdState<S>&, const ModelConfig&, const TrainSample&, Rng&);

SEASEG_INSTANTIATE(float)
SEASEG_INSTANTIATE(double)

}  // namespace seaseg
