#pragma once

// Small models and samples shared by the detector tests and the acceptance
// runner.

#include "seaseg/dataio.hpp"
#include "seaseg/detector.hpp"

#include <random>

namespace detcases {

using namespace seaseg;

// Tiny widths for gradient checks and fast smoke runs.
inline ModelConfig micro_config(int classes) {
  ModelConfig c = ModelConfig::toy(classes);
  c.backbone.stem_width = 2;
  c.backbone.stage_widths = {2, 3, 3, 4};
  c.fpn.channels = 3;
  c.sea.channels = 3;
  c.scmb.channels = 2;
  c.scmb.fusion_channels = 2;
  c.head.hidden = 6;
  c.sampling.max_mask_rois = 3;
  c.proposals.random_boxes = 4;
  c.proposals.jitter_copies = 2;
  return c;
}

inline Image noise_image(int h, int w, std::uint64_t seed) {
  Image img(h, w);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0, 1);
  for (auto& p : img.planes)
    for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
  return img;
}

// Two rectangles painted onto a noise image, annotated with classes 1 and 2.
inline TrainSample two_instance_sample(int size = 64) {
  Image img = noise_image(size, size, 3);
  BinaryMap a = BinaryMap::Zero(size, size), b = BinaryMap::Zero(size, size);
  a.block(8, 6, 20, 24).setOnes();
  b.block(34, 30, 22, 18).setOnes();
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      if (a(y, x)) img.planes[0](y, x) = 0.9f;
      if (b(y, x)) img.planes[2](y, x) = 0.9f;
    }
  return TrainSample::make(img, {InstanceAnnotation::from_mask(a, 1, 1), InstanceAnnotation::from_mask(b, 2, 2)});
}

inline TrainSample synth_sample(int size, std::uint64_t seed) {
  SynthConfig sc;
  sc.num_images = 1;
  sc.height = sc.width = size;
  sc.seed = seed;
  const auto ds = synth_generate(sc);
  return TrainSample::make(ds.images[0], ds.manifest.annotations_for(ds.manifest.images[0].id));
}

inline bool same_results(const std::vector<DetectionResult>& a, const std::vector<DetectionResult>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i].box == b[i].box) || a[i].class_id != b[i].class_id || a[i].score != b[i].score || !(a[i].mask == b[i].mask))
      return false;
  return true;
}

}  // namespace detcases
