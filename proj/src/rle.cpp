#include "seaseg/rle.hpp"

#include <algorithm>

namespace seaseg {

RleMask rle_encode(const BinaryMap& mask) {
  RleMask rle{static_cast<int>(mask.rows()), static_cast<int>(mask.cols()), {}};
  std::uint8_t current = 0;
  std::uint32_t run = 0;
  for (Eigen::Index x = 0; x < mask.cols(); ++x)
    for (Eigen::Index y = 0; y < mask.rows(); ++y) {
      const std::uint8_t v = mask(y, x) ? 1 : 0;
      if (v != current) {
        rle.counts.push_back(run);
        run = 0;
        current = v;
      }
      ++run;
    }
  rle.counts.push_back(run);
  return rle;
}

BinaryMap rle_decode(const RleMask& rle) {
  std::uint64_t total = 0;
  for (auto c : rle.counts) total += c;
  if (total != static_cast<std::uint64_t>(rle.height) * rle.width)
    throw RleError("rle_decode: run lengths sum to " + std::to_string(total) + ", expected " +
                   std::to_string(static_cast<std::uint64_t>(rle.height) * rle.width));
  BinaryMap m = BinaryMap::Zero(rle.height, rle.width);
  std::uint64_t pos = 0;
  std::uint8_t v = 0;
  for (auto c : rle.counts) {
    if (v)
      for (std::uint64_t k = pos; k < pos + c; ++k) m(static_cast<Eigen::Index>(k % rle.height), static_cast<Eigen::Index>(k / rle.height)) = 1;
    pos += c;
    v ^= 1;
  }
  return m;
}

std::uint64_t rle_area(const RleMask& rle) {
  std::uint64_t a = 0;
  for (std::size_t i = 1; i < rle.counts.size(); i += 2) a += rle.counts[i];
  return a;
}

Box rle_bbox(const RleMask& rle) {
  if (rle.height == 0) return {};
  std::uint64_t pos = 0;
  int xmin = rle.width, xmax = -1, ymin = rle.height, ymax = -1;
  for (std::size_t i = 0; i < rle.counts.size(); ++i) {
    const std::uint64_t c = rle.counts[i];
    if (i % 2 == 1 && c > 0) {
      const std::uint64_t first = pos, last = pos + c - 1;
      const int x0 = static_cast<int>(first / rle.height), x1 = static_cast<int>(last / rle.height);
      xmin = std::min(xmin, x0);
      xmax = std::max(xmax, x1);
      if (x0 == x1) {
        ymin = std::min(ymin, static_cast<int>(first % rle.height));
        ymax = std::max(ymax, static_cast<int>(last % rle.height));
      } else {
        ymin = 0;
        ymax = rle.height - 1;
      }
    }
    pos += c;
  }
  if (xmax < 0) return {};
  return {static_cast<double>(xmin), static_cast<double>(ymin), static_cast<double>(xmax - xmin + 1),
          static_cast<double>(ymax - ymin + 1)};
}

Box mask_bbox(const BinaryMap& mask) {
  int xmin = static_cast<int>(mask.cols()), xmax = -1, ymin = static_cast<int>(mask.rows()), ymax = -1;
  for (Eigen::Index y = 0; y < mask.rows(); ++y)
    for (Eigen::Index x = 0; x < mask.cols(); ++x)
      if (mask(y, x)) {
        xmin = std::min(xmin, static_cast<int>(x));
        xmax = std::max(xmax, static_cast<int>(x));
        ymin = std::min(ymin, static_cast<int>(y));
        ymax = std::max(ymax, static_cast<int>(y));
      }
  if (xmax < 0) return {};
  return {static_cast<double>(xmin), static_cast<double>(ymin), static_cast<double>(xmax - xmin + 1),
          static_cast<double>(ymax - ymin + 1)};
}

std::uint64_t rle_intersection(const RleMask& a, const RleMask& b) {
  if (a.height != b.height || a.width != b.width) throw RleError("rle_intersection: mask sizes differ");
  std::uint64_t inter = 0;
  std::size_t ia = 0, ib = 0;
  std::uint64_t ra = a.counts.empty() ? 0 : a.counts[0];
  std::uint64_t rb = b.counts.empty() ? 0 : b.counts[0];
  bool va = false, vb = false;
  while (ia < a.counts.size() && ib < b.counts.size()) {
    const std::uint64_t step = std::min(ra, rb);
    if (va && vb) inter += step;
    ra -= step;
    rb -= step;
    if (ra == 0) {
      if (++ia < a.counts.size()) ra = a.counts[ia];
      va = !va;
    }
    if (rb == 0) {
      if (++ib < b.counts.size()) rb = b.counts[ib];
      vb = !vb;
    }
  }
  return inter;
}

}  // namespace seaseg
