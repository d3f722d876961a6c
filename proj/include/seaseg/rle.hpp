#pragma once

#include "seaseg/box.hpp"
#include "seaseg/types.hpp"

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace seaseg {

// Run-length encoded binary mask. Runs alternate 0s and 1s over the pixels
// in column-major order (x outer, y inner), starting with a (possibly empty)
// run of 0s.
struct RleMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint32_t> counts;

  bool operator==(const RleMask&) const = default;
};

struct RleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

RleMask rle_encode(const BinaryMap& mask);
BinaryMap rle_decode(const RleMask& rle);

std::uint64_t rle_area(const RleMask& rle);

// Tight integer bounding box (x, y, w, h) of the 1-pixels; zero box if empty.
Box rle_bbox(const RleMask& rle);
Box mask_bbox(const BinaryMap& mask);

// Intersection pixel count computed by merging runs.
std::uint64_t rle_intersection(const RleMask& a, const RleMask& b);

}  // namespace seaseg
