#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>

namespace seaseg {

// Row-major binary map (values 0/1), indexed (y, x).
using BinaryMap = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Per-pixel class labels, 0 = background, 1..C = classes.
using LabelMap = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Binary mask targets for one RoI at the three guidance scales.
struct MaskSupervisionSet {
  BinaryMap m7;
  BinaryMap m14;
  BinaryMap m28;

  [[nodiscard]] const BinaryMap& at_size(int size) const {
    return size == 7 ? m7 : size == 14 ? m14 : m28;
  }
};

// RGB image with values in [0, 1], one row-major plane per channel.
struct Image {
  int height = 0;
  int width = 0;
  std::array<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 3> planes;

  Image() = default;
  Image(int h, int w) : height(h), width(w) {
    for (auto& p : planes) p = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Zero(h, w);
  }
  bool operator==(const Image& o) const {
    return height == o.height && width == o.width && planes[0] == o.planes[0] && planes[1] == o.planes[1] &&
           planes[2] == o.planes[2];
  }
};

}  // namespace seaseg
