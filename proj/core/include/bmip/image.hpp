#pragma once

#include <cstddef>
#include <vector>

namespace bmip {

/// Square RGB raster, values in [0, 1], stored row-major as [side][side][channels].
struct Image {
  std::size_t side = 0;
  std::size_t channels = 3;
  std::vector<double> pixels;

  double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * side + x) * channels + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * side + x) * channels + c]; }

  bool operator==(const Image&) const = default;
};

using Caption = std::vector<int>;

}  // namespace bmip
