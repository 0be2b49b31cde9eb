#pragma once

#include <algorithm>
#include <cmath>

#include "iseg/types.hpp"

namespace iseg {

/// Bilinear resize of every column of a (src.rows*src.cols) x T map, with
/// half-pixel centers (no corner alignment) and edge clamping.
inline Matrix resize_bilinear(const Matrix& map, Grid src, Grid dst) {
  if (static_cast<std::size_t>(map.rows()) != src.size()) throw ShapeError("map rows do not match source grid");
  if (src == dst) return map;
  Matrix out(static_cast<Eigen::Index>(dst.size()), map.cols());
  const double sy = static_cast<double>(src.rows) / dst.rows;
  const double sx = static_cast<double>(src.cols) / dst.cols;
  for (int r = 0; r < dst.rows; ++r) {
    const double fy = std::max(0.0, (r + 0.5) * sy - 0.5);
    const int y0 = std::min(static_cast<int>(fy), src.rows - 1);
    const int y1 = std::min(y0 + 1, src.rows - 1);
    const double wy = fy - y0;
    for (int c = 0; c < dst.cols; ++c) {
      const double fx = std::max(0.0, (c + 0.5) * sx - 0.5);
      const int x0 = std::min(static_cast<int>(fx), src.cols - 1);
      const int x1 = std::min(x0 + 1, src.cols - 1);
      const double wx = fx - x0;
      out.row(dst.index(r, c)) = (1 - wy) * ((1 - wx) * map.row(src.index(y0, x0)) + wx * map.row(src.index(y0, x1))) +
                                 wy * ((1 - wx) * map.row(src.index(y1, x0)) + wx * map.row(src.index(y1, x1)));
    }
  }
  return out;
}

/// Nearest-neighbour resize of a label map (pixel-center sampling).
inline SegMask resize_nearest(const SegMask& mask, Grid dst) {
  if (mask.grid == dst) return mask;
  SegMask out(dst);
  out.palette = mask.palette;
  for (int r = 0; r < dst.rows; ++r) {
    const int sr = std::min(static_cast<int>((r + 0.5) * mask.grid.rows / dst.rows), mask.grid.rows - 1);
    for (int c = 0; c < dst.cols; ++c) {
      const int sc = std::min(static_cast<int>((c + 0.5) * mask.grid.cols / dst.cols), mask.grid.cols - 1);
      out.at(r, c) = mask.at(sr, sc);
    }
  }
  return out;
}

}  // namespace iseg
