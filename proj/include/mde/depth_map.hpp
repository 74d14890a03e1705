#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "mde/errors.hpp"

namespace mde {

/// Single-channel H x W depth raster (meters, or transformed units) with a
/// per-pixel validity mask. Invalid pixels (depth holes) are excluded from
/// losses and metrics.
struct DepthMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> depth;     // row-major
  std::vector<std::uint8_t> valid;

  DepthMap() = default;
  DepthMap(std::size_t h, std::size_t w, float fill = 0.f)
      : height(h), width(w), depth(h * w, fill), valid(h * w, 1) {}

  std::size_t size() const { return depth.size(); }
  float& at(std::size_t r, std::size_t c) { return depth[r * width + c]; }
  float at(std::size_t r, std::size_t c) const { return depth[r * width + c]; }
};

/// Depth-reciprocal target transform: clamp to [min_depth, m], then map
/// y -> m / y. Output lies in [1, m / min_depth]; invalid pixels pass
/// through untouched (never divided).
inline DepthMap depth_transform(const DepthMap& in, double m = 10.0, double min_depth = 1.0) {
  if (!(m > 0)) throw ConfigError("depth_transform: max depth must be positive");
  if (!(min_depth > 0) || min_depth > m)
    throw ConfigError("depth_transform: min_depth must lie in (0, m]");
  DepthMap out = in;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (!in.valid[i]) continue;
    double y = std::clamp(double(in.depth[i]), min_depth, m);
    out.depth[i] = float(m / y);
  }
  return out;
}

/// Inverse of depth_transform: transformed values in [1, m/min_depth] back to
/// meters in [min_depth, m].
inline DepthMap depth_untransform(const DepthMap& in, double m = 10.0, double min_depth = 1.0) {
  if (!(m > 0)) throw ConfigError("depth_untransform: max depth must be positive");
  if (!(min_depth > 0) || min_depth > m)
    throw ConfigError("depth_untransform: min_depth must lie in (0, m]");
  DepthMap out = in;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (!in.valid[i]) continue;
    double y = std::clamp(double(in.depth[i]), 1.0, m / min_depth);
    out.depth[i] = float(m / y);
  }
  return out;
}

}  // namespace mde
