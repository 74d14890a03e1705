#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "mde/depth_map.hpp"
#include "mde/image_io.hpp"

namespace mde {

namespace detail {

// perceptually-uniform green/purple ramp, linearly interpolated
inline constexpr std::array<std::array<float, 3>, 9> kColormapAnchors = {{
    {68, 1, 84},
    {71, 44, 122},
    {59, 81, 139},
    {44, 113, 142},
    {33, 144, 141},
    {39, 173, 129},
    {92, 200, 99},
    {170, 220, 50},
    {253, 231, 37},
}};

}  // namespace detail

/// Maps t in [0, 1] onto the colour ramp (0 = dark purple, 1 = yellow).
inline std::array<std::uint8_t, 3> colormap_rgb(float t) {
  t = std::clamp(t, 0.0f, 1.0f);
  const float pos = t * float(detail::kColormapAnchors.size() - 1);
  const std::size_t i =
      std::min(std::size_t(pos), detail::kColormapAnchors.size() - 2);
  const float f = pos - float(i);
  const auto& a = detail::kColormapAnchors[i];
  const auto& b = detail::kColormapAnchors[i + 1];
  std::array<std::uint8_t, 3> out;
  for (int c = 0; c < 3; ++c)
    out[std::size_t(c)] = std::uint8_t(std::lround(a[std::size_t(c)] + f * (b[std::size_t(c)] - a[std::size_t(c)])));
  return out;
}

/// False-colour preview of a depth map: nearest valid depth renders at the
/// hot (yellow) end, farthest at the cold end, invalid pixels black.
inline RasterU8 colorize_depth(const DepthMap& d) {
  RasterU8 img;
  img.channels = 3;
  img.height = d.height;
  img.width = d.width;
  img.pixels.assign(3 * d.height * d.width, 0);
  float lo = 0, hi = 0;
  bool any = false;
  for (std::size_t i = 0; i < d.depth.size(); ++i) {
    if (!d.valid[i]) continue;
    if (!any) {
      lo = hi = d.depth[i];
      any = true;
    } else {
      lo = std::min(lo, d.depth[i]);
      hi = std::max(hi, d.depth[i]);
    }
  }
  if (!any) return img;
  const float range = hi > lo ? hi - lo : 1.0f;
  for (std::size_t i = 0; i < d.depth.size(); ++i) {
    if (!d.valid[i]) continue;
    const auto rgb = colormap_rgb(1.0f - (d.depth[i] - lo) / range);
    img.pixels[3 * i + 0] = rgb[0];
    img.pixels[3 * i + 1] = rgb[1];
    img.pixels[3 * i + 2] = rgb[2];
  }
  return img;
}

}  // namespace mde
