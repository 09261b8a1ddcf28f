#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "emra/hra.hpp"
#include "emra/metrics.hpp"
#include "emra/raster.hpp"

namespace emra {

// Class-index map -> palette RGB image.
inline ImageU8 render_class_map(const std::vector<int>& class_map, int h, int w,
                                const LabelCodec& codec) {
  std::vector<std::uint8_t> labels(class_map.size());
  for (std::size_t i = 0; i < class_map.size(); ++i) {
    labels[i] = static_cast<std::uint8_t>(class_map[i]);
  }
  return codec.encode_rgb(labels, h, w);
}

// Grayscale render of a scalar field, scaled so the field maximum maps to
// 255. An all-zero field stays all zero.
template <typename S>
ImageU8 render_grayscale(const std::vector<S>& values, int h, int w) {
  S mx = S(0);
  for (const S v : values) mx = std::max(mx, v);
  ImageU8 out(h, w, 1);
  if (mx <= S(0)) return out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double scaled = 255.0 * static_cast<double>(values[i]) / static_cast<double>(mx);
    out.v[i] = static_cast<std::uint8_t>(std::lround(std::clamp(scaled, 0.0, 255.0)));
  }
  return out;
}

// Per-pixel entropy of the association field in units of ln 9, so a one-hot
// field renders all-zero and a uniform interior pixel renders bright.
template <typename S>
ImageU8 render_association_entropy(const AssociationMap<S>& assoc) {
  const int h = assoc.pixels_h(), w = assoc.pixels_w();
  ImageU8 out(h, w, 1);
  const double inv_ln9 = 1.0 / std::log(9.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t base = (static_cast<std::size_t>(y) * w + x) * kNeighborhood;
      double entropy = 0.0;
      for (int k = 0; k < kNeighborhood; ++k) {
        const double p = static_cast<double>(assoc.q->data[base + k]);
        if (p > 0.0) entropy -= p * std::log(p);
      }
      const double scaled = 255.0 * entropy * inv_ln9;
      out.v[static_cast<std::size_t>(y) * w + x] =
          static_cast<std::uint8_t>(std::lround(std::clamp(scaled, 0.0, 255.0)));
    }
  }
  return out;
}

// One neighbor plane of the association field as grayscale (q in [0,1]).
template <typename S>
ImageU8 render_association_plane(const AssociationMap<S>& assoc, int neighbor) {
  const int h = assoc.pixels_h(), w = assoc.pixels_w();
  ImageU8 out(h, w, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t base = (static_cast<std::size_t>(y) * w + x) * kNeighborhood;
      const double p = static_cast<double>(assoc.q->data[base + neighbor]);
      out.v[static_cast<std::size_t>(y) * w + x] =
          static_cast<std::uint8_t>(std::lround(std::clamp(255.0 * p, 0.0, 255.0)));
    }
  }
  return out;
}

}  // namespace emra
