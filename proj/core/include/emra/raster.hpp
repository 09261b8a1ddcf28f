#pragma once

#include <cstdint>
#include <vector>

#include "emra/errors.hpp"

namespace emra {

// Plain row-major pixel buffer used outside the differentiation graph
// (file I/O, datasets, inference accumulators).
template <typename T>
struct Raster {
  int h = 0, w = 0, c = 1;
  std::vector<T> v;

  Raster() = default;
  Raster(int height, int width, int channels, T fill = T(0))
      : h(height), w(width), c(channels),
        v(static_cast<std::size_t>(height) * width * channels, fill) {}

  T& at(int y, int x, int ch = 0) { return v[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
  const T& at(int y, int x, int ch = 0) const {
    return v[(static_cast<std::size_t>(y) * w + x) * c + ch];
  }
  std::size_t size() const { return v.size(); }
};

using ImageU8 = Raster<std::uint8_t>;

// Mirror-folds an out-of-range coordinate back into [0, n). Edge pixels are
// not repeated (reflection about the last sample).
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i = i % period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace emra
