#include "emra/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "emra/errors.hpp"
#include "emra/metrics.hpp"

namespace emra {

namespace {

constexpr float kNoiseSigma = 8.0f / 255.0f;

void paint_class(Raster<float>& image, std::vector<std::uint8_t>& labels, int y, int x, int cls,
                 const LabelCodec& codec) {
  const auto& rgb = codec.entry(cls).rgb;
  for (int ch = 0; ch < 3; ++ch) {
    image.at(y, x, ch) = static_cast<float>(rgb[static_cast<std::size_t>(ch)]) / 255.0f;
  }
  labels[static_cast<std::size_t>(y) * image.w + x] = static_cast<std::uint8_t>(cls);
}

}  // namespace

std::vector<Sample> gen_synthetic(const SyntheticSpec& spec) {
  const LabelCodec& codec = LabelCodec::loveda();
  if (spec.num_classes < 1 || spec.num_classes > codec.num_classes()) {
    throw ConfigError("synthetic: class count " + std::to_string(spec.num_classes) +
                      " outside [1," + std::to_string(codec.num_classes()) + "] (palette bound)");
  }
  if (spec.image_size < 1 || spec.count < 0) {
    throw ConfigError("synthetic: bad image size or count");
  }
  if (spec.shapes_min < 0 || spec.shapes_max < spec.shapes_min) {
    throw ConfigError("synthetic: bad shapes-per-image range");
  }

  Rng rng(spec.seed);
  const int n = spec.image_size;
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(spec.count));

  for (int i = 0; i < spec.count; ++i) {
    Sample s;
    s.image = Raster<float>(n, n, 3);
    s.labels.assign(static_cast<std::size_t>(n) * n, 0);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) paint_class(s.image, s.labels, y, x, 0, codec);
    }

    const int shapes =
        spec.shapes_min + (spec.shapes_max > spec.shapes_min
                               ? rng.uniform_int(spec.shapes_max - spec.shapes_min + 1)
                               : 0);
    for (int sh = 0; sh < shapes && spec.num_classes > 1; ++sh) {
      const int cls = 1 + rng.uniform_int(spec.num_classes - 1);
      const int kind = rng.uniform_int(3);
      if (kind == 0) {
        // axis-aligned rectangle
        const int rh = 3 + rng.uniform_int(std::max(1, n / 2 - 3));
        const int rw = 3 + rng.uniform_int(std::max(1, n / 2 - 3));
        const int y0 = rng.uniform_int(std::max(1, n - rh));
        const int x0 = rng.uniform_int(std::max(1, n - rw));
        for (int y = y0; y < std::min(n, y0 + rh); ++y) {
          for (int x = x0; x < std::min(n, x0 + rw); ++x) paint_class(s.image, s.labels, y, x, cls, codec);
        }
      } else if (kind == 1) {
        // disk
        const int r = 2 + rng.uniform_int(std::max(1, n / 4));
        const int cy = rng.uniform_int(n);
        const int cx = rng.uniform_int(n);
        for (int y = std::max(0, cy - r); y <= std::min(n - 1, cy + r); ++y) {
          for (int x = std::max(0, cx - r); x <= std::min(n - 1, cx + r); ++x) {
            const int dy = y - cy, dx = x - cx;
            if (dy * dy + dx * dx <= r * r) paint_class(s.image, s.labels, y, x, cls, codec);
          }
        }
      } else {
        // horizontal stripe across the full width
        const int sh_h = 2 + rng.uniform_int(std::max(1, n / 6));
        const int y0 = rng.uniform_int(std::max(1, n - sh_h));
        for (int y = y0; y < std::min(n, y0 + sh_h); ++y) {
          for (int x = 0; x < n; ++x) paint_class(s.image, s.labels, y, x, cls, codec);
        }
      }
    }

    for (auto& v : s.image.v) {
      v = std::clamp(v + static_cast<float>(rng.normal(0.0, kNoiseSigma)), 0.0f, 1.0f);
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace emra
