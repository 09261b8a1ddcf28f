#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "emra/model.hpp"
#include "emra/raster.hpp"

namespace emra {

template <typename S>
TensorPtr<S> image_to_tensor(const Raster<S>& image) {
  return Tensor<S>::create({image.h, image.w, image.c}, image.v);
}

template <typename S>
Raster<S> tensor_to_raster(const TensorPtr<S>& t) {
  if (t->rank() != 3) {
    throw DimensionError("tensor_to_raster: expected rank-3 tensor");
  }
  Raster<S> r(t->shape[0], t->shape[1], t->shape[2]);
  r.v = t->data;
  return r;
}

template <typename S>
Raster<S> resize_raster(const Raster<S>& image, int out_h, int out_w) {
  if (out_h == image.h && out_w == image.w) return image;
  NoGradGuard no_grad;
  return tensor_to_raster(bilinear_resize(image_to_tensor(image), out_h, out_w));
}

// Extend an image to at least (h, w) by mirror reflection on the right and
// bottom edges.
template <typename S>
Raster<S> reflect_pad_to(const Raster<S>& image, int h, int w) {
  if (image.h >= h && image.w >= w) return image;
  const int oh = std::max(h, image.h), ow = std::max(w, image.w);
  Raster<S> out(oh, ow, image.c);
  for (int y = 0; y < oh; ++y) {
    const int sy = reflect_index(y, image.h);
    for (int x = 0; x < ow; ++x) {
      const int sx = reflect_index(x, image.w);
      for (int ch = 0; ch < image.c; ++ch) out.at(y, x, ch) = image.at(sy, sx, ch);
    }
  }
  return out;
}

template <typename S>
Raster<S> mirror_lr(const Raster<S>& image) {
  Raster<S> out(image.h, image.w, image.c);
  for (int y = 0; y < image.h; ++y) {
    for (int x = 0; x < image.w; ++x) {
      for (int ch = 0; ch < image.c; ++ch) out.at(y, x, ch) = image.at(y, image.w - 1 - x, ch);
    }
  }
  return out;
}

// Plain whole-image inference at the model's native input size.
template <typename S>
Prediction<S> predict_image(const Model<S>& model, const Raster<S>& image) {
  return model.predict(image_to_tensor(image), image.h, image.w);
}

// Tiles the image with training-sized windows, averages per-pixel class
// probabilities over overlapping tiles, and argmaxes the blend. Images
// smaller than the window are reflection-padded first and the probabilities
// cropped back; the rightmost/bottom tiles are clamped to the image boundary.
template <typename S>
Prediction<S> sliding_window_infer(const Model<S>& model, const Raster<S>& image, int window = 0,
                                   int stride = 0) {
  const int native = model.cfg.encoder.image_size;
  if (window <= 0) window = native;
  if (window != native) {
    throw ConfigError("sliding window " + std::to_string(window) +
                      " must match the model input size " + std::to_string(native));
  }
  if (stride <= 0) stride = std::max(1, window / 2);

  const Raster<S> padded = reflect_pad_to(image, window, window);
  const int ph = padded.h, pw = padded.w;
  const int c = model.cfg.encoder.num_classes;

  auto tile_starts = [&](int extent) {
    std::vector<int> starts;
    for (int s = 0;; s += stride) {
      if (s + window >= extent) {
        starts.push_back(extent - window);
        break;
      }
      starts.push_back(s);
    }
    return starts;
  };
  const auto ys = tile_starts(ph);
  const auto xs = tile_starts(pw);

  std::vector<S> acc(static_cast<std::size_t>(ph) * pw * c, S(0));
  std::vector<S> hits(static_cast<std::size_t>(ph) * pw, S(0));
  Raster<S> tile(window, window, padded.c);
  for (const int y0 : ys) {
    for (const int x0 : xs) {
      for (int y = 0; y < window; ++y) {
        for (int x = 0; x < window; ++x) {
          for (int ch = 0; ch < padded.c; ++ch) tile.at(y, x, ch) = padded.at(y0 + y, x0 + x, ch);
        }
      }
      const Prediction<S> p = predict_image(model, tile);
      for (int y = 0; y < window; ++y) {
        for (int x = 0; x < window; ++x) {
          const std::size_t dst = (static_cast<std::size_t>(y0 + y) * pw + (x0 + x));
          const std::size_t src = (static_cast<std::size_t>(y) * window + x) * c;
          for (int ch = 0; ch < c; ++ch) acc[dst * c + ch] += p.probs[src + ch];
          hits[dst] += S(1);
        }
      }
    }
  }

  Prediction<S> out;
  out.h = image.h;
  out.w = image.w;
  out.num_classes = c;
  out.probs.resize(static_cast<std::size_t>(image.h) * image.w * c);
  for (int y = 0; y < image.h; ++y) {
    for (int x = 0; x < image.w; ++x) {
      const std::size_t src = static_cast<std::size_t>(y) * pw + x;
      const std::size_t dst = (static_cast<std::size_t>(y) * image.w + x) * c;
      const S inv = S(1) / hits[src];
      for (int ch = 0; ch < c; ++ch) out.probs[dst + ch] = acc[src * c + ch] * inv;
    }
  }
  out.class_map = argmax_last<S>({image.h, image.w, c}, out.probs);
  return out;
}

inline const std::vector<double>& default_scales() {
  static const std::vector<double> scales = {0.5, 0.75, 1.0, 1.25, 1.5, 1.75};
  return scales;
}

// Test-time augmentation: run sliding-window inference over rescaled (and
// optionally mirrored) copies, map the probabilities back to the input
// resolution, and average. A single 1.0 scale without flip reduces exactly to
// sliding_window_infer.
template <typename S>
Prediction<S> multiscale_infer(const Model<S>& model, const Raster<S>& image,
                               const std::vector<double>& scales = default_scales(),
                               bool flip = false, int window = 0, int stride = 0) {
  if (scales.empty()) {
    throw ConfigError("multiscale_infer: scale list must be non-empty");
  }
  const int c = model.cfg.encoder.num_classes;
  std::vector<S> acc(static_cast<std::size_t>(image.h) * image.w * c, S(0));
  int runs = 0;

  auto accumulate = [&](const Raster<S>& input, bool mirrored, int sh, int sw) {
    Prediction<S> p = sliding_window_infer(model, input, window, stride);
    Raster<S> probs(sh, sw, c);
    probs.v = std::move(p.probs);
    if (mirrored) probs = mirror_lr(probs);
    if (sh != image.h || sw != image.w) probs = resize_raster(probs, image.h, image.w);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += probs.v[i];
    ++runs;
  };

  for (const double s : scales) {
    const int sh = std::max(1, static_cast<int>(std::lround(image.h * s)));
    const int sw = std::max(1, static_cast<int>(std::lround(image.w * s)));
    const Raster<S> scaled = (sh == image.h && sw == image.w) ? image : resize_raster(image, sh, sw);
    accumulate(scaled, false, sh, sw);
    if (flip) {
      accumulate(mirror_lr(scaled), true, sh, sw);
    }
  }

  Prediction<S> out;
  out.h = image.h;
  out.w = image.w;
  out.num_classes = c;
  const S inv = S(1) / static_cast<S>(runs);
  out.probs.resize(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out.probs[i] = acc[i] * inv;
  out.class_map = argmax_last<S>({image.h, image.w, c}, out.probs);
  return out;
}

}  // namespace emra
