#pragma once

#include <cstdint>
#include <vector>

#include "emra/hra.hpp"
#include "emra/ops.hpp"

namespace emra {

// Full-resolution class probabilities plus the per-pixel argmax (ties broken
// toward the lowest class index).
template <typename S>
struct Prediction {
  int h = 0, w = 0, num_classes = 0;
  std::vector<S> probs;       // [h, w, C], rows sum to 1
  std::vector<int> class_map; // [h, w]
};

// Blends region class logits through the association field: every stride-map
// pixel takes the q-weighted mixture of its (up to nine) neighbor regions'
// logit vectors. Invalid neighbors contribute nothing; because q is a
// probability vector the result is a convex combination.
template <typename S>
TensorPtr<S> fuse(const AssociationMap<S>& assoc, const TensorPtr<S>& region_logits) {
  const int gh = assoc.grid_h, gw = assoc.grid_w;
  const int h = assoc.pixels_h(), w = assoc.pixels_w();
  if (region_logits->rank() != 2 || region_logits->shape[0] != gh * gw) {
    throw DimensionError("fuse: region logits " + shape_str(region_logits->shape) +
                         " do not match grid of " + std::to_string(gh * gw) + " regions");
  }
  const int num_classes = region_logits->shape[1];
  const auto& q = assoc.q;
  std::vector<S> d(static_cast<std::size_t>(h) * w * num_classes, S(0));
  for (int y = 0; y < h; ++y) {
    const int gy = y / assoc.stride_h;
    for (int x = 0; x < w; ++x) {
      const int gx = x / assoc.stride_w;
      const std::size_t qi = (static_cast<std::size_t>(y) * w + x) * kNeighborhood;
      S* out_px = d.data() + (static_cast<std::size_t>(y) * w + x) * num_classes;
      for (int k = 0; k < kNeighborhood; ++k) {
        if (!assoc.valid[qi + k]) continue;
        const auto [dy, dx] = neighbor_offset(k);
        const std::size_t s = static_cast<std::size_t>(gy + dy) * gw + (gx + dx);
        const S qv = q->data[qi + k];
        const S* logits_row = region_logits->data.data() + s * num_classes;
        for (int c = 0; c < num_classes; ++c) out_px[c] += qv * logits_row[c];
      }
    }
  }
  auto out = Tensor<S>::create({h, w, num_classes}, std::move(d));
  record(out, {q, region_logits},
         [pq = q.get(), pl = region_logits.get(), valid = assoc.valid, gh, gw, h, w,
          sh = assoc.stride_h, sw = assoc.stride_w, num_classes](Tensor<S>& self) {
           if (pq->requires_grad) pq->ensure_grad();
           if (pl->requires_grad) pl->ensure_grad();
           for (int y = 0; y < h; ++y) {
             const int gy = y / sh;
             for (int x = 0; x < w; ++x) {
               const int gx = x / sw;
               const std::size_t qi = (static_cast<std::size_t>(y) * w + x) * kNeighborhood;
               const S* g_px = self.grad.data() + (static_cast<std::size_t>(y) * w + x) * num_classes;
               for (int k = 0; k < kNeighborhood; ++k) {
                 if (!valid[qi + k]) continue;
                 const auto [dy, dx] = neighbor_offset(k);
                 const std::size_t s = static_cast<std::size_t>(gy + dy) * gw + (gx + dx);
                 const S* logits_row = pl->data.data() + s * num_classes;
                 if (pq->requires_grad) {
                   S acc = S(0);
                   for (int c = 0; c < num_classes; ++c) acc += g_px[c] * logits_row[c];
                   pq->grad[qi + k] += acc;
                 }
                 if (pl->requires_grad) {
                   const S qv = pq->data[qi + k];
                   S* g_row = pl->grad.data() + s * num_classes;
                   for (int c = 0; c < num_classes; ++c) g_row[c] += qv * g_px[c];
                 }
               }
             }
           }
         });
  return out;
}

// Parameterless per-pixel normalization of the class logit vector (zero
// mean, unit variance) before the softmax. Attention-derived logits live in
// a narrow [0,1] band; standardizing them acts as a fixed temperature so the
// readout is equally sharp for every variant, without adding parameters. The
// per-pixel argmax is unchanged by the affine map.
template <typename S>
TensorPtr<S> standardize_classes(const TensorPtr<S>& logits) {
  const int c = logits->shape.back();
  auto unit = Tensor<S>::ones({c});
  auto zero = Tensor<S>::zeros({c});
  return layer_norm(logits, unit, zero, logits->rank() - 1);
}

// Bilinear upsample of the logits map to [h,w], per-pixel normalize-then-
// softmax over classes, argmax class map. Inference-only readout.
template <typename S>
Prediction<S> upsample_and_classify(const TensorPtr<S>& logits_map, int h, int w) {
  if (logits_map->rank() != 3) {
    throw DimensionError("upsample_and_classify: logits must be [H,W,C]");
  }
  if (h < logits_map->shape[0] || w < logits_map->shape[1]) {
    throw DimensionError("upsample_and_classify: target below map resolution");
  }
  NoGradGuard no_grad;
  auto up = bilinear_resize(logits_map, h, w);
  auto probs = softmax(standardize_classes(up), 2);
  Prediction<S> pred;
  pred.h = h;
  pred.w = w;
  pred.num_classes = logits_map->shape[2];
  pred.class_map = argmax_last(probs->shape, probs->data);
  pred.probs = std::move(probs->data);
  return pred;
}

// Cross-entropy against full-resolution labels: the logits map is bilinearly
// upsampled to the label resolution (labels are never downsampled), ignored
// pixels contribute nothing.
template <typename S>
TensorPtr<S> seg_loss(const TensorPtr<S>& logits_map, const std::vector<int>& labels, int h, int w,
                      int ignore_index = kIgnoreIndex) {
  if (logits_map->rank() != 3) {
    throw DimensionError("seg_loss: logits must be [H,W,C]");
  }
  if (labels.size() != static_cast<std::size_t>(h) * static_cast<std::size_t>(w)) {
    throw DimensionError("seg_loss: label count does not match " + std::to_string(h) + "x" +
                         std::to_string(w));
  }
  const int num_classes = logits_map->shape[2];
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != ignore_index && (labels[i] < 0 || labels[i] >= num_classes)) {
      throw DataError("seg_loss: label " + std::to_string(labels[i]) + " at pixel " +
                      std::to_string(i) + " outside [0," + std::to_string(num_classes) + ")");
    }
  }
  auto up = bilinear_resize(logits_map, h, w);
  auto flat = reshape(standardize_classes(up), {h * w, num_classes});
  return cross_entropy_mean(flat, labels, ignore_index);
}

}  // namespace emra
