#pragma once

#include <vector>

#include "emra/encoder.hpp"
#include "emra/ops.hpp"

// Class-attention branch: averages encoder attention over the last P layers
// and all heads, splits the result into class-to-patch and patch-to-patch
// blocks, refines the class maps with the symmetrized patch affinity, and
// reads out per-region class logits.

namespace emra {

// Unweighted mean over every head of each of the last P layers' attention
// maps. Mean of row-stochastic matrices, so rows still sum to 1.
template <typename S>
TensorPtr<S> aggregate_attention(const EncodeOutput<S>& enc, int last_p) {
  const int depth = static_cast<int>(enc.attention.size());
  if (last_p < 1 || last_p > depth) {
    throw ConfigError("aggregate_attention: P " + std::to_string(last_p) + " outside [1," +
                      std::to_string(depth) + "]");
  }
  std::vector<TensorPtr<S>> maps;
  for (int l = depth - last_p; l < depth; ++l) {
    for (const auto& head : enc.attention[static_cast<std::size_t>(l)]) {
      maps.push_back(head);
    }
  }
  return mean_of(maps);
}

template <typename S>
struct ClassAttention {
  TensorPtr<S> class_to_patch;    // [C, E]
  TensorPtr<S> patch_affinity;    // [E, E]
  TensorPtr<S> refined;           // [C, E]
  TensorPtr<S> region_logits;     // [E, C], row s is the class-logit vector of region s
};

// Splits the aggregated map. Class tokens occupy rows/columns 0..C-1 by the
// encoder contract; the class-to-class and patch-to-class blocks are unused.
template <typename S>
std::pair<TensorPtr<S>, TensorPtr<S>> split_attention(const TensorPtr<S>& agg, int num_classes,
                                                      int num_patches) {
  const int c = num_classes, e = num_patches;
  if (agg->rank() != 2 || agg->shape[0] != c + e || agg->shape[1] != c + e) {
    throw DimensionError("split_attention: aggregated map " + shape_str(agg->shape) +
                         " does not match C+E = " + std::to_string(c + e));
  }
  auto class_to_patch = block(agg, 0, c, c, c + e);
  auto patch_affinity = block(agg, c, c + e, c, c + e);
  return {class_to_patch, patch_affinity};
}

// refined = class_to_patch * normalize((A + A^T)/2)^T, applied `steps` times.
// steps == 0 returns the input unchanged; an identity affinity is a fixed
// point for any step count.
template <typename S>
TensorPtr<S> refine_with_affinity(const TensorPtr<S>& class_to_patch,
                                  const TensorPtr<S>& patch_affinity, int steps) {
  if (steps < 0) {
    throw ConfigError("refine_with_affinity: steps must be >= 0");
  }
  if (steps == 0) {
    return class_to_patch;
  }
  auto sym = scale(add(patch_affinity, transpose(patch_affinity)), S(0.5));
  auto norm_t = transpose(row_normalize(sym));
  auto refined = class_to_patch;
  for (int i = 0; i < steps; ++i) {
    refined = matmul(refined, norm_t);
  }
  return refined;
}

// Row s of the result is the class-logit vector attributed to region s.
template <typename S>
TensorPtr<S> region_class_logits(const TensorPtr<S>& refined) {
  return transpose(refined);
}

template <typename S>
ClassAttention<S> class_attention(const EncodeOutput<S>& enc, int num_classes, int num_patches,
                                  int last_p, int refine_steps) {
  ClassAttention<S> out;
  auto agg = aggregate_attention(enc, last_p);
  auto [c2p, affinity] = split_attention(agg, num_classes, num_patches);
  out.class_to_patch = c2p;
  out.patch_affinity = affinity;
  out.refined = refine_with_affinity(c2p, affinity, refine_steps);
  out.region_logits = region_class_logits(out.refined);
  return out;
}

}  // namespace emra
