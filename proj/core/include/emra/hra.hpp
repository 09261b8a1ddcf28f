#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "emra/encoder.hpp"
#include "emra/ops.hpp"

// Region-association branch: turns the token grid at shared layer M into a
// per-pixel probability field over the 3x3 token neighborhood. Neighbor k
// corresponds to the token offset (k/3 - 1, k%3 - 1), raster order from
// (-1,-1) to (+1,+1); k == 4 is the pixel's own cell.

namespace emra {

inline constexpr int kNeighborhood = 9;

inline std::pair<int, int> neighbor_offset(int k) { return {k / 3 - 1, k % 3 - 1}; }

// Per-pixel validity of the nine neighbors: a neighbor is valid iff the
// offset token cell lies inside the grid. Layout matches the q field
// ([Hg*h, Wg*w, 9], row-major).
inline std::vector<std::uint8_t> neighbor_valid_mask(int grid_h, int grid_w, int stride_h,
                                                     int stride_w) {
  const int h = grid_h * stride_h;
  const int w = grid_w * stride_w;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(h) * w * kNeighborhood, 0);
  for (int y = 0; y < h; ++y) {
    const int gy = y / stride_h;
    for (int x = 0; x < w; ++x) {
      const int gx = x / stride_w;
      std::uint8_t* cell = mask.data() + (static_cast<std::size_t>(y) * w + x) * kNeighborhood;
      for (int k = 0; k < kNeighborhood; ++k) {
        const auto [dy, dx] = neighbor_offset(k);
        const int ny = gy + dy, nx = gx + dx;
        cell[k] = (ny >= 0 && ny < grid_h && nx >= 0 && nx < grid_w) ? 1 : 0;
      }
    }
  }
  return mask;
}

// Per-pixel probabilities over the 3x3 token neighborhood. For every pixel
// the valid entries sum to 1 and invalid entries are exactly zero, so the
// probabilistic regions tessellate the plane with no gaps or overlaps.
template <typename S>
struct AssociationMap {
  TensorPtr<S> q;  // [Hg*h, Wg*w, 9]
  std::vector<std::uint8_t> valid;
  int grid_h = 0, grid_w = 0;
  int stride_h = 0, stride_w = 0;

  int pixels_h() const { return grid_h * stride_h; }
  int pixels_w() const { return grid_w * stride_w; }
};

// Depthwise 3x3 + pointwise stage that maps the [Hg,Wg,D] token grid to
// stride-level association logits. The pointwise stage emits h*w*9 channels
// per token cell: one 9-vector of neighbor logits for each pixel of the cell.
template <typename S>
struct ConvModuleParams {
  TensorPtr<S> dw_kernels;  // [3,3,D]
  TensorPtr<S> dw_bias;     // [D]
  TensorPtr<S> pw_weight;   // [D, h*w*9]
  TensorPtr<S> pw_bias;     // [h*w*9]

  ConvModuleParams() = default;

  ConvModuleParams(int embed_dim, int stride_h, int stride_w, Rng& rng) {
    const int out_ch = stride_h * stride_w * kNeighborhood;
    dw_kernels = Tensor<S>::randn_trunc({3, 3, embed_dim}, S(0.02), rng);
    dw_bias = Tensor<S>::zeros({embed_dim}, true);
    pw_weight = Tensor<S>::randn_trunc({embed_dim, out_ch}, S(0.02), rng);
    pw_bias = Tensor<S>::zeros({out_ch}, true);
  }

  static long long param_count(int embed_dim, int stride_h, int stride_w) {
    const long long d = embed_dim;
    const long long out_ch = static_cast<long long>(stride_h) * stride_w * kNeighborhood;
    return 9 * d + d + d * out_ch + out_ch;
  }

  void append_named(std::vector<std::pair<std::string, TensorPtr<S>>>& out) const {
    out.emplace_back("hra.dw_kernels", dw_kernels);
    out.emplace_back("hra.dw_bias", dw_bias);
    out.emplace_back("hra.pw_weight", pw_weight);
    out.emplace_back("hra.pw_bias", pw_bias);
  }
};

// Token grid fed to the conv module: layer-M tokens with the class rows
// dropped and the patch rows laid out on the [Hg,Wg] grid in raster order.
// The first M encoder layers are shared with the main forward pass.
template <typename S>
TensorPtr<S> token_head(const EncodeOutput<S>& enc, const EncoderConfig& cfg, int m) {
  if (m < 1 || m >= static_cast<int>(enc.tokens.size())) {
    throw ConfigError("token_head: depth " + std::to_string(m) + " outside [1," +
                      std::to_string(enc.tokens.size() - 1) + "]");
  }
  const int g = cfg.grid_size();
  auto patch_rows =
      slice_rows(enc.tokens[static_cast<std::size_t>(m)], cfg.num_classes, cfg.seq_len());
  return reshape(patch_rows, {g, g, cfg.embed_dim});
}

// Unpacks each token cell's h*w*9 channels into the cell's h x w pixel block,
// 9 logits per pixel. Channel index (py*w + px)*9 + k holds neighbor k of
// in-block pixel (py,px).
template <typename S>
TensorPtr<S> unpack_cell_channels(const TensorPtr<S>& x, int stride_h, int stride_w) {
  if (x->rank() != 3 || x->shape[2] != stride_h * stride_w * kNeighborhood) {
    throw DimensionError("unpack_cell_channels: expected channel extent " +
                         std::to_string(stride_h * stride_w * kNeighborhood) + ", got " +
                         shape_str(x->shape));
  }
  const int gh = x->shape[0], gw = x->shape[1];
  const int h = gh * stride_h, w = gw * stride_w;
  const std::size_t ch = static_cast<std::size_t>(x->shape[2]);
  std::vector<S> d(static_cast<std::size_t>(h) * w * kNeighborhood);
  for (int y = 0; y < h; ++y) {
    const int gy = y / stride_h, py = y % stride_h;
    for (int xx = 0; xx < w; ++xx) {
      const int gx = xx / stride_w, px = xx % stride_w;
      const std::size_t src =
          (static_cast<std::size_t>(gy) * gw + gx) * ch +
          static_cast<std::size_t>(py * stride_w + px) * kNeighborhood;
      const std::size_t dst = (static_cast<std::size_t>(y) * w + xx) * kNeighborhood;
      for (int k = 0; k < kNeighborhood; ++k) d[dst + k] = x->data[src + k];
    }
  }
  auto out = Tensor<S>::create({h, w, kNeighborhood}, std::move(d));
  record(out, {x}, [px_in = x.get(), gh, gw, stride_h, stride_w, h, w, ch](Tensor<S>& self) {
    px_in->ensure_grad();
    for (int y = 0; y < h; ++y) {
      const int gy = y / stride_h, py = y % stride_h;
      for (int xx = 0; xx < w; ++xx) {
        const int gx = xx / stride_w, px = xx % stride_w;
        const std::size_t src =
            (static_cast<std::size_t>(gy) * gw + gx) * ch +
            static_cast<std::size_t>(py * stride_w + px) * kNeighborhood;
        const std::size_t dst = (static_cast<std::size_t>(y) * w + xx) * kNeighborhood;
        for (int k = 0; k < kNeighborhood; ++k) px_in->grad[src + k] += self.grad[dst + k];
      }
    }
  });
  return out;
}

// Full conv module: depthwise 3x3 (zero pad), pointwise projection, unpack to
// per-pixel neighbor logits at output stride.
template <typename S>
TensorPtr<S> conv_module(const TensorPtr<S>& grid, const ConvModuleParams<S>& params,
                         int stride_h, int stride_w) {
  auto local = depthwise_conv3x3(grid, params.dw_kernels, params.dw_bias);
  auto projected = pointwise_conv(local, params.pw_weight, params.pw_bias);
  return unpack_cell_channels(projected, stride_h, stride_w);
}

// Masked softmax over the neighbor axis: off-grid neighbors get probability
// exactly 0, the rest normalize to sum 1.
template <typename S>
AssociationMap<S> normalize_associations(const TensorPtr<S>& logits, int grid_h, int grid_w,
                                         int stride_h, int stride_w) {
  if (logits->rank() != 3 || logits->shape[0] != grid_h * stride_h ||
      logits->shape[1] != grid_w * stride_w || logits->shape[2] != kNeighborhood) {
    throw DimensionError("normalize_associations: logits " + shape_str(logits->shape) +
                         " do not match grid " + std::to_string(grid_h) + "x" +
                         std::to_string(grid_w) + " at stride " + std::to_string(stride_h) + "x" +
                         std::to_string(stride_w));
  }
  AssociationMap<S> map;
  map.grid_h = grid_h;
  map.grid_w = grid_w;
  map.stride_h = stride_h;
  map.stride_w = stride_w;
  map.valid = neighbor_valid_mask(grid_h, grid_w, stride_h, stride_w);
  map.q = masked_softmax_last(logits, map.valid);
  return map;
}

}  // namespace emra
