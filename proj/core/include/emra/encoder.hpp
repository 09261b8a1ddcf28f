#pragma once

#include <string>
#include <utility>
#include <vector>

#include "emra/ops.hpp"
#include "emra/tensor.hpp"

namespace emra {

// Transformer encoder configuration. The class-token count equals the number
// of segmentation categories; token_head_depth (M) selects the shared layer
// feeding the region-association branch and attn_agg_layers (P) how many
// trailing layers feed the class-attention branch.
struct EncoderConfig {
  int image_size = 512;
  int patch_size = 16;
  int depth = 12;  // L
  int embed_dim = 192;
  int head_dim = 64;
  int num_classes = 7;  // C
  int token_head_depth = 3;  // M
  int attn_agg_layers = 4;   // P
  int stride_h = 4;
  int stride_w = 4;

  int grid_size() const { return image_size / patch_size; }
  int num_patches() const { return grid_size() * grid_size(); }  // E
  int seq_len() const { return num_patches() + num_classes; }
  int num_heads() const { return embed_dim / head_dim; }
  int mlp_hidden() const { return 4 * embed_dim; }
  int patch_dim() const { return patch_size * patch_size * 3; }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
      throw ConfigError("image_size " + std::to_string(image_size) +
                        " not divisible by patch_size " + std::to_string(patch_size));
    }
    if (embed_dim <= 0 || head_dim <= 0 || embed_dim % head_dim != 0) {
      throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                        " not divisible by head_dim " + std::to_string(head_dim));
    }
    if (depth < 0) throw ConfigError("depth must be >= 0");
    if (num_classes < 0) throw ConfigError("num_classes must be >= 0");
    if (depth > 0 && (token_head_depth < 1 || token_head_depth > depth)) {
      throw ConfigError("token_head_depth " + std::to_string(token_head_depth) +
                        " outside [1," + std::to_string(depth) + "]");
    }
    if (depth > 0 && (attn_agg_layers < 1 || attn_agg_layers > depth)) {
      throw ConfigError("attn_agg_layers " + std::to_string(attn_agg_layers) + " outside [1," +
                        std::to_string(depth) + "]");
    }
    if (stride_h < 1 || stride_w < 1) throw ConfigError("output stride must be >= 1");
  }

  // Closed-form learnable parameter count of the encoder alone.
  long long param_count() const {
    const long long d = embed_dim;
    const long long e = num_patches();
    const long long c = num_classes;
    const long long patch_proj = static_cast<long long>(patch_dim()) * d + d;
    const long long embeddings = c * d + (e + c) * d;
    const long long per_layer = 12 * d * d + 9 * d;
    return patch_proj + embeddings + depth * per_layer + 2 * d;
  }
};

// One transformer layer: pre-norm attention block then pre-norm MLP block,
// both with residual connections. Attention projections carry no biases.
template <typename S>
struct EncoderLayerParams {
  TensorPtr<S> ln1_gamma, ln1_beta;
  TensorPtr<S> w_q, w_k, w_v, w_o;
  TensorPtr<S> ln2_gamma, ln2_beta;
  TensorPtr<S> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

template <typename S>
struct EncoderParams {
  TensorPtr<S> patch_weight;  // [patch_dim, D]
  TensorPtr<S> patch_bias;    // [D]
  TensorPtr<S> class_tokens;  // [C, D]
  TensorPtr<S> pos_embed;     // [E+C, D]
  std::vector<EncoderLayerParams<S>> layers;
  TensorPtr<S> final_gamma, final_beta;

  EncoderParams() = default;

  EncoderParams(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    const int d = cfg.embed_dim;
    const S std02 = S(0.02);
    patch_weight = Tensor<S>::randn_trunc({cfg.patch_dim(), d}, std02, rng);
    patch_bias = Tensor<S>::zeros({d}, true);
    class_tokens = Tensor<S>::randn_trunc({cfg.num_classes, d}, std02, rng);
    pos_embed = Tensor<S>::randn_trunc({cfg.seq_len(), d}, std02, rng);
    layers.resize(static_cast<std::size_t>(cfg.depth));
    for (auto& l : layers) {
      l.ln1_gamma = Tensor<S>::ones({d}, true);
      l.ln1_beta = Tensor<S>::zeros({d}, true);
      l.w_q = Tensor<S>::randn_trunc({d, d}, std02, rng);
      l.w_k = Tensor<S>::randn_trunc({d, d}, std02, rng);
      l.w_v = Tensor<S>::randn_trunc({d, d}, std02, rng);
      l.w_o = Tensor<S>::randn_trunc({d, d}, std02, rng);
      l.ln2_gamma = Tensor<S>::ones({d}, true);
      l.ln2_beta = Tensor<S>::zeros({d}, true);
      l.mlp_w1 = Tensor<S>::randn_trunc({d, cfg.mlp_hidden()}, std02, rng);
      l.mlp_b1 = Tensor<S>::zeros({cfg.mlp_hidden()}, true);
      l.mlp_w2 = Tensor<S>::randn_trunc({cfg.mlp_hidden(), d}, std02, rng);
      l.mlp_b2 = Tensor<S>::zeros({d}, true);
    }
    final_gamma = Tensor<S>::ones({d}, true);
    final_beta = Tensor<S>::zeros({d}, true);
  }

  void append_named(std::vector<std::pair<std::string, TensorPtr<S>>>& out) const {
    out.emplace_back("encoder.patch_weight", patch_weight);
    out.emplace_back("encoder.patch_bias", patch_bias);
    out.emplace_back("encoder.class_tokens", class_tokens);
    out.emplace_back("encoder.pos_embed", pos_embed);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "encoder.layer" + std::to_string(i) + ".";
      const auto& l = layers[i];
      out.emplace_back(p + "ln1_gamma", l.ln1_gamma);
      out.emplace_back(p + "ln1_beta", l.ln1_beta);
      out.emplace_back(p + "w_q", l.w_q);
      out.emplace_back(p + "w_k", l.w_k);
      out.emplace_back(p + "w_v", l.w_v);
      out.emplace_back(p + "w_o", l.w_o);
      out.emplace_back(p + "ln2_gamma", l.ln2_gamma);
      out.emplace_back(p + "ln2_beta", l.ln2_beta);
      out.emplace_back(p + "mlp_w1", l.mlp_w1);
      out.emplace_back(p + "mlp_b1", l.mlp_b1);
      out.emplace_back(p + "mlp_w2", l.mlp_w2);
      out.emplace_back(p + "mlp_b2", l.mlp_b2);
    }
    out.emplace_back("encoder.final_gamma", final_gamma);
    out.emplace_back("encoder.final_beta", final_beta);
  }
};

// Per-layer token sequences and per-layer, per-head attention maps. tokens[0]
// is the embedded input sequence; tokens[l] the output of layer l. The final
// layer norm is applied only to tokens[L] and exposed as `final_tokens`.
template <typename S>
struct EncodeOutput {
  std::vector<TensorPtr<S>> tokens;                    // L+1 entries, each [E+C, D]
  std::vector<std::vector<TensorPtr<S>>> attention;    // [L][heads], each [E+C, E+C]
  TensorPtr<S> final_tokens;                           // [E+C, D]
};

// Splits an [H,W,3] image into raster-ordered patch rows; within a patch,
// pixels in raster order, channels innermost. Pure data movement: returns a
// fresh leaf tensor.
template <typename S>
TensorPtr<S> patchify(const TensorPtr<S>& image, int patch_size) {
  if (image->rank() != 3 || image->shape[2] != 3) {
    throw DimensionError("patchify: expected [H,W,3], got " + shape_str(image->shape));
  }
  const int h = image->shape[0], w = image->shape[1];
  if (h != w || patch_size <= 0 || h % patch_size != 0) {
    throw ConfigError("patchify: image " + shape_str(image->shape) +
                      " not divisible into square patches of " + std::to_string(patch_size));
  }
  const int g = h / patch_size;
  const int row_len = patch_size * patch_size * 3;
  std::vector<S> d(static_cast<std::size_t>(g) * g * row_len);
  std::size_t out_i = 0;
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      for (int py = 0; py < patch_size; ++py) {
        for (int px = 0; px < patch_size; ++px) {
          const std::size_t src =
              ((static_cast<std::size_t>(gy) * patch_size + py) * w +
               static_cast<std::size_t>(gx) * patch_size + px) * 3;
          d[out_i++] = image->data[src];
          d[out_i++] = image->data[src + 1];
          d[out_i++] = image->data[src + 2];
        }
      }
    }
  }
  return Tensor<S>::create({g * g, row_len}, std::move(d));
}

// Inverse of patchify; used by tests and round-trip checks.
template <typename S>
TensorPtr<S> unpatchify(const TensorPtr<S>& patches, int patch_size, int image_size) {
  const int g = image_size / patch_size;
  if (patches->rank() != 2 || patches->shape[0] != g * g ||
      patches->shape[1] != patch_size * patch_size * 3) {
    throw DimensionError("unpatchify: unexpected shape " + shape_str(patches->shape));
  }
  std::vector<S> d(static_cast<std::size_t>(image_size) * image_size * 3);
  std::size_t in_i = 0;
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      for (int py = 0; py < patch_size; ++py) {
        for (int px = 0; px < patch_size; ++px) {
          const std::size_t dst =
              ((static_cast<std::size_t>(gy) * patch_size + py) * image_size +
               static_cast<std::size_t>(gx) * patch_size + px) * 3;
          d[dst] = patches->data[in_i++];
          d[dst + 1] = patches->data[in_i++];
          d[dst + 2] = patches->data[in_i++];
        }
      }
    }
  }
  return Tensor<S>::create({image_size, image_size, 3}, std::move(d));
}

// Projects patches to embeddings, prepends the class tokens (rows 0..C-1),
// and adds position embeddings over the whole sequence.
template <typename S>
TensorPtr<S> embed_tokens(const TensorPtr<S>& patches, const EncoderParams<S>& params) {
  auto projected = linear(patches, params.patch_weight, params.patch_bias);
  auto seq = concat_rows(params.class_tokens, projected);
  return add(seq, params.pos_embed);
}

// Multi-headed self-attention. Queries/keys/values come from bias-free
// projections; scores are scaled by 1/sqrt(head_dim) and softmaxed over keys.
// Returns the projected output and each head's attention map (rows are
// probability vectors over the sequence).
template <typename S>
std::pair<TensorPtr<S>, std::vector<TensorPtr<S>>> msa(const TensorPtr<S>& tokens,
                                                       const EncoderLayerParams<S>& layer,
                                                       int num_heads, int head_dim) {
  auto q = matmul(tokens, layer.w_q);
  auto k = matmul(tokens, layer.w_k);
  auto v = matmul(tokens, layer.w_v);
  const S inv_sqrt_d = static_cast<S>(1.0 / std::sqrt(static_cast<double>(head_dim)));
  std::vector<TensorPtr<S>> head_outputs;
  std::vector<TensorPtr<S>> attn_maps;
  head_outputs.reserve(static_cast<std::size_t>(num_heads));
  attn_maps.reserve(static_cast<std::size_t>(num_heads));
  for (int h = 0; h < num_heads; ++h) {
    const int c0 = h * head_dim, c1 = (h + 1) * head_dim;
    auto qh = slice_cols(q, c0, c1);
    auto kh = slice_cols(k, c0, c1);
    auto vh = slice_cols(v, c0, c1);
    auto scores = scale(matmul(qh, transpose(kh)), inv_sqrt_d);
    auto attn = softmax(scores, 1);
    attn_maps.push_back(attn);
    head_outputs.push_back(matmul(attn, vh));
  }
  auto merged = num_heads == 1 ? head_outputs[0] : concat_cols(head_outputs);
  return {matmul(merged, layer.w_o), std::move(attn_maps)};
}

// Pre-norm transformer layer:
//   a = MSA(LN(t)) + t;  out = MLP(LN(a)) + a
template <typename S>
std::pair<TensorPtr<S>, std::vector<TensorPtr<S>>> encoder_layer(
    const TensorPtr<S>& tokens, const EncoderLayerParams<S>& layer, int num_heads, int head_dim) {
  auto normed = layer_norm(tokens, layer.ln1_gamma, layer.ln1_beta, 1);
  auto [attn_out, attn_maps] = msa(normed, layer, num_heads, head_dim);
  auto a = add(attn_out, tokens);
  auto normed2 = layer_norm(a, layer.ln2_gamma, layer.ln2_beta, 1);
  auto hidden = gelu(linear(normed2, layer.mlp_w1, layer.mlp_b1));
  auto mlp_out = linear(hidden, layer.mlp_w2, layer.mlp_b2);
  return {add(mlp_out, a), std::move(attn_maps)};
}

// Full encoder pass. Records every layer's token output and attention maps so
// the two proxy branches can read intermediate state from one shared forward.
template <typename S>
EncodeOutput<S> encode(const TensorPtr<S>& image, const EncoderParams<S>& params,
                       const EncoderConfig& cfg) {
  cfg.validate();
  if (image->rank() != 3 || image->shape[0] != cfg.image_size ||
      image->shape[1] != cfg.image_size || image->shape[2] != 3) {
    throw DimensionError("encode: image " + shape_str(image->shape) +
                         " does not match configured size " + std::to_string(cfg.image_size));
  }
  EncodeOutput<S> out;
  auto patches = patchify(image, cfg.patch_size);
  auto t = embed_tokens(patches, params);
  out.tokens.push_back(t);
  for (int l = 0; l < cfg.depth; ++l) {
    auto [next, attn] =
        encoder_layer(t, params.layers[static_cast<std::size_t>(l)], cfg.num_heads(), cfg.head_dim);
    t = next;
    out.tokens.push_back(t);
    out.attention.push_back(std::move(attn));
  }
  out.final_tokens = layer_norm(t, params.final_gamma, params.final_beta, 1);
  return out;
}

}  // namespace emra
