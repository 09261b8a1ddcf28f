#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "emra/encoder.hpp"
#include "emra/hra.hpp"
#include "emra/mca.hpp"
#include "emra/seg_head.hpp"

namespace emra {

// Readout variants used by the ablation harness. `full` is the shipped
// model: class-attention region logits blended through the association field.
// `baseline` is a bare encoder with a linear per-patch classifier whose grid
// logits are upsampled directly; the single-proxy variants swap exactly one
// side of the full readout.
enum class Variant {
  baseline,
  hra_only,
  mca_only,
  full,
};

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::hra_only: return "hra";
    case Variant::mca_only: return "mca";
    case Variant::full: return "full";
  }
  return "full";
}

inline Variant variant_from_name(const std::string& name) {
  if (name == "baseline") return Variant::baseline;
  if (name == "hra") return Variant::hra_only;
  if (name == "mca") return Variant::mca_only;
  if (name == "full") return Variant::full;
  throw ConfigError("unknown model variant '" + name + "'");
}

struct ModelConfig {
  EncoderConfig encoder;
  Variant variant = Variant::full;
  int refine_steps = 1;

  bool uses_association() const {
    return variant == Variant::hra_only || variant == Variant::full;
  }
  bool uses_linear_head() const {
    return variant == Variant::baseline || variant == Variant::hra_only;
  }

  void validate() const {
    encoder.validate();
    if (encoder.num_classes < 1) {
      throw ConfigError("model requires at least one class token");
    }
    if (encoder.depth < 1) {
      throw ConfigError("model requires at least one encoder layer");
    }
    if (refine_steps < 0) {
      throw ConfigError("refine_steps must be >= 0");
    }
  }

  long long param_count() const {
    long long n = encoder.param_count();
    if (uses_association()) {
      n += ConvModuleParams<float>::param_count(encoder.embed_dim, encoder.stride_h,
                                                encoder.stride_w);
    }
    if (uses_linear_head()) {
      n += static_cast<long long>(encoder.embed_dim) * encoder.num_classes + encoder.num_classes;
    }
    return n;
  }
};

// Named presets. `tiny` is the desk-scale configuration; ti/s/b/l follow the
// standard transformer variant table (head size 64, MLP 4x, patch 16).
inline ModelConfig preset_config(const std::string& name) {
  ModelConfig cfg;
  if (name == "tiny") {
    cfg.encoder = {.image_size = 32, .patch_size = 8, .depth = 4, .embed_dim = 32,
                   .head_dim = 16, .num_classes = 4, .token_head_depth = 2,
                   .attn_agg_layers = 2};
  } else if (name == "ti") {
    cfg.encoder = {.image_size = 512, .patch_size = 16, .depth = 12, .embed_dim = 192,
                   .head_dim = 64, .num_classes = 7, .token_head_depth = 3,
                   .attn_agg_layers = 4};
  } else if (name == "s") {
    cfg.encoder = {.image_size = 512, .patch_size = 16, .depth = 12, .embed_dim = 384,
                   .head_dim = 64, .num_classes = 7, .token_head_depth = 3,
                   .attn_agg_layers = 4};
  } else if (name == "b") {
    cfg.encoder = {.image_size = 512, .patch_size = 16, .depth = 12, .embed_dim = 768,
                   .head_dim = 64, .num_classes = 7, .token_head_depth = 3,
                   .attn_agg_layers = 4};
  } else if (name == "l") {
    cfg.encoder = {.image_size = 640, .patch_size = 16, .depth = 24, .embed_dim = 1024,
                   .head_dim = 64, .num_classes = 7, .token_head_depth = 3,
                   .attn_agg_layers = 4};
  } else {
    throw ConfigError("unknown model preset '" + name + "' (expected tiny|ti|s|b|l)");
  }
  return cfg;
}

// Everything one forward pass produces that downstream consumers may want:
// the encoder trace, the association field (when the variant has one), the
// per-region class logits, and the spatial logits map the loss runs on.
template <typename S>
struct ForwardArtifacts {
  EncodeOutput<S> enc;
  std::optional<AssociationMap<S>> assoc;
  TensorPtr<S> region_logits;  // [E, C]
  TensorPtr<S> logits_map;     // [H', W', C]
};

template <typename S>
struct Model {
  ModelConfig cfg;
  EncoderParams<S> enc;
  std::optional<ConvModuleParams<S>> hra;
  TensorPtr<S> head_weight;  // [D, C] when the variant has a linear head
  TensorPtr<S> head_bias;    // [C]

  Model() = default;

  Model(const ModelConfig& config, Rng& rng) : cfg(config) {
    cfg.validate();
    enc = EncoderParams<S>(cfg.encoder, rng);
    if (cfg.uses_association()) {
      hra.emplace(cfg.encoder.embed_dim, cfg.encoder.stride_h, cfg.encoder.stride_w, rng);
    }
    if (cfg.uses_linear_head()) {
      head_weight =
          Tensor<S>::randn_trunc({cfg.encoder.embed_dim, cfg.encoder.num_classes}, S(0.02), rng);
      head_bias = Tensor<S>::zeros({cfg.encoder.num_classes}, true);
    }
  }

  std::vector<std::pair<std::string, TensorPtr<S>>> named_params() const {
    std::vector<std::pair<std::string, TensorPtr<S>>> out;
    enc.append_named(out);
    if (hra) {
      hra->append_named(out);
    }
    if (head_weight) {
      out.emplace_back("head.weight", head_weight);
      out.emplace_back("head.bias", head_bias);
    }
    return out;
  }

  long long allocated_param_count() const {
    long long n = 0;
    for (const auto& [name, t] : named_params()) n += static_cast<long long>(t->numel());
    return n;
  }

  // Structural copy with parameter values cast to T. clone() keeps the
  // precision; the gradient checker also instantiates a long double copy for
  // its high-accuracy probes.
  template <typename T>
  Model<T> cast() const {
    Model<T> copy;
    copy.cfg = cfg;
    Rng dummy(0);
    copy.enc = EncoderParams<T>(cfg.encoder, dummy);
    if (cfg.uses_association()) {
      copy.hra.emplace(cfg.encoder.embed_dim, cfg.encoder.stride_h, cfg.encoder.stride_w, dummy);
    }
    if (cfg.uses_linear_head()) {
      copy.head_weight = Tensor<T>::zeros({cfg.encoder.embed_dim, cfg.encoder.num_classes}, true);
      copy.head_bias = Tensor<T>::zeros({cfg.encoder.num_classes}, true);
    }
    auto src = named_params();
    auto dst = copy.named_params();
    for (std::size_t i = 0; i < src.size(); ++i) {
      auto& out = dst[i].second->data;
      const auto& in = src[i].second->data;
      for (std::size_t j = 0; j < in.size(); ++j) out[j] = static_cast<T>(in[j]);
    }
    return copy;
  }

  Model clone() const { return cast<S>(); }

  // Per-patch tokens after the final layer norm, [E, D].
  TensorPtr<S> final_patch_tokens(const EncodeOutput<S>& out) const {
    return slice_rows(out.final_tokens, cfg.encoder.num_classes, cfg.encoder.seq_len());
  }

  ForwardArtifacts<S> forward(const TensorPtr<S>& image) const {
    return readout(encode(image, enc, cfg.encoder));
  }

  // Variant readout on an existing encoder trace.
  ForwardArtifacts<S> readout(EncodeOutput<S> trace) const {
    ForwardArtifacts<S> art;
    art.enc = std::move(trace);
    const int g = cfg.encoder.grid_size();
    const int c = cfg.encoder.num_classes;

    if (cfg.uses_association()) {
      auto grid = token_head(art.enc, cfg.encoder, cfg.encoder.token_head_depth);
      auto logits =
          conv_module(grid, *hra, cfg.encoder.stride_h, cfg.encoder.stride_w);
      art.assoc = normalize_associations(logits, g, g, cfg.encoder.stride_h, cfg.encoder.stride_w);
    }

    switch (cfg.variant) {
      case Variant::full: {
        art.region_logits = class_attention(art.enc, c, cfg.encoder.num_patches(),
                                            cfg.encoder.attn_agg_layers, cfg.refine_steps)
                                .region_logits;
        art.logits_map = fuse(*art.assoc, art.region_logits);
        break;
      }
      case Variant::hra_only: {
        art.region_logits = linear(final_patch_tokens(art.enc), head_weight, head_bias);
        art.logits_map = fuse(*art.assoc, art.region_logits);
        break;
      }
      case Variant::mca_only: {
        art.region_logits = class_attention(art.enc, c, cfg.encoder.num_patches(),
                                            cfg.encoder.attn_agg_layers, cfg.refine_steps)
                                .region_logits;
        art.logits_map = reshape(art.region_logits, {g, g, c});
        break;
      }
      case Variant::baseline: {
        art.region_logits = linear(final_patch_tokens(art.enc), head_weight, head_bias);
        art.logits_map = reshape(art.region_logits, {g, g, c});
        break;
      }
    }
    return art;
  }

  TensorPtr<S> loss(const TensorPtr<S>& image, const std::vector<int>& labels, int h, int w,
                    int ignore_index = kIgnoreIndex) const {
    auto art = forward(image);
    return seg_loss(art.logits_map, labels, h, w, ignore_index);
  }

  Prediction<S> predict(const TensorPtr<S>& image, int out_h, int out_w) const {
    NoGradGuard no_grad;
    auto art = forward(image);
    return upsample_and_classify(art.logits_map, out_h, out_w);
  }

  void zero_grad() const {
    for (const auto& [name, t] : named_params()) t->zero_grad();
  }
};

}  // namespace emra
