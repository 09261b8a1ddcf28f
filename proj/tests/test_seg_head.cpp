#include <gtest/gtest.h>

#include <cmath>

#include "emra/gradcheck.hpp"
#include "emra/infer.hpp"
#include "emra/model.hpp"
#include "emra/seg_head.hpp"
#include "emra/synthetic.hpp"

using namespace emra;

namespace {

ModelConfig tiny_model_config(Variant v = Variant::full) {
  ModelConfig cfg = preset_config("tiny");
  cfg.variant = v;
  return cfg;
}

template <typename S>
TensorPtr<S> random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<S> d(shape_numel(s));
  for (auto& v : d) v = static_cast<S>(rng.uniform(lo, hi));
  return Tensor<S>::create(s, std::move(d));
}

// Random well-formed association map over a gh x gw grid.
AssociationMap<double> random_assoc(int gh, int gw, int stride, Rng& rng) {
  auto logits = random_tensor<double>({gh * stride, gw * stride, 9}, rng, -2, 2);
  return normalize_associations(logits, gh, gw, stride, stride);
}

// One-hot-on-center association map: every pixel belongs to its own cell.
AssociationMap<double> center_assoc(int gh, int gw, int stride) {
  auto logits = Tensor<double>::zeros({gh * stride, gw * stride, 9});
  for (std::size_t px = 0; px < logits->numel() / 9; ++px) logits->data[px * 9 + 4] = 50.0;
  return normalize_associations(logits, gh, gw, stride, stride);
}

}  // namespace

TEST(Fuse, CenterOneHotGivesBlockwiseRegionLogits) {
  Rng rng(1);
  const int gh = 3, gw = 3, stride = 4, c = 5;
  auto assoc = center_assoc(gh, gw, stride);
  auto logits = random_tensor<double>({gh * gw, c}, rng);
  auto fused = fuse(assoc, logits);
  for (int y = 0; y < gh * stride; ++y) {
    for (int x = 0; x < gw * stride; ++x) {
      const int cell = (y / stride) * gw + (x / stride);
      for (int ch = 0; ch < c; ++ch) {
        EXPECT_NEAR(fused->data[(static_cast<std::size_t>(y) * gw * stride + x) * c + ch],
                    logits->data[static_cast<std::size_t>(cell * c + ch)], 1e-12);
      }
    }
  }
}

TEST(Fuse, IdenticalRegionLogitsGiveConstantField) {
  Rng rng(2);
  const int gh = 2, gw = 3, stride = 4, c = 4;
  auto assoc = random_assoc(gh, gw, stride, rng);
  const std::vector<double> v = {0.3, -1.2, 2.0, 0.05};
  std::vector<double> d;
  for (int s = 0; s < gh * gw; ++s) d.insert(d.end(), v.begin(), v.end());
  auto logits = Tensor<double>::create({gh * gw, c}, std::move(d));
  auto fused = fuse(assoc, logits);
  for (std::size_t px = 0; px < fused->numel() / c; ++px) {
    for (int ch = 0; ch < c; ++ch) {
      EXPECT_NEAR(fused->data[px * c + ch], v[static_cast<std::size_t>(ch)], 1e-9);
    }
  }
}

TEST(Fuse, MatchesBruteForceTripleLoop) {
  Rng rng(3);
  const int gh = 2, gw = 2, stride = 4, c = 3;
  auto assoc = random_assoc(gh, gw, stride, rng);
  auto logits = random_tensor<double>({gh * gw, c}, rng);
  auto fused = fuse(assoc, logits);
  const int w = gw * stride;
  for (int y = 0; y < gh * stride; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int k = 0; k < 9; ++k) {
          const int gy = y / stride + k / 3 - 1;
          const int gx = x / stride + k % 3 - 1;
          if (gy < 0 || gy >= gh || gx < 0 || gx >= gw) continue;
          acc += assoc.q->data[(static_cast<std::size_t>(y) * w + x) * 9 + k] *
                 logits->data[static_cast<std::size_t>((gy * gw + gx) * c + ch)];
        }
        EXPECT_NEAR(fused->data[(static_cast<std::size_t>(y) * w + x) * c + ch], acc, 1e-6);
      }
    }
  }
}

TEST(Fuse, ConvexityBounds) {
  Rng rng(4);
  const int gh = 3, gw = 3, stride = 2, c = 4;
  auto assoc = random_assoc(gh, gw, stride, rng);
  auto logits = random_tensor<double>({gh * gw, c}, rng, -3, 3);
  auto fused = fuse(assoc, logits);
  for (int ch = 0; ch < c; ++ch) {
    double lo = 1e30, hi = -1e30;
    for (int s = 0; s < gh * gw; ++s) {
      lo = std::min(lo, logits->data[static_cast<std::size_t>(s * c + ch)]);
      hi = std::max(hi, logits->data[static_cast<std::size_t>(s * c + ch)]);
    }
    for (std::size_t px = 0; px < fused->numel() / c; ++px) {
      const double v = fused->data[px * c + ch];
      EXPECT_GE(v, lo - 1e-9);
      EXPECT_LE(v, hi + 1e-9);
    }
  }
}

TEST(Fuse, GradientsMatchFiniteDifferences) {
  Rng rng(5);
  const int gh = 2, gw = 2, stride = 2, c = 3;
  auto conv_logits = random_tensor<double>({gh * stride, gw * stride, 9}, rng, -2, 2);
  auto region = random_tensor<double>({gh * gw, c}, rng);
  auto readout = random_tensor<double>({gh * stride, gw * stride, c}, rng);
  auto run = [&]() {
    auto assoc = normalize_associations(conv_logits, gh, gw, stride, stride);
    return sum_all(mul(fuse(assoc, region), readout));
  };
  EXPECT_LE(grad_check([&](const TensorPtr<double>&) { return run(); }, conv_logits), 1e-5);
  EXPECT_LE(grad_check([&](const TensorPtr<double>&) { return run(); }, region), 1e-5);
}

TEST(UpsampleAndClassify, TargetEqualsMapSize) {
  Rng rng(6);
  auto m = random_tensor<double>({4, 4, 3}, rng);
  auto pred = upsample_and_classify(m, 4, 4);
  auto probs = softmax(m, 2);
  for (std::size_t i = 0; i < probs->numel(); ++i) {
    EXPECT_DOUBLE_EQ(pred.probs[i], probs->data[i]);
  }
}

TEST(UpsampleAndClassify, ConstantMapGivesUniformProbsLowestClass) {
  auto m = Tensor<double>::full({2, 2, 5}, 1.7);
  auto pred = upsample_and_classify(m, 8, 8);
  for (const double v : pred.probs) EXPECT_NEAR(v, 0.2, 1e-12);
  for (const int c : pred.class_map) EXPECT_EQ(c, 0);  // tie broken to lowest index
}

TEST(UpsampleAndClassify, ProbRowsSumToOne) {
  Rng rng(7);
  auto m = random_tensor<double>({3, 5, 6}, rng, -4, 4);
  auto pred = upsample_and_classify(m, 9, 10);
  for (std::size_t px = 0; px < pred.probs.size() / 6; ++px) {
    double sum = 0.0;
    for (int c = 0; c < 6; ++c) sum += pred.probs[px * 6 + c];
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(SegLoss, AllIgnoredIsZeroWithZeroGradient) {
  Rng rng(8);
  auto m = random_tensor<double>({2, 2, 3}, rng);
  m->requires_grad = true;
  std::vector<int> labels(16, kIgnoreIndex);
  auto loss = seg_loss(m, labels, 4, 4);
  EXPECT_DOUBLE_EQ(loss->value(), 0.0);
  loss->backward();
  for (const double g : m->grad) EXPECT_DOUBLE_EQ(g, 0.0);
}

TEST(SegLoss, PerfectMarginGoesToZero) {
  const int c = 3;
  // Map resolution equals label resolution: no interpolation mixing, the
  // loss at margin m is exactly log(1 + (c-1) e^{-m}) per pixel.
  auto loss_at = [&](double margin) {
    auto m = Tensor<double>::zeros({4, 4, c});
    std::vector<int> labels(16);
    for (int px = 0; px < 16; ++px) {
      const int cls = px % c;
      labels[static_cast<std::size_t>(px)] = cls;
      m->data[static_cast<std::size_t>(px * c + cls)] = margin;
    }
    return seg_loss(m, labels, 4, 4)->value();
  };
  EXPECT_GT(loss_at(1.0), loss_at(4.0));
  EXPECT_GT(loss_at(4.0), loss_at(16.0));
  EXPECT_NEAR(loss_at(60.0), 0.0, 1e-9);
}

TEST(SegLoss, BadLabelIsDataError) {
  auto m = Tensor<double>::zeros({2, 2, 3});
  std::vector<int> labels(16, 7);
  EXPECT_THROW(seg_loss(m, labels, 4, 4), DataError);
}

TEST(SegLoss, UpsamplePathGradientsPass) {
  Rng rng(9);
  auto m = random_tensor<double>({2, 2, 3}, rng);
  std::vector<int> labels(36);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 3);
  labels[5] = kIgnoreIndex;
  const double err = grad_check(
      [&](const TensorPtr<double>& t) { return seg_loss(t, labels, 6, 6); }, m);
  EXPECT_LE(err, 1e-5);
}

TEST(SlidingWindow, WindowEqualsImageMatchesPlainInference) {
  Rng rng(10);
  Model<double> model(tiny_model_config(), rng);
  SyntheticSpec spec;
  spec.seed = 3;
  spec.count = 1;
  spec.image_size = 32;
  spec.num_classes = 4;
  auto sample = gen_synthetic(spec)[0];
  Raster<double> image(32, 32, 3);
  for (std::size_t i = 0; i < image.v.size(); ++i) image.v[i] = sample.image.v[i];

  auto plain = predict_image(model, image);
  auto tiled = sliding_window_infer(model, image);
  EXPECT_EQ(plain.probs, tiled.probs);
  EXPECT_EQ(plain.class_map, tiled.class_map);
}

TEST(SlidingWindow, ConstantImageGivesConstantMap) {
  Rng rng(11);
  Model<double> model(tiny_model_config(), rng);
  Raster<double> image(48, 56, 3);
  std::fill(image.v.begin(), image.v.end(), 0.4);
  auto pred = sliding_window_infer(model, image);
  for (const int c : pred.class_map) EXPECT_EQ(c, pred.class_map[0]);
}

// An image built by tiling one window-sized patch: every window sees the same
// content, so the overlap-averaged result must equal the single-tile
// prediction repeated across the image.
TEST(SlidingWindow, TranslationCoveredToyCaseMatchesWholeImageOracle) {
  Rng rng(12);
  Model<double> model(tiny_model_config(), rng);
  SyntheticSpec spec;
  spec.seed = 9;
  spec.count = 1;
  spec.image_size = 32;
  spec.num_classes = 4;
  auto sample = gen_synthetic(spec)[0];
  Raster<double> tile(32, 32, 3);
  for (std::size_t i = 0; i < tile.v.size(); ++i) tile.v[i] = sample.image.v[i];

  Raster<double> wide(32, 64, 3);
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 64; ++x) {
      for (int c = 0; c < 3; ++c) wide.at(y, x, c) = tile.at(y, x % 32, c);
    }
  }
  auto tile_pred = predict_image(model, tile);
  auto wide_pred = sliding_window_infer(model, wide, 32, 32);
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 64; ++x) {
      for (int c = 0; c < 4; ++c) {
        EXPECT_NEAR(wide_pred.probs[(static_cast<std::size_t>(y) * 64 + x) * 4 + c],
                    tile_pred.probs[(static_cast<std::size_t>(y) * 32 + x % 32) * 4 + c], 1e-5);
      }
    }
  }
}

TEST(Multiscale, UnitScaleNoFlipIsBitwiseSlidingWindow) {
  Rng rng(13);
  Model<double> model(tiny_model_config(), rng);
  SyntheticSpec spec;
  spec.seed = 5;
  spec.count = 1;
  spec.image_size = 48;
  spec.num_classes = 4;
  auto sample = gen_synthetic(spec)[0];
  Raster<double> image(48, 48, 3);
  for (std::size_t i = 0; i < image.v.size(); ++i) image.v[i] = sample.image.v[i];

  auto sliding = sliding_window_infer(model, image);
  auto multi = multiscale_infer(model, image, {1.0}, false);
  EXPECT_EQ(sliding.probs, multi.probs);
  EXPECT_EQ(sliding.class_map, multi.class_map);
}

TEST(Multiscale, SymmetricImageWithFlipGivesSymmetricProbs) {
  Rng rng(14);
  Model<double> model(tiny_model_config(), rng);
  SyntheticSpec spec;
  spec.seed = 6;
  spec.count = 1;
  spec.image_size = 48;
  spec.num_classes = 4;
  auto sample = gen_synthetic(spec)[0];
  Raster<double> image(48, 48, 3);
  for (std::size_t i = 0; i < image.v.size(); ++i) image.v[i] = sample.image.v[i];
  // Make it left-right symmetric.
  for (int y = 0; y < 48; ++y) {
    for (int x = 0; x < 24; ++x) {
      for (int c = 0; c < 3; ++c) image.at(y, 47 - x, c) = image.at(y, x, c);
    }
  }
  auto pred = multiscale_infer(model, image, {1.0, 0.75}, true);
  for (int y = 0; y < 48; ++y) {
    for (int x = 0; x < 24; ++x) {
      for (int c = 0; c < 4; ++c) {
        EXPECT_NEAR(pred.probs[(static_cast<std::size_t>(y) * 48 + x) * 4 + c],
                    pred.probs[(static_cast<std::size_t>(y) * 48 + 47 - x) * 4 + c], 1e-5);
      }
    }
  }
}

TEST(Multiscale, DefaultScaleListHasSixEntries) {
  EXPECT_EQ(default_scales().size(), 6u);
  EXPECT_DOUBLE_EQ(default_scales()[0], 0.5);
  EXPECT_DOUBLE_EQ(default_scales()[5], 1.75);
}

TEST(Multiscale, EmptyScalesRejected) {
  Rng rng(15);
  Model<double> model(tiny_model_config(), rng);
  Raster<double> image(32, 32, 3);
  EXPECT_THROW(multiscale_infer(model, image, {}, false), ConfigError);
}
