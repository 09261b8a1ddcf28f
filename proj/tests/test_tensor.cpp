#include <gtest/gtest.h>

#include <cmath>

#include "emra/gradcheck.hpp"
#include "emra/ops.hpp"
#include "emra/rng.hpp"
#include "emra/tensor.hpp"

using namespace emra;

namespace {

template <typename S>
TensorPtr<S> randu(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<S> d(shape_numel(shape));
  for (auto& v : d) v = static_cast<S>(rng.uniform(lo, hi));
  return Tensor<S>::create(shape, std::move(d));
}

// Scalar readout with fixed random weights so every output coordinate gets a
// distinct adjoint. The weights are drawn once on the first call and then
// reused: grad_check re-evaluates the function and needs it stable.
template <typename S, typename Op>
auto weighted(Op op, Rng& rng) {
  auto cache = std::make_shared<TensorPtr<S>>();
  return [op, cache, &rng](const TensorPtr<S>& t) {
    auto y = op(t);
    if (!*cache) *cache = randu<S>(y->shape, rng);
    return sum_all(mul(y, *cache));
  };
}

}  // namespace

TEST(Matmul, IdentityCase) {
  auto a = Tensor<double>::create({2, 2}, {1, 0, 0, 1});
  auto b = Tensor<double>::create({2, 2}, {1, 2, 3, 4});
  auto c = matmul(a, b);
  EXPECT_EQ(c->data, (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, Annihilator) {
  auto a = Tensor<double>::create({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::zeros({2, 2});
  EXPECT_EQ(matmul(a, b)->data, (std::vector<double>{0, 0, 0, 0}));
}

TEST(Matmul, HandComputed) {
  auto a = Tensor<double>::create({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::create({2, 2}, {5, 6, 7, 8});
  auto c = matmul(a, b);
  EXPECT_EQ(c->data, (std::vector<double>{19, 22, 43, 50}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  auto a = Tensor<float>::zeros({2, 3});
  auto b = Tensor<float>::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, MatchesNestedLoopOracleF32) {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const int m = 1 + rng.uniform_int(8);
    const int k = 1 + rng.uniform_int(8);
    const int n = 1 + rng.uniform_int(8);
    auto a = randu<float>({m, k}, rng);
    auto b = randu<float>({k, n}, rng);
    auto c = matmul(a, b);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        float acc = 0.0f;
        for (int kk = 0; kk < k; ++kk) {
          acc += a->data[static_cast<std::size_t>(i * k + kk)] *
                 b->data[static_cast<std::size_t>(kk * n + j)];
        }
        EXPECT_NEAR(c->data[static_cast<std::size_t>(i * n + j)], acc, 1e-6f);
      }
    }
  }
}

TEST(Softmax, UniformLogits) {
  auto x = Tensor<double>::create({3}, {0, 0, 0});
  auto y = softmax(x, 0);
  for (const double v : y->data) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
}

TEST(Softmax, ShiftInvarianceNoOverflow) {
  auto x = Tensor<double>::create({2}, {1000, 1000});
  auto y = softmax(x, 0);
  EXPECT_NEAR(y->data[0], 0.5, 1e-12);
  EXPECT_NEAR(y->data[1], 0.5, 1e-12);
}

TEST(Softmax, ClosedForm) {
  auto x = Tensor<double>::create({2}, {0.0, std::log(3.0)});
  auto y = softmax(x, 0);
  EXPECT_NEAR(y->data[0], 0.25, 1e-12);
  EXPECT_NEAR(y->data[1], 0.75, 1e-12);
}

TEST(Softmax, RowsSumToOneLargeMagnitude) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = randu<float>({6, 9}, rng, -1e3, 1e3);
    auto y = softmax(x, 1);
    for (int i = 0; i < 6; ++i) {
      float sum = 0.0f;
      for (int j = 0; j < 9; ++j) sum += y->data[static_cast<std::size_t>(i * 9 + j)];
      EXPECT_NEAR(sum, 1.0f, 1e-6f);
      for (int j = 0; j < 9; ++j) EXPECT_GE(y->data[static_cast<std::size_t>(i * 9 + j)], 0.0f);
    }
  }
}

TEST(Softmax, MiddleAxis) {
  Rng rng(17);
  auto x = randu<double>({2, 3, 4}, rng);
  auto y = softmax(x, 1);
  for (int o = 0; o < 2; ++o) {
    for (int i = 0; i < 4; ++i) {
      double sum = 0.0;
      for (int j = 0; j < 3; ++j) sum += y->data[static_cast<std::size_t>((o * 3 + j) * 4 + i)];
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(LayerNorm, ConstantSliceGoesToZero) {
  auto x = Tensor<double>::create({4}, {2.5, 2.5, 2.5, 2.5});
  auto gamma = Tensor<double>::ones({4});
  auto beta = Tensor<double>::zeros({4});
  auto y = layer_norm(x, gamma, beta, 0);
  for (const double v : y->data) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(LayerNorm, UnitVarianceInputKept) {
  auto x = Tensor<double>::create({2}, {-1.0, 1.0});
  auto y = layer_norm(x, Tensor<double>::ones({2}), Tensor<double>::zeros({2}), 0);
  EXPECT_NEAR(y->data[0], -1.0, 1e-5);
  EXPECT_NEAR(y->data[1], 1.0, 1e-5);
}

TEST(LayerNorm, DirectMeanVar) {
  auto x = Tensor<double>::create({3}, {1, 2, 3});
  auto y = layer_norm(x, Tensor<double>::ones({3}), Tensor<double>::zeros({3}), 0);
  EXPECT_NEAR(y->data[0], -1.2247, 1e-3);
  EXPECT_NEAR(y->data[1], 0.0, 1e-9);
  EXPECT_NEAR(y->data[2], 1.2247, 1e-3);
}

TEST(Gelu, Asymptotes) {
  auto x = Tensor<double>::create({3}, {0.0, 20.0, -20.0});
  auto y = gelu(x);
  EXPECT_DOUBLE_EQ(y->data[0], 0.0);
  EXPECT_NEAR(y->data[1], 20.0, 1e-6);
  EXPECT_NEAR(y->data[2], 0.0, 1e-6);
}

TEST(Gelu, KnownPoint) {
  auto y = gelu(Tensor<double>::create({1}, {1.0}));
  EXPECT_NEAR(y->data[0], 0.8412, 1e-4);
}

TEST(DepthwiseConv, DeltaKernelIsIdentity) {
  Rng rng(3);
  auto x = randu<double>({5, 4, 3}, rng);
  auto k = Tensor<double>::zeros({3, 3, 3});
  for (int c = 0; c < 3; ++c) k->data[static_cast<std::size_t>((1 * 3 + 1) * 3 + c)] = 1.0;
  auto y = depthwise_conv3x3(x, k, Tensor<double>::zeros({3}));
  for (std::size_t i = 0; i < x->numel(); ++i) EXPECT_DOUBLE_EQ(y->data[i], x->data[i]);
}

TEST(DepthwiseConv, AllOnesCounting) {
  auto x = Tensor<double>::ones({5, 5, 1});
  auto k = Tensor<double>::ones({3, 3, 1});
  auto bias = Tensor<double>::create({1}, {0.25});
  auto y = depthwise_conv3x3(x, k, bias);
  EXPECT_DOUBLE_EQ(y->data[static_cast<std::size_t>((2 * 5 + 2) * 1)], 9.25);  // interior
  EXPECT_DOUBLE_EQ(y->data[0], 4.25);                                          // corner
}

TEST(DepthwiseConv, MatchesBruteForceOracle) {
  Rng rng(29);
  auto x = randu<float>({5, 5, 1}, rng);
  auto k = randu<float>({3, 3, 1}, rng);
  auto bias = randu<float>({1}, rng);
  auto y = depthwise_conv3x3(x, k, bias);
  for (int yy = 0; yy < 5; ++yy) {
    for (int xx = 0; xx < 5; ++xx) {
      float acc = bias->data[0];
      for (int dy = 0; dy < 3; ++dy) {
        for (int dx = 0; dx < 3; ++dx) {
          const int sy = yy + dy - 1, sx = xx + dx - 1;
          if (sy < 0 || sy >= 5 || sx < 0 || sx >= 5) continue;
          acc += x->data[static_cast<std::size_t>(sy * 5 + sx)] *
                 k->data[static_cast<std::size_t>(dy * 3 + dx)];
        }
      }
      EXPECT_NEAR(y->data[static_cast<std::size_t>(yy * 5 + xx)], acc, 1e-6f);
    }
  }
}

TEST(DepthwiseConv, RejectsWrongKernelExtent) {
  auto x = Tensor<float>::zeros({4, 4, 2});
  auto k = Tensor<float>::zeros({5, 5, 2});
  EXPECT_THROW(depthwise_conv3x3(x, k, Tensor<float>::zeros({2})), ConfigError);
}

TEST(PointwiseConv, IdentityWeight) {
  Rng rng(31);
  auto x = randu<double>({3, 3, 2}, rng);
  auto w = Tensor<double>::create({2, 2}, {1, 0, 0, 1});
  auto y = pointwise_conv(x, w, Tensor<double>::zeros({2}));
  for (std::size_t i = 0; i < x->numel(); ++i) EXPECT_DOUBLE_EQ(y->data[i], x->data[i]);
}

TEST(PointwiseConv, OnesWeightSumsChannels) {
  auto x = Tensor<double>::create({1, 1, 3}, {1, 2, 3});
  auto w = Tensor<double>::ones({3, 1});
  auto y = pointwise_conv(x, w, Tensor<double>::zeros({1}));
  EXPECT_DOUBLE_EQ(y->data[0], 6.0);
}

TEST(PointwiseConv, EquivalentToReshapedMatmul) {
  Rng rng(37);
  auto x = randu<float>({4, 5, 3}, rng);
  auto w = randu<float>({3, 6}, rng);
  auto b = randu<float>({6}, rng);
  auto y = pointwise_conv(x, w, b);
  auto flat = reshape(x, {20, 3});
  auto ref = add_row_bias(matmul(flat, w), b);
  for (std::size_t i = 0; i < y->numel(); ++i) EXPECT_NEAR(y->data[i], ref->data[i], 1e-6f);
}

TEST(PointwiseConv, ChannelMismatch) {
  auto x = Tensor<float>::zeros({2, 2, 3});
  auto w = Tensor<float>::zeros({4, 2});
  EXPECT_THROW(pointwise_conv(x, w, Tensor<float>::zeros({2})), DimensionError);
}

TEST(Bilinear, SameSizeIsIdentity) {
  Rng rng(41);
  auto x = randu<double>({5, 7, 2}, rng);
  auto y = bilinear_resize(x, 5, 7);
  EXPECT_EQ(y->data, x->data);
}

TEST(Bilinear, ConstantFieldStaysConstant) {
  auto x = Tensor<double>::full({3, 3, 1}, 2.75);
  auto y = bilinear_resize(x, 8, 5);
  for (const double v : y->data) EXPECT_DOUBLE_EQ(v, 2.75);
}

TEST(Bilinear, MatchesScalarInterpolationOracle) {
  auto x = Tensor<double>::create({2, 2, 1}, {0, 1, 2, 3});
  auto y = bilinear_resize(x, 4, 4);
  auto oracle = [&](int d, int out, int in) {
    double src = (d + 0.5) * in / static_cast<double>(out) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int lo = static_cast<int>(std::floor(src));
    const int hi = std::min(lo + 1, in - 1);
    return std::tuple<int, int, double>(lo, hi, src - lo);
  };
  for (int i = 0; i < 4; ++i) {
    const auto [ylo, yhi, wy] = oracle(i, 4, 2);
    for (int j = 0; j < 4; ++j) {
      const auto [xlo, xhi, wx] = oracle(j, 4, 2);
      auto v = [&](int yy, int xx) { return x->data[static_cast<std::size_t>(yy * 2 + xx)]; };
      const double expected = (1 - wy) * ((1 - wx) * v(ylo, xlo) + wx * v(ylo, xhi)) +
                              wy * ((1 - wx) * v(yhi, xlo) + wx * v(yhi, xhi));
      EXPECT_NEAR(y->data[static_cast<std::size_t>(i * 4 + j)], expected, 1e-12);
    }
  }
}

TEST(CrossEntropy, UniformLogits) {
  auto logits = Tensor<double>::zeros({1, 7});
  auto loss = cross_entropy_mean(logits, {3});
  EXPECT_NEAR(loss->value(), std::log(7.0), 1e-12);
}

TEST(CrossEntropy, LargeMarginGoesToZero) {
  auto logits = Tensor<double>::create({1, 2}, {50.0, 0.0});
  auto loss = cross_entropy_mean(logits, {0});
  EXPECT_NEAR(loss->value(), 0.0, 1e-12);
}

TEST(CrossEntropy, HandComputed) {
  auto logits = Tensor<double>::create({1, 2}, {1.0, 0.0});
  auto loss = cross_entropy_mean(logits, {1});
  EXPECT_NEAR(loss->value(), 1.3133, 1e-4);
}

TEST(CrossEntropy, AllIgnoredIsZeroLossZeroGrad) {
  auto logits = Tensor<double>::create({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  auto loss = cross_entropy_mean(logits, {kIgnoreIndex, kIgnoreIndex});
  EXPECT_DOUBLE_EQ(loss->value(), 0.0);
  loss->backward();
  for (std::size_t i = 0; i < logits->grad.size(); ++i) EXPECT_DOUBLE_EQ(logits->grad[i], 0.0);
}

TEST(CrossEntropy, OutOfRangeTargetIsDataError) {
  auto logits = Tensor<double>::zeros({1, 3});
  EXPECT_THROW(cross_entropy_mean(logits, {3}), DataError);
}

TEST(GradCheck, QuadraticIsNearlyExact) {
  auto x = Tensor<double>::create({2}, {1.0, 2.0});
  const double err = grad_check([](const TensorPtr<double>& t) { return sum_all(mul(t, t)); }, x);
  EXPECT_LE(err, 1e-7);
}

TEST(GradCheck, CrossEntropyOnRandomLogits) {
  Rng rng(43);
  auto logits = randu<double>({6, 4}, rng);
  const std::vector<int> targets = {0, 3, 1, kIgnoreIndex, 2, 1};
  const double err = grad_check(
      [&](const TensorPtr<double>& t) { return cross_entropy_mean(t, targets); }, logits);
  EXPECT_LE(err, 1e-6);
}

TEST(Backward, FanOutAccumulates) {
  auto x = Tensor<double>::create({3}, {1, 2, 3}, true);
  auto y = sum_all(add(x, x));
  y->backward();
  for (const double g : x->grad) EXPECT_DOUBLE_EQ(g, 2.0);
}

TEST(Backward, ZeroExtentTensorsWork) {
  auto a = Tensor<double>::zeros({0, 4}, true);
  auto b = Tensor<double>::zeros({2, 4}, true);
  auto c = concat_rows(a, b);
  EXPECT_EQ(c->shape, (Shape{2, 4}));
  auto loss = sum_all(c);
  loss->backward();
  EXPECT_EQ(a->grad.size(), 0u);
}

// Finite-difference sweep over every differentiable op, 20 seeds each.
// Elementwise and single ops must match to 1e-6; a composed graph to 1e-5.
TEST(GradCheck, AllOpsAgainstFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    Rng wrng(seed + 1000);

    auto x34 = randu<double>({3, 4}, rng);
    EXPECT_LE(grad_check(weighted<double>([](const TensorPtr<double>& t) { return gelu(t); }, wrng),
                         x34),
              1e-6)
        << "gelu seed " << seed;

    auto xs = randu<double>({4, 5}, rng);
    EXPECT_LE(grad_check(
                  weighted<double>([](const TensorPtr<double>& t) { return softmax(t, 1); }, wrng),
                  xs),
              1e-6)
        << "softmax seed " << seed;

    auto a = randu<double>({3, 4}, rng);
    auto b = randu<double>({4, 2}, rng);
    EXPECT_LE(grad_check(
                  weighted<double>([&](const TensorPtr<double>& t) { return matmul(t, b); }, wrng),
                  a),
              1e-6)
        << "matmul lhs seed " << seed;
    EXPECT_LE(grad_check(
                  weighted<double>([&](const TensorPtr<double>& t) { return matmul(a, t); }, wrng),
                  b),
              1e-6)
        << "matmul rhs seed " << seed;

    auto gamma = randu<double>({4}, rng, 0.5, 1.5);
    auto beta = randu<double>({4}, rng);
    EXPECT_LE(grad_check(weighted<double>(
                             [&](const TensorPtr<double>& t) {
                               return layer_norm(t, gamma, beta, 1);
                             },
                             wrng),
                         x34),
              1e-6)
        << "layer_norm x seed " << seed;
    EXPECT_LE(grad_check(weighted<double>(
                             [&](const TensorPtr<double>& t) {
                               return layer_norm(x34, t, beta, 1);
                             },
                             wrng),
                         gamma),
              1e-6)
        << "layer_norm gamma seed " << seed;

    auto img = randu<double>({4, 5, 2}, rng);
    auto kern = randu<double>({3, 3, 2}, rng);
    auto kbias = randu<double>({2}, rng);
    EXPECT_LE(grad_check(weighted<double>(
                             [&](const TensorPtr<double>& t) {
                               return depthwise_conv3x3(t, kern, kbias);
                             },
                             wrng),
                         img),
              1e-6)
        << "depthwise x seed " << seed;
    EXPECT_LE(grad_check(weighted<double>(
                             [&](const TensorPtr<double>& t) {
                               return depthwise_conv3x3(img, t, kbias);
                             },
                             wrng),
                         kern),
              1e-6)
        << "depthwise kernels seed " << seed;

    auto pw = randu<double>({2, 3}, rng);
    auto pb = randu<double>({3}, rng);
    EXPECT_LE(grad_check(weighted<double>(
                             [&](const TensorPtr<double>& t) {
                               return pointwise_conv(img, t, pb);
                             },
                             wrng),
                         pw),
              1e-6)
        << "pointwise w seed " << seed;

    EXPECT_LE(grad_check(weighted<double>(
                             [](const TensorPtr<double>& t) { return bilinear_resize(t, 7, 9); },
                             wrng),
                         img),
              1e-6)
        << "bilinear seed " << seed;

    auto sq = randu<double>({2, 2, 9}, rng);
    std::vector<std::uint8_t> mask(sq->numel(), 1);
    for (std::size_t i = 0; i < mask.size(); i += 3) mask[i] = 0;
    EXPECT_LE(grad_check(weighted<double>(
                             [&](const TensorPtr<double>& t) {
                               return masked_softmax_last(t, mask);
                             },
                             wrng),
                         sq),
              1e-6)
        << "masked softmax seed " << seed;

    auto rn = randu<double>({3, 5}, rng, 0.2, 1.2);
    EXPECT_LE(grad_check(
                  weighted<double>([](const TensorPtr<double>& t) { return row_normalize(t); },
                                   wrng),
                  rn),
              1e-6)
        << "row_normalize seed " << seed;

    auto tr = randu<double>({3, 5}, rng);
    EXPECT_LE(grad_check(
                  weighted<double>([](const TensorPtr<double>& t) { return transpose(t); }, wrng),
                  tr),
              1e-6)
        << "transpose seed " << seed;

    // Composed graph: linear -> gelu -> layer_norm -> softmax -> CE.
    auto w1 = randu<double>({4, 6}, rng);
    auto b1 = randu<double>({6}, rng);
    auto g2 = randu<double>({6}, rng, 0.5, 1.5);
    auto bt2 = randu<double>({6}, rng);
    const std::vector<int> targets = {1, 0, 5};
    auto x_comp = randu<double>({3, 4}, rng);
    EXPECT_LE(grad_check(
                  [&](const TensorPtr<double>& t) {
                    auto h = gelu(linear(t, w1, b1));
                    auto n = layer_norm(h, g2, bt2, 1);
                    return cross_entropy_mean(n, targets);
                  },
                  x_comp),
              1e-5)
        << "composed graph seed " << seed;
  }
}

TEST(MaskedSoftmax, MaskedEntriesExactlyZero) {
  Rng rng(7);
  auto x = randu<double>({4, 9}, rng, -3, 3);
  std::vector<std::uint8_t> mask(x->numel(), 1);
  mask[0] = mask[10] = mask[20] = 0;
  auto y = masked_softmax_last(x, mask);
  EXPECT_EQ(y->data[0], 0.0);
  EXPECT_EQ(y->data[10], 0.0);
  EXPECT_EQ(y->data[20], 0.0);
  for (int r = 0; r < 4; ++r) {
    double sum = 0.0;
    for (int j = 0; j < 9; ++j) sum += y->data[static_cast<std::size_t>(r * 9 + j)];
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(MeanOf, RowStochasticityPreserved) {
  Rng rng(13);
  std::vector<TensorPtr<double>> mats;
  for (int i = 0; i < 5; ++i) mats.push_back(softmax(randu<double>({6, 6}, rng), 1));
  auto m = mean_of(mats);
  for (int r = 0; r < 6; ++r) {
    double sum = 0.0;
    for (int j = 0; j < 6; ++j) sum += m->data[static_cast<std::size_t>(r * 6 + j)];
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}
