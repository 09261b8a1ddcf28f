#include <gtest/gtest.h>

#include <cmath>

#include "emra/checkpoint.hpp"
#include "emra/config.hpp"
#include "emra/model.hpp"
#include "emra/synthetic.hpp"
#include "emra/train.hpp"

using namespace emra;

namespace {

ModelConfig tiny_model_config(Variant v = Variant::full) {
  ModelConfig cfg = preset_config("tiny");
  cfg.variant = v;
  return cfg;
}

std::vector<Sample> tiny_dataset(int count = 4, std::uint64_t seed = 11) {
  SyntheticSpec spec;
  spec.seed = seed;
  spec.count = count;
  spec.image_size = 32;
  spec.num_classes = 4;
  return gen_synthetic(spec);
}

std::vector<float> flat_params(const Model<float>& model) {
  std::vector<float> out;
  for (const auto& [name, t] : model.named_params()) {
    out.insert(out.end(), t->data.begin(), t->data.end());
  }
  return out;
}

}  // namespace

TEST(PolyLr, BaseRateAtEpochZero) {
  EXPECT_DOUBLE_EQ(poly_lr(0, 100, 1e-3, 0.9), 1e-3);
}

TEST(PolyLr, ZeroAtFinalEpoch) {
  EXPECT_DOUBLE_EQ(poly_lr(100, 100, 1e-3, 0.9), 0.0);
}

TEST(PolyLr, HalfwayClosedForm) {
  EXPECT_NEAR(poly_lr(50, 100, 1e-3, 0.9), 5.3589e-4, 1e-8);
}

TEST(PolyLr, OutOfRangeIsConfigError) {
  EXPECT_THROW(poly_lr(101, 100, 1e-3, 0.9), ConfigError);
  EXPECT_THROW(poly_lr(-1, 100, 1e-3, 0.9), ConfigError);
}

TEST(PolyLr, StrictlyDecreasingOverGrid) {
  for (const double power : {0.5, 0.9, 2.0}) {
    for (const double base : {1e-3, 0.1}) {
      double prev = poly_lr(0, 200, base, power);
      for (int e = 1; e <= 200; ++e) {
        const double lr = poly_lr(e, 200, base, power);
        EXPECT_LT(lr, prev);
        prev = lr;
      }
    }
  }
}

TEST(SgdStep, ZeroLrLeavesParamsUnchanged) {
  auto p = Tensor<float>::create({2}, {1.0f, -2.0f}, true);
  p->ensure_grad();
  p->grad = {3.0f, 4.0f};
  std::vector<std::pair<std::string, TensorPtr<float>>> params = {{"p", p}};
  sgd_step(params, 0.0, 0.0);
  EXPECT_EQ(p->data, (std::vector<float>{1.0f, -2.0f}));
}

TEST(SgdStep, OneStepArithmetic) {
  auto p = Tensor<float>::create({1}, {1.0f}, true);
  p->ensure_grad();
  p->grad = {2.0f};
  std::vector<std::pair<std::string, TensorPtr<float>>> params = {{"p", p}};
  sgd_step(params, 0.1, 0.0);
  EXPECT_NEAR(p->data[0], 0.8f, 1e-7f);
}

TEST(SgdStep, QuadraticBowlConverges) {
  auto p = Tensor<double>::create({3}, {2.0, -1.5, 0.7}, true);
  std::vector<std::pair<std::string, TensorPtr<double>>> params = {{"p", p}};
  for (int step = 0; step < 200; ++step) {
    p->ensure_grad();
    for (std::size_t i = 0; i < 3; ++i) p->grad[i] = 2.0 * p->data[i];
    sgd_step(params, 0.1, 0.0);
    p->zero_grad();
  }
  double norm = 0.0;
  for (const double v : p->data) norm += v * v;
  EXPECT_LT(std::sqrt(norm), 1e-3);
}

TEST(SgdStep, NonFiniteGradientNamesParameter) {
  auto p = Tensor<float>::create({1}, {1.0f}, true);
  p->ensure_grad();
  p->grad = {std::numeric_limits<float>::quiet_NaN()};
  std::vector<std::pair<std::string, TensorPtr<float>>> params = {{"encoder.w_q", p}};
  try {
    sgd_step(params, 0.1, 0.0);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.w_q"), std::string::npos);
  }
}

TEST(Train, ZeroEpochsIsNoOp) {
  Rng rng(1);
  Model<float> model(tiny_model_config(), rng);
  const auto before = flat_params(model);
  TrainConfig cfg;
  cfg.epochs = 0;
  TrainState state;
  const auto log = train(model, tiny_dataset(), cfg, state);
  EXPECT_TRUE(log.epoch_loss.empty());
  EXPECT_EQ(flat_params(model), before);
}

TEST(Train, EmptyDatasetRejected) {
  Rng rng(2);
  Model<float> model(tiny_model_config(), rng);
  TrainConfig cfg;
  TrainState state;
  std::vector<Sample> empty;
  EXPECT_THROW(train(model, empty, cfg, state), DataError);
}

TEST(Train, MomentumUnsupported) {
  Rng rng(3);
  Model<float> model(tiny_model_config(), rng);
  TrainConfig cfg;
  cfg.momentum = 0.9;
  TrainState state;
  auto data = tiny_dataset();
  EXPECT_THROW(train(model, data, cfg, state), ConfigError);
}

TEST(Train, SameSeedGivesBitwiseIdenticalParams) {
  auto run = [&]() {
    Rng rng(17);
    Model<float> model(tiny_model_config(), rng);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 2;
    cfg.base_lr = 0.05;
    TrainState state;
    state.rng = Rng(99);
    auto data = tiny_dataset();
    train(model, data, cfg, state);
    return flat_params(model);
  };
  EXPECT_EQ(run(), run());
}

TEST(Train, LossDecreasesOnAverage) {
  Rng rng(5);
  Model<float> model(tiny_model_config(Variant::baseline), rng);
  TrainConfig cfg;
  cfg.epochs = 12;
  cfg.batch_size = 2;
  cfg.base_lr = 0.3;
  TrainState state;
  auto data = tiny_dataset(4);
  const auto log = train(model, data, cfg, state);
  ASSERT_EQ(log.epoch_loss.size(), 12u);
  EXPECT_LT(log.epoch_loss.back(), log.epoch_loss.front());
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  Rng rng(6);
  Model<float> model(tiny_model_config(), rng);
  TrainState state;
  state.epoch = 3;
  state.step = 17;
  state.rng = Rng(1234);
  state.rng.next_u64();
  const std::string bytes = encode_checkpoint(model, state);
  auto loaded = decode_checkpoint<float>(bytes);
  EXPECT_EQ(loaded.state.epoch, 3);
  EXPECT_EQ(loaded.state.step, 17);
  EXPECT_EQ(loaded.state.rng.state(), state.rng.state());
  const std::string bytes2 = encode_checkpoint(loaded.model, loaded.state);
  EXPECT_EQ(bytes2, bytes);
}

TEST(Checkpoint, CorruptedMagicIsFormatError) {
  Rng rng(7);
  Model<float> model(tiny_model_config(), rng);
  std::string bytes = encode_checkpoint(model, TrainState{});
  bytes[0] = 'X';
  try {
    decode_checkpoint<float>(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.issue(), FormatIssue::bad_magic);
  }
}

TEST(Checkpoint, WrongVersionDetected) {
  Rng rng(8);
  Model<float> model(tiny_model_config(), rng);
  std::string bytes = encode_checkpoint(model, TrainState{});
  bytes[4] = 2;
  try {
    decode_checkpoint<float>(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.issue(), FormatIssue::bad_version);
  }
}

TEST(Checkpoint, TruncationDetected) {
  Rng rng(9);
  Model<float> model(tiny_model_config(), rng);
  std::string bytes = encode_checkpoint(model, TrainState{});
  bytes.resize(bytes.size() / 2);
  EXPECT_THROW(decode_checkpoint<float>(bytes), FormatError);
}

TEST(Checkpoint, FlippedPayloadByteFailsChecksum) {
  Rng rng(10);
  Model<float> model(tiny_model_config(), rng);
  std::string bytes = encode_checkpoint(model, TrainState{});
  bytes[bytes.size() / 2] ^= 0x40;
  try {
    decode_checkpoint<float>(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.issue(), FormatIssue::bad_checksum);
  }
}

TEST(Checkpoint, ShapeMismatchAgainstConfigDetected) {
  Rng rng(11);
  Model<float> model(tiny_model_config(), rng);
  TrainState state;
  std::string bytes = encode_checkpoint(model, state);
  // Shrink the configured image so patch/pos shapes disagree with records.
  const std::string needle = "encoder.image_size = 32";
  const std::string patched = "encoder.image_size = 16";
  const auto pos = bytes.find(needle);
  ASSERT_NE(pos, std::string::npos);
  bytes.replace(pos, needle.size(), patched);
  // Re-stamp the CRC so the shape check (not the checksum) fires.
  const std::uint64_t crc = crc64(bytes.data(), bytes.size() - 8);
  for (int i = 0; i < 8; ++i) {
    bytes[bytes.size() - 8 + static_cast<std::size_t>(i)] =
        static_cast<char>((crc >> (8 * i)) & 0xFF);
  }
  try {
    decode_checkpoint<float>(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.issue(), FormatIssue::shape_mismatch);
  }
}

// Training k epochs, checkpointing, reloading, and training the remaining
// epochs must equal one uninterrupted run bit for bit.
TEST(Checkpoint, SplitRunResumeEqualsUninterrupted) {
  const auto data = tiny_dataset(4, 21);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 2;
  cfg.base_lr = 0.05;

  Rng rng_a(33);
  Model<float> uninterrupted(tiny_model_config(), rng_a);
  TrainState state_a;
  state_a.rng = Rng(77);
  train(uninterrupted, data, cfg, state_a);

  Rng rng_b(33);
  Model<float> split(tiny_model_config(), rng_b);
  TrainState state_b;
  state_b.rng = Rng(77);
  train(split, data, cfg, state_b, /*run_epochs=*/2);
  const std::string bytes = encode_checkpoint(split, state_b);

  auto resumed = decode_checkpoint<float>(bytes);
  EXPECT_EQ(resumed.state.epoch, 2);
  train(resumed.model, data, cfg, resumed.state);

  EXPECT_EQ(flat_params(resumed.model), flat_params(uninterrupted));
  EXPECT_EQ(resumed.state.step, state_a.step);
}

TEST(Checkpoint, ModelConfigSurvivesRoundTrip) {
  ModelConfig cfg = tiny_model_config(Variant::hra_only);
  cfg.refine_steps = 2;
  Rng rng(13);
  Model<float> model(cfg, rng);
  auto loaded = decode_checkpoint<float>(encode_checkpoint(model, TrainState{}));
  EXPECT_EQ(loaded.model.cfg.variant, Variant::hra_only);
  EXPECT_EQ(loaded.model.cfg.refine_steps, 2);
  EXPECT_EQ(loaded.model.cfg.encoder.embed_dim, 32);
  EXPECT_TRUE(loaded.model.hra.has_value());
  EXPECT_TRUE(loaded.model.head_weight != nullptr);
}
