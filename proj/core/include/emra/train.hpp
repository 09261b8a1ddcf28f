#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "emra/model.hpp"
#include "emra/raster.hpp"
#include "emra/rng.hpp"
#include "emra/synthetic.hpp"

namespace emra {

struct TrainConfig {
  double base_lr = 1e-3;
  double power = 0.9;
  double weight_decay = 0.0;
  double momentum = 0.0;  // exposed for completeness; only 0 is supported
  int epochs = 1;
  int batch_size = 1;
  int crop_size = 0;  // 0: use the model input size
  std::uint64_t seed = 0;
  std::string precision = "f32";  // f32 | f64

  void validate() const {
    if (base_lr <= 0.0) throw ConfigError("train.base_lr must be > 0");
    if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (momentum != 0.0) {
      throw ConfigError("train.momentum: only 0 is supported (plain SGD)");
    }
    if (precision != "f32" && precision != "f64") {
      throw ConfigError("train.precision must be f32 or f64");
    }
  }
};

// Polynomial decay: base_lr * (1 - epoch/total)^power, epoch counted from 0.
inline double poly_lr(int epoch, int total_epochs, double base_lr, double power) {
  if (epoch < 0 || epoch > total_epochs) {
    throw ConfigError("poly_lr: epoch " + std::to_string(epoch) + " outside [0," +
                      std::to_string(total_epochs) + "]");
  }
  const double frac = 1.0 - static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return base_lr * std::pow(frac, power);
}

// One plain SGD update: p <- p - lr * (g + weight_decay * p). Parameters with
// no accumulated gradient are left untouched; non-finite gradients abort with
// the parameter name.
template <typename S>
void sgd_step(const std::vector<std::pair<std::string, TensorPtr<S>>>& params, double lr,
              double weight_decay) {
  for (const auto& [name, p] : params) {
    if (p->grad.empty()) continue;
    const S lr_s = static_cast<S>(lr);
    const S wd_s = static_cast<S>(weight_decay);
    for (std::size_t i = 0; i < p->data.size(); ++i) {
      const S g = p->grad[i];
      if (!std::isfinite(static_cast<double>(g))) {
        throw TrainingError("non-finite gradient in parameter '" + name + "' at element " +
                            std::to_string(i));
      }
      p->data[i] -= lr_s * (g + wd_s * p->data[i]);
    }
  }
}

// Mutable loop state, persisted in checkpoints so an interrupted run resumes
// bit-identically.
struct TrainState {
  int epoch = 0;
  long long step = 0;
  Rng rng{0};
};

struct TrainLog {
  std::vector<double> epoch_loss;
};

// Random crop with reflection padding when the source is smaller than the
// crop, then an optional horizontal flip. Consumes exactly three rng draws.
template <typename S>
std::pair<TensorPtr<S>, std::vector<int>> sample_crop(const Sample& sample, int crop, Rng& rng) {
  const int h = sample.image.h, w = sample.image.w;
  const int y0 = h > crop ? rng.uniform_int(h - crop + 1) : rng.uniform_int(1);
  const int x0 = w > crop ? rng.uniform_int(w - crop + 1) : rng.uniform_int(1);
  const bool flip = rng.bernoulli(0.5);

  std::vector<S> img(static_cast<std::size_t>(crop) * crop * 3);
  std::vector<int> lab(static_cast<std::size_t>(crop) * crop);
  for (int y = 0; y < crop; ++y) {
    const int sy = reflect_index(y0 + y, h);
    for (int x = 0; x < crop; ++x) {
      const int xx = flip ? crop - 1 - x : x;
      const int sx = reflect_index(x0 + x, w);
      const std::size_t dst = static_cast<std::size_t>(y) * crop + xx;
      for (int ch = 0; ch < 3; ++ch) {
        img[dst * 3 + ch] = static_cast<S>(sample.image.at(sy, sx, ch));
      }
      lab[dst] = sample.labels[static_cast<std::size_t>(sy) * w + sx];
    }
  }
  return {Tensor<S>::create({crop, crop, 3}, std::move(img)), std::move(lab)};
}

// Deterministic SGD loop over random crops with poly learning-rate decay.
// Runs epochs [state.epoch, cfg.epochs), or at most run_epochs of them when
// run_epochs >= 0 (the decay schedule is always over cfg.epochs, so a
// checkpointed run resumes the same schedule). Everything downstream of the
// seed is reproducible bit for bit.
template <typename S>
TrainLog train(Model<S>& model, const std::vector<Sample>& dataset, const TrainConfig& cfg,
               TrainState& state, int run_epochs = -1) {
  cfg.validate();
  if (dataset.empty()) {
    throw DataError("train: dataset is empty");
  }
  const int crop = cfg.crop_size > 0 ? cfg.crop_size : model.cfg.encoder.image_size;
  if (crop != model.cfg.encoder.image_size) {
    throw ConfigError("train.crop_size " + std::to_string(crop) +
                      " must match the model input size " +
                      std::to_string(model.cfg.encoder.image_size));
  }
  const auto params = model.named_params();

  const int stop_epoch =
      run_epochs < 0 ? cfg.epochs : std::min(cfg.epochs, state.epoch + run_epochs);
  TrainLog log;
  for (; state.epoch < stop_epoch; ++state.epoch) {
    const double lr = poly_lr(state.epoch, cfg.epochs, cfg.base_lr, cfg.power);

    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(state.rng.uniform_int(
                                  static_cast<int>(i)))]);
    }

    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      TensorPtr<S> batch_loss;
      for (std::size_t i = start; i < end; ++i) {
        auto [img, lab] = sample_crop<S>(dataset[order[i]], crop, state.rng);
        auto l = model.loss(img, lab, crop, crop);
        batch_loss = batch_loss ? add(batch_loss, l) : l;
      }
      batch_loss = scale(batch_loss, S(1) / static_cast<S>(end - start));
      const double loss_value = static_cast<double>(batch_loss->value());
      if (!std::isfinite(loss_value)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(state.epoch) +
                            ", batch " + std::to_string(batches));
      }
      model.zero_grad();
      batch_loss->backward();
      sgd_step(params, lr, cfg.weight_decay);
      ++state.step;
      epoch_loss += loss_value;
      ++batches;
    }
    log.epoch_loss.push_back(batches ? epoch_loss / static_cast<double>(batches) : 0.0);
  }
  return log;
}

}  // namespace emra
