#include "emra/cli.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "emra/checkpoint.hpp"
#include "emra/config.hpp"
#include "emra/gradcheck.hpp"
#include "emra/infer.hpp"
#include "emra/metrics.hpp"
#include "emra/netpbm.hpp"
#include "emra/render.hpp"
#include "emra/synthetic.hpp"
#include "emra/train.hpp"

namespace emra {

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

std::string sample_path(const std::string& dir, const char* stem, int index) {
  char name[64];
  std::snprintf(name, sizeof(name), "%s_%04d.ppm", stem, index);
  return (fs::path(dir) / name).string();
}

Raster<float> image_from_u8(const ImageU8& img) {
  Raster<float> out(img.h, img.w, img.c);
  for (std::size_t i = 0; i < img.v.size(); ++i) {
    out.v[i] = static_cast<float>(img.v[i]) / 255.0f;
  }
  return out;
}

std::vector<Sample> load_dataset(const std::string& dir, const LabelCodec& codec) {
  std::vector<Sample> out;
  for (int i = 0;; ++i) {
    const std::string img_path = sample_path(dir, "image", i);
    const std::string lab_path = sample_path(dir, "label", i);
    if (!fs::exists(img_path)) break;
    Sample s;
    s.image = image_from_u8(load_netpbm(img_path));
    s.labels = codec.decode_rgb(load_netpbm(lab_path));
    out.push_back(std::move(s));
  }
  if (out.empty()) {
    throw DataError("no image_NNNN.ppm/label_NNNN.ppm pairs found in '" + dir + "'");
  }
  return out;
}

void save_dataset(const std::string& dir, const std::vector<Sample>& samples,
                  const LabelCodec& codec) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    ImageU8 img(s.image.h, s.image.w, 3);
    for (std::size_t j = 0; j < img.v.size(); ++j) {
      img.v[j] = static_cast<std::uint8_t>(
          std::lround(std::clamp(s.image.v[j] * 255.0f, 0.0f, 255.0f)));
    }
    save_netpbm(sample_path(dir, "image", static_cast<int>(i)), img);
    save_netpbm(sample_path(dir, "label", static_cast<int>(i)),
                codec.encode_rgb(s.labels, s.image.h, s.image.w));
  }
}

std::vector<Sample> dataset_for_run(const RunConfig& rc, const LabelCodec& codec) {
  if (!rc.paths.data.empty()) {
    return load_dataset(rc.paths.data, codec);
  }
  return gen_synthetic(rc.data);
}

std::string checkpoint_path(const RunConfig& rc) {
  if (!rc.paths.checkpoint.empty()) return rc.paths.checkpoint;
  return (fs::path(rc.paths.out) / "model.ckpt").string();
}

template <typename S>
Raster<S> raster_as(const Raster<float>& image) {
  Raster<S> out(image.h, image.w, image.c);
  for (std::size_t i = 0; i < image.v.size(); ++i) out.v[i] = static_cast<S>(image.v[i]);
  return out;
}

template <typename S>
int run_train(const RunConfig& rc) {
  const LabelCodec& codec = LabelCodec::loveda();
  auto dataset = dataset_for_run(rc, codec);
  Rng rng(rc.train.seed);
  Model<S> model(rc.model, rng);
  TrainState state;
  state.rng = Rng(rc.train.seed + 0x517CC1B727220A95ull);

  const auto log = train(model, dataset, rc.train, state);
  for (std::size_t e = 0; e < log.epoch_loss.size(); ++e) {
    std::printf("epoch %zu lr %.6g loss %.6f\n", e,
                poly_lr(static_cast<int>(e), rc.train.epochs, rc.train.base_lr, rc.train.power),
                log.epoch_loss[e]);
  }
  fs::create_directories(rc.paths.out);
  const std::string ckpt = checkpoint_path(rc);
  save_checkpoint(ckpt, model, state);
  std::printf("saved checkpoint %s (%lld params)\n", ckpt.c_str(),
              model.allocated_param_count());
  return kExitOk;
}

template <typename S>
int run_eval(const RunConfig& rc) {
  const LabelCodec& codec = LabelCodec::loveda();
  auto loaded = load_checkpoint<S>(checkpoint_path(rc));
  auto dataset = dataset_for_run(rc, codec);

  ConfusionMatrix conf(loaded.model.cfg.encoder.num_classes);
  for (const auto& sample : dataset) {
    const auto pred = multiscale_infer(loaded.model, raster_as<S>(sample.image), rc.infer.scales,
                                       rc.infer.flip, rc.infer.window, rc.infer.stride);
    std::vector<std::uint8_t> pred_u8(pred.class_map.size());
    for (std::size_t i = 0; i < pred_u8.size(); ++i) {
      pred_u8[i] = static_cast<std::uint8_t>(pred.class_map[i]);
    }
    conf.accumulate(pred_u8, sample.labels);
  }
  const MetricsReport report = compute_metrics(conf);
  std::fputs(metrics_table(report, codec).c_str(), stdout);
  fs::create_directories(rc.paths.out);
  std::ofstream table((fs::path(rc.paths.out) / "metrics.txt").string());
  table << metrics_table(report, codec);
  std::ofstream kv((fs::path(rc.paths.out) / "metrics.kv").string());
  kv << metrics_kv(report, codec);
  return kExitOk;
}

template <typename S>
int run_infer(const RunConfig& rc, const std::string& input) {
  const LabelCodec& codec = LabelCodec::loveda();
  auto loaded = load_checkpoint<S>(checkpoint_path(rc));
  const auto image = raster_as<S>(image_from_u8(load_netpbm(input)));
  const auto pred = multiscale_infer(loaded.model, image, rc.infer.scales, rc.infer.flip,
                                     rc.infer.window, rc.infer.stride);
  fs::create_directories(rc.paths.out);
  const std::string out_path =
      (fs::path(rc.paths.out) / (fs::path(input).stem().string() + "_pred.ppm")).string();
  save_netpbm(out_path, render_class_map(pred.class_map, pred.h, pred.w, codec));
  std::printf("wrote %s\n", out_path.c_str());
  return kExitOk;
}

int run_gradcheck(const RunConfig& rc) {
  // Verification always runs at 64-bit precision.
  SyntheticSpec spec = rc.data;
  spec.count = 1;
  spec.image_size = rc.model.encoder.image_size;
  spec.num_classes = rc.model.encoder.num_classes;
  const auto samples = gen_synthetic(spec);

  Rng rng(rc.train.seed);
  Model<double> model(rc.model, rng);
  auto image = image_to_tensor(raster_as<double>(samples[0].image));
  std::vector<int> labels(samples[0].labels.begin(), samples[0].labels.end());

  const auto t0 = std::chrono::steady_clock::now();
  const auto result = model_grad_check(model, image, labels, spec.image_size, spec.image_size);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  for (const auto& g : result.groups) {
    std::printf("%-28s max_rel_err %.3e\n", g.name.c_str(), g.max_rel_err);
  }
  std::printf("overall max_rel_err %.3e (%.1f s, %d threads)\n", result.max_rel_err, secs,
              worker_count());
  return result.max_rel_err <= 1e-5 ? kExitOk : kExitNumeric;
}

template <typename S>
int run_export_maps(const RunConfig& rc, const std::string& input) {
  const LabelCodec& codec = LabelCodec::loveda();
  auto loaded = load_checkpoint<S>(checkpoint_path(rc));
  const Model<S>& model = loaded.model;
  const int native = model.cfg.encoder.image_size;

  Raster<S> image;
  if (!input.empty()) {
    image = raster_as<S>(image_from_u8(load_netpbm(input)));
    if (image.h != native || image.w != native) {
      image = resize_raster(image, native, native);
    }
  } else {
    SyntheticSpec spec = rc.data;
    spec.count = 1;
    spec.image_size = native;
    spec.num_classes = model.cfg.encoder.num_classes;
    image = raster_as<S>(gen_synthetic(spec)[0].image);
  }

  fs::create_directories(rc.paths.out);
  const fs::path out_dir(rc.paths.out);

  NoGradGuard no_grad;
  const auto art = model.forward(image_to_tensor(image));
  const auto pred = upsample_and_classify(art.logits_map, native, native);
  save_netpbm((out_dir / "prediction.ppm").string(),
              render_class_map(pred.class_map, native, native, codec));

  if (art.assoc) {
    save_netpbm((out_dir / "assoc_entropy.pgm").string(),
                render_association_entropy(*art.assoc));
    for (int k = 0; k < kNeighborhood; ++k) {
      save_netpbm((out_dir / ("assoc_q" + std::to_string(k) + ".pgm")).string(),
                  render_association_plane(*art.assoc, k));
    }
  }

  // Per-class attention maps over the patch grid.
  const int g = model.cfg.encoder.grid_size();
  const int c = model.cfg.encoder.num_classes;
  const auto attn = class_attention(art.enc, c, model.cfg.encoder.num_patches(),
                                    model.cfg.encoder.attn_agg_layers, model.cfg.refine_steps);
  for (int cls = 0; cls < c; ++cls) {
    std::vector<S> map(static_cast<std::size_t>(g) * g);
    for (int s = 0; s < g * g; ++s) {
      map[static_cast<std::size_t>(s)] =
          attn.refined->data[static_cast<std::size_t>(cls) * g * g + s];
    }
    save_netpbm((out_dir / ("class_attention_" + codec.entry(cls).name + ".pgm")).string(),
                render_grayscale(map, g, g));
  }
  std::printf("wrote maps to %s\n", rc.paths.out.c_str());
  return kExitOk;
}

int dispatch(const std::vector<std::string>& args) {
  CLI::App app{"Region-association segmentation toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir, model_preset, scales_text, input_path;
  std::uint64_t seed = 0;
  bool seed_set = false, flip = false;
  int window = -1, stride = -1;

  app.add_option("--config", config_path, "Config file (key = value lines)");
  app.add_option("--seed", seed, "Override train/data seed")->each([&](const std::string&) {
    seed_set = true;
  });
  app.add_option("--out", out_dir, "Output directory");
  app.add_option("--model", model_preset, "Model preset: tiny|ti|s|b|l");
  app.add_option("--scales", scales_text, "Comma-separated inference scales");
  app.add_flag("--flip", flip, "Mirror augmentation at inference");
  app.add_option("--window", window, "Sliding-window size");
  app.add_option("--stride", stride, "Sliding-window stride");

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  auto* tr = app.add_subcommand("train", "Train a model");
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint and print metrics");
  auto* in = app.add_subcommand("infer", "Segment one image");
  in->add_option("image", input_path, "Input PPM image")->required();
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  auto* ex = app.add_subcommand("export-maps", "Export prediction and proxy maps");
  ex->add_option("image", input_path, "Input PPM image (optional)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints help or the parse problem
    return kExitUsage;
  }

  RunConfig rc;
  if (!config_path.empty()) {
    rc = RunConfig::from_kv(load_kv_file(config_path));
  }
  if (!model_preset.empty()) {
    rc.model = preset_config(model_preset);
  }
  if (seed_set) {
    rc.train.seed = seed;
    rc.data.seed = seed;
  }
  if (!out_dir.empty()) rc.paths.out = out_dir;
  if (!scales_text.empty()) rc.infer.scales = parse_scale_list(scales_text);
  if (flip) rc.infer.flip = true;
  if (window >= 0) rc.infer.window = window;
  if (stride >= 0) rc.infer.stride = stride;

  const bool f64 = rc.train.precision == "f64";
  if (gen->parsed()) {
    const auto samples = gen_synthetic(rc.data);
    save_dataset(rc.paths.out, samples, LabelCodec::loveda());
    std::printf("wrote %zu samples to %s\n", samples.size(), rc.paths.out.c_str());
    return kExitOk;
  }
  if (tr->parsed()) return f64 ? run_train<double>(rc) : run_train<float>(rc);
  if (ev->parsed()) return f64 ? run_eval<double>(rc) : run_eval<float>(rc);
  if (in->parsed()) return f64 ? run_infer<double>(rc, input_path) : run_infer<float>(rc, input_path);
  if (gc->parsed()) return run_gradcheck(rc);
  if (ex->parsed()) {
    return f64 ? run_export_maps<double>(rc, input_path) : run_export_maps<float>(rc, input_path);
  }
  return kExitUsage;
}

}  // namespace

int cli_main(const std::vector<std::string>& args) {
  try {
    return dispatch(args);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    switch (e.kind()) {
      case ErrorKind::config:
        return kExitUsage;
      case ErrorKind::data:
      case ErrorKind::format:
        return kExitData;
      case ErrorKind::dimension:
      case ErrorKind::numeric:
      case ErrorKind::training:
        return kExitNumeric;
    }
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitNumeric;
  }
}

}  // namespace emra
