#pragma once

#include <map>
#include <string>
#include <vector>

#include "emra/model.hpp"
#include "emra/synthetic.hpp"
#include "emra/train.hpp"

namespace emra {

// Line-oriented "key = value" text with '#' comments. Keys are dotted to
// namespace the owning module. Serialization emits sorted keys, so
// parse -> serialize -> parse is a fixed point.
using KvMap = std::map<std::string, std::string>;

KvMap parse_kv_text(const std::string& text);
std::string serialize_kv(const KvMap& kv);

KvMap load_kv_file(const std::string& path);

struct InferConfig {
  std::vector<double> scales = {1.0};
  bool flip = false;
  int window = 0;  // 0: model input size
  int stride = 0;  // 0: window / 2
};

struct PathsConfig {
  std::string data;        // dataset directory (empty: generate from data.*)
  std::string out = "out";
  std::string checkpoint;  // empty: <out>/model.ckpt
};

// The full merged run configuration. Every field has a default (the model
// defaults to the desk-scale tiny preset); unknown keys in a config file are
// errors.
struct RunConfig {
  ModelConfig model = preset_config("tiny");
  TrainConfig train;
  InferConfig infer;
  SyntheticSpec data;
  PathsConfig paths;

  static RunConfig from_kv(const KvMap& kv);
  KvMap to_kv() const;
};

// Subset used inside checkpoints: architecture plus training counters.
KvMap model_config_to_kv(const ModelConfig& cfg);
ModelConfig model_config_from_kv(const KvMap& kv);

std::string format_double(double v);
std::vector<double> parse_scale_list(const std::string& text);
std::string format_scale_list(const std::vector<double>& scales);

}  // namespace emra
