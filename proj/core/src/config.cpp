#include "emra/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace emra {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const int r = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (...) {
    throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
  }
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const unsigned long long r = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<std::uint64_t>(r);
  } catch (...) {
    throw ConfigError("config: key '" + key + "' expects an unsigned integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double r = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (...) {
    throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: key '" + key + "' expects true/false, got '" + v + "'");
}

}  // namespace

std::string format_double(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::vector<double> parse_scale_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(to_double("scales", item));
  }
  if (out.empty()) {
    throw ConfigError("config: empty scale list");
  }
  return out;
}

std::string format_scale_list(const std::vector<double>& scales) {
  std::string out;
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (i) out += ',';
    out += format_double(scales[i]);
  }
  return out;
}

KvMap parse_kv_text(const std::string& text) {
  KvMap kv;
  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError(FormatIssue::bad_value,
                        "config: line " + std::to_string(line_no) + " is not 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw FormatError(FormatIssue::bad_value,
                        "config: empty key on line " + std::to_string(line_no));
    }
    kv[key] = value;
  }
  return kv;
}

std::string serialize_kv(const KvMap& kv) {
  std::string out;
  for (const auto& [k, v] : kv) {
    out += k;
    out += " = ";
    out += v;
    out += '\n';
  }
  return out;
}

KvMap load_kv_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) {
    throw DataError("cannot open config file '" + path + "'");
  }
  std::ostringstream buf;
  buf << f.rdbuf();
  return parse_kv_text(buf.str());
}

RunConfig RunConfig::from_kv(const KvMap& kv) {
  RunConfig rc;
  // Handlers by exact key; any key without a handler is a typo.
  std::map<std::string, std::function<void(const std::string&, const std::string&)>> handlers;
  auto int_field = [&](const std::string& key, int* dst) {
    handlers[key] = [dst](const std::string& k, const std::string& v) { *dst = to_int(k, v); };
  };
  auto dbl_field = [&](const std::string& key, double* dst) {
    handlers[key] = [dst](const std::string& k, const std::string& v) { *dst = to_double(k, v); };
  };
  auto u64_field = [&](const std::string& key, std::uint64_t* dst) {
    handlers[key] = [dst](const std::string& k, const std::string& v) { *dst = to_u64(k, v); };
  };
  auto str_field = [&](const std::string& key, std::string* dst) {
    handlers[key] = [dst](const std::string&, const std::string& v) { *dst = v; };
  };

  int_field("encoder.image_size", &rc.model.encoder.image_size);
  int_field("encoder.patch_size", &rc.model.encoder.patch_size);
  int_field("encoder.depth", &rc.model.encoder.depth);
  int_field("encoder.embed_dim", &rc.model.encoder.embed_dim);
  int_field("encoder.head_dim", &rc.model.encoder.head_dim);
  int_field("encoder.num_classes", &rc.model.encoder.num_classes);
  int_field("encoder.token_head_depth", &rc.model.encoder.token_head_depth);
  int_field("encoder.attn_agg_layers", &rc.model.encoder.attn_agg_layers);
  int_field("encoder.stride_h", &rc.model.encoder.stride_h);
  int_field("encoder.stride_w", &rc.model.encoder.stride_w);
  handlers["model.variant"] = [&rc](const std::string&, const std::string& v) {
    rc.model.variant = variant_from_name(v);
  };
  int_field("model.refine_steps", &rc.model.refine_steps);

  dbl_field("train.base_lr", &rc.train.base_lr);
  dbl_field("train.power", &rc.train.power);
  dbl_field("train.weight_decay", &rc.train.weight_decay);
  dbl_field("train.momentum", &rc.train.momentum);
  int_field("train.epochs", &rc.train.epochs);
  int_field("train.batch_size", &rc.train.batch_size);
  int_field("train.crop_size", &rc.train.crop_size);
  u64_field("train.seed", &rc.train.seed);
  str_field("train.precision", &rc.train.precision);

  handlers["infer.scales"] = [&rc](const std::string&, const std::string& v) {
    rc.infer.scales = parse_scale_list(v);
  };
  handlers["infer.flip"] = [&rc](const std::string& k, const std::string& v) {
    rc.infer.flip = to_bool(k, v);
  };
  int_field("infer.window", &rc.infer.window);
  int_field("infer.stride", &rc.infer.stride);

  u64_field("data.seed", &rc.data.seed);
  int_field("data.count", &rc.data.count);
  int_field("data.image_size", &rc.data.image_size);
  int_field("data.num_classes", &rc.data.num_classes);
  int_field("data.shapes_min", &rc.data.shapes_min);
  int_field("data.shapes_max", &rc.data.shapes_max);

  str_field("paths.data", &rc.paths.data);
  str_field("paths.out", &rc.paths.out);
  str_field("paths.checkpoint", &rc.paths.checkpoint);

  for (const auto& [key, value] : kv) {
    auto it = handlers.find(key);
    if (it == handlers.end()) {
      throw ConfigError("config: unknown key '" + key + "'");
    }
    it->second(key, value);
  }
  return rc;
}

KvMap RunConfig::to_kv() const {
  KvMap kv;
  kv["encoder.image_size"] = std::to_string(model.encoder.image_size);
  kv["encoder.patch_size"] = std::to_string(model.encoder.patch_size);
  kv["encoder.depth"] = std::to_string(model.encoder.depth);
  kv["encoder.embed_dim"] = std::to_string(model.encoder.embed_dim);
  kv["encoder.head_dim"] = std::to_string(model.encoder.head_dim);
  kv["encoder.num_classes"] = std::to_string(model.encoder.num_classes);
  kv["encoder.token_head_depth"] = std::to_string(model.encoder.token_head_depth);
  kv["encoder.attn_agg_layers"] = std::to_string(model.encoder.attn_agg_layers);
  kv["encoder.stride_h"] = std::to_string(model.encoder.stride_h);
  kv["encoder.stride_w"] = std::to_string(model.encoder.stride_w);
  kv["model.variant"] = variant_name(model.variant);
  kv["model.refine_steps"] = std::to_string(model.refine_steps);
  kv["train.base_lr"] = format_double(train.base_lr);
  kv["train.power"] = format_double(train.power);
  kv["train.weight_decay"] = format_double(train.weight_decay);
  kv["train.momentum"] = format_double(train.momentum);
  kv["train.epochs"] = std::to_string(train.epochs);
  kv["train.batch_size"] = std::to_string(train.batch_size);
  kv["train.crop_size"] = std::to_string(train.crop_size);
  kv["train.seed"] = std::to_string(train.seed);
  kv["train.precision"] = train.precision;
  kv["infer.scales"] = format_scale_list(infer.scales);
  kv["infer.flip"] = infer.flip ? "true" : "false";
  kv["infer.window"] = std::to_string(infer.window);
  kv["infer.stride"] = std::to_string(infer.stride);
  kv["data.seed"] = std::to_string(data.seed);
  kv["data.count"] = std::to_string(data.count);
  kv["data.image_size"] = std::to_string(data.image_size);
  kv["data.num_classes"] = std::to_string(data.num_classes);
  kv["data.shapes_min"] = std::to_string(data.shapes_min);
  kv["data.shapes_max"] = std::to_string(data.shapes_max);
  kv["paths.data"] = paths.data;
  kv["paths.out"] = paths.out;
  kv["paths.checkpoint"] = paths.checkpoint;
  return kv;
}

KvMap model_config_to_kv(const ModelConfig& cfg) {
  KvMap kv;
  kv["encoder.image_size"] = std::to_string(cfg.encoder.image_size);
  kv["encoder.patch_size"] = std::to_string(cfg.encoder.patch_size);
  kv["encoder.depth"] = std::to_string(cfg.encoder.depth);
  kv["encoder.embed_dim"] = std::to_string(cfg.encoder.embed_dim);
  kv["encoder.head_dim"] = std::to_string(cfg.encoder.head_dim);
  kv["encoder.num_classes"] = std::to_string(cfg.encoder.num_classes);
  kv["encoder.token_head_depth"] = std::to_string(cfg.encoder.token_head_depth);
  kv["encoder.attn_agg_layers"] = std::to_string(cfg.encoder.attn_agg_layers);
  kv["encoder.stride_h"] = std::to_string(cfg.encoder.stride_h);
  kv["encoder.stride_w"] = std::to_string(cfg.encoder.stride_w);
  kv["model.variant"] = variant_name(cfg.variant);
  kv["model.refine_steps"] = std::to_string(cfg.refine_steps);
  return kv;
}

ModelConfig model_config_from_kv(const KvMap& kv) {
  ModelConfig cfg;
  auto get_int = [&kv](const std::string& key, int* dst) {
    auto it = kv.find(key);
    if (it != kv.end()) *dst = to_int(key, it->second);
  };
  get_int("encoder.image_size", &cfg.encoder.image_size);
  get_int("encoder.patch_size", &cfg.encoder.patch_size);
  get_int("encoder.depth", &cfg.encoder.depth);
  get_int("encoder.embed_dim", &cfg.encoder.embed_dim);
  get_int("encoder.head_dim", &cfg.encoder.head_dim);
  get_int("encoder.num_classes", &cfg.encoder.num_classes);
  get_int("encoder.token_head_depth", &cfg.encoder.token_head_depth);
  get_int("encoder.attn_agg_layers", &cfg.encoder.attn_agg_layers);
  get_int("encoder.stride_h", &cfg.encoder.stride_h);
  get_int("encoder.stride_w", &cfg.encoder.stride_w);
  auto it = kv.find("model.variant");
  if (it != kv.end()) cfg.variant = variant_from_name(it->second);
  get_int("model.refine_steps", &cfg.refine_steps);
  return cfg;
}

}  // namespace emra
