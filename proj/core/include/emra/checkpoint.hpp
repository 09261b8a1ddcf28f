#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "emra/config.hpp"
#include "emra/model.hpp"
#include "emra/train.hpp"

namespace emra {

// CRC-64 (XZ polynomial, reflected, init/xorout all-ones).
std::uint64_t crc64(const void* data, std::size_t len);

// Checkpoint layout, all integers little-endian:
//   magic "EMRA"
//   u32 version (= 1)
//   u64 config text length, then the UTF-8 config text
//   per parameter: u16 name length, name bytes, u8 rank, rank x u64 extents,
//                  raw little-endian f32 values
//   u64 CRC-64 of every preceding byte
// Parameter values are stored as f32 regardless of the in-memory precision,
// so f32 round trips are lossless.
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct ByteReader {
  const std::string& bytes;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (bytes.size() - pos < n) {
      throw FormatError(FormatIssue::truncated,
                        std::string("checkpoint: truncated while reading ") + what +
                            " at byte offset " + std::to_string(pos),
                        static_cast<long long>(pos));
    }
  }

  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(bytes[pos++]);
  }

  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<std::uint8_t>(bytes[pos + i])) << (8 * i);
    pos += 2;
    return v;
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }

  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }

  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

template <typename S>
std::string encode_checkpoint(const Model<S>& model, const TrainState& state) {
  KvMap kv = model_config_to_kv(model.cfg);
  kv["train.epoch"] = std::to_string(state.epoch);
  kv["train.step"] = std::to_string(state.step);
  kv["train.rng_state"] = std::to_string(state.rng.state());
  const std::string config_text = serialize_kv(kv);

  std::string out = "EMRA";
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, static_cast<std::uint64_t>(config_text.size()));
  out += config_text;

  for (const auto& [name, t] : model.named_params()) {
    if (name.size() > 0xFFFF) {
      throw ConfigError("checkpoint: parameter name too long: " + name);
    }
    detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t->shape.size()));
    for (const int e : t->shape) detail::put_u64(out, static_cast<std::uint64_t>(e));
    for (const S v : t->data) detail::put_f32(out, static_cast<float>(v));
  }

  detail::put_u64(out, crc64(out.data(), out.size()));
  return out;
}

template <typename S>
struct LoadedCheckpoint {
  Model<S> model;
  TrainState state;
};

template <typename S>
LoadedCheckpoint<S> decode_checkpoint(const std::string& bytes) {
  detail::ByteReader r{bytes};
  if (r.str(4, "magic") != "EMRA") {
    throw FormatError(FormatIssue::bad_magic, "checkpoint: bad magic bytes", 0);
  }
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError(FormatIssue::bad_version,
                      "checkpoint: unsupported version " + std::to_string(version), 4);
  }
  const std::uint64_t cfg_len = r.u64("config length");
  const std::string config_text = r.str(cfg_len, "config text");
  const KvMap kv = parse_kv_text(config_text);

  LoadedCheckpoint<S> out;
  const ModelConfig cfg = model_config_from_kv(kv);
  Rng init_rng(0);
  out.model = Model<S>(cfg, init_rng);
  auto get_counter = [&kv](const std::string& key) -> std::uint64_t {
    auto it = kv.find(key);
    if (it == kv.end()) return 0;
    return std::stoull(it->second);
  };
  out.state.epoch = static_cast<int>(get_counter("train.epoch"));
  out.state.step = static_cast<long long>(get_counter("train.step"));
  out.state.rng.set_state(get_counter("train.rng_state"));

  // Verify the trailer before trusting record contents.
  if (bytes.size() < r.pos + 8) {
    throw FormatError(FormatIssue::truncated, "checkpoint: missing CRC trailer",
                      static_cast<long long>(bytes.size()));
  }
  const std::size_t body_end = bytes.size() - 8;
  {
    detail::ByteReader tail{bytes, body_end};
    const std::uint64_t stored = tail.u64("crc");
    const std::uint64_t actual = crc64(bytes.data(), body_end);
    if (stored != actual) {
      throw FormatError(FormatIssue::bad_checksum, "checkpoint: CRC-64 mismatch",
                        static_cast<long long>(body_end));
    }
  }

  auto params = out.model.named_params();
  std::vector<bool> filled(params.size(), false);
  while (r.pos < body_end) {
    const std::uint16_t name_len = r.u16("name length");
    const std::string name = r.str(name_len, "name");
    const std::uint8_t rank = r.u8("rank");
    Shape shape(rank);
    for (int i = 0; i < rank; ++i) {
      shape[static_cast<std::size_t>(i)] = static_cast<int>(r.u64("extent"));
    }
    std::size_t idx = params.size();
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].first == name) {
        idx = i;
        break;
      }
    }
    if (idx == params.size()) {
      throw FormatError(FormatIssue::shape_mismatch,
                        "checkpoint: parameter '" + name + "' does not exist in this config");
    }
    auto& tensor = params[idx].second;
    if (tensor->shape != shape) {
      throw FormatError(FormatIssue::shape_mismatch,
                        "checkpoint: parameter '" + name + "' has shape " + shape_str(shape) +
                            " on disk but " + shape_str(tensor->shape) + " in this config");
    }
    for (auto& v : tensor->data) v = static_cast<S>(r.f32("parameter data"));
    filled[idx] = true;
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!filled[i]) {
      throw FormatError(FormatIssue::truncated,
                        "checkpoint: parameter '" + params[i].first + "' missing from file");
    }
  }
  return out;
}

template <typename S>
void save_checkpoint(const std::string& path, const Model<S>& model, const TrainState& state) {
  const std::string bytes = encode_checkpoint(model, state);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) {
    throw DataError("cannot open '" + path + "' for writing");
  }
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) {
    throw DataError("short write to '" + path + "'");
  }
}

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw DataError("cannot open checkpoint '" + path + "'");
  }
  std::ostringstream buf;
  buf << f.rdbuf();
  return decode_checkpoint<S>(buf.str());
}

}  // namespace emra
