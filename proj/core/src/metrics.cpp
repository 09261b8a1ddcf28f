#include "emra/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace emra {

LabelCodec::LabelCodec(std::vector<Entry> entries) : entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].rgb == std::array<std::uint8_t, 3>{0, 0, 0}) {
      throw ConfigError("label codec: (0,0,0) is reserved for ignored pixels");
    }
    for (std::size_t j = i + 1; j < entries_.size(); ++j) {
      if (entries_[i].rgb == entries_[j].rgb) {
        throw ConfigError("label codec: duplicate RGB triple for classes '" + entries_[i].name +
                          "' and '" + entries_[j].name + "'");
      }
    }
  }
}

const LabelCodec& LabelCodec::loveda() {
  static const LabelCodec codec({
      {"background", {255, 255, 255}},
      {"building", {255, 0, 0}},
      {"road", {255, 255, 0}},
      {"water", {0, 0, 255}},
      {"barren", {159, 129, 183}},
      {"forest", {0, 255, 0}},
      {"agriculture", {255, 195, 128}},
  });
  return codec;
}

std::vector<std::uint8_t> LabelCodec::decode_rgb(const ImageU8& label_image) const {
  if (label_image.c != 3) {
    throw DataError("decode_rgb: label image must have 3 channels");
  }
  std::vector<std::uint8_t> out(static_cast<std::size_t>(label_image.h) * label_image.w);
  for (int y = 0; y < label_image.h; ++y) {
    for (int x = 0; x < label_image.w; ++x) {
      const std::array<std::uint8_t, 3> rgb = {label_image.at(y, x, 0), label_image.at(y, x, 1),
                                               label_image.at(y, x, 2)};
      if (rgb == std::array<std::uint8_t, 3>{0, 0, 0}) {
        out[static_cast<std::size_t>(y) * label_image.w + x] = kIgnoreLabel;
        continue;
      }
      int cls = -1;
      for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].rgb == rgb) {
          cls = static_cast<int>(i);
          break;
        }
      }
      if (cls < 0) {
        throw DataError("decode_rgb: unknown color (" + std::to_string(rgb[0]) + "," +
                        std::to_string(rgb[1]) + "," + std::to_string(rgb[2]) + ") at pixel (" +
                        std::to_string(x) + "," + std::to_string(y) + ")");
      }
      out[static_cast<std::size_t>(y) * label_image.w + x] = static_cast<std::uint8_t>(cls);
    }
  }
  return out;
}

ImageU8 LabelCodec::encode_rgb(const std::vector<std::uint8_t>& labels, int h, int w) const {
  if (labels.size() != static_cast<std::size_t>(h) * static_cast<std::size_t>(w)) {
    throw DimensionError("encode_rgb: label count does not match " + std::to_string(h) + "x" +
                         std::to_string(w));
  }
  ImageU8 out(h, w, 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int cls = labels[static_cast<std::size_t>(y) * w + x];
      if (cls == kIgnoreLabel) {
        out.at(y, x, 0) = 0;
        out.at(y, x, 1) = 0;
        out.at(y, x, 2) = 0;
        continue;
      }
      if (cls < 0 || cls >= num_classes()) {
        throw DataError("encode_rgb: class index " + std::to_string(cls) + " at pixel (" +
                        std::to_string(x) + "," + std::to_string(y) + ") outside [0," +
                        std::to_string(num_classes()) + ")");
      }
      const auto& rgb = entries_[static_cast<std::size_t>(cls)].rgb;
      out.at(y, x, 0) = rgb[0];
      out.at(y, x, 1) = rgb[1];
      out.at(y, x, 2) = rgb[2];
    }
  }
  return out;
}

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : k_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
  if (num_classes < 1) {
    throw ConfigError("confusion matrix needs at least one class");
  }
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (const auto v : counts_) t += v;
  return t;
}

void ConfusionMatrix::accumulate(const std::vector<std::uint8_t>& pred,
                                 const std::vector<std::uint8_t>& gt) {
  if (pred.size() != gt.size()) {
    throw DimensionError("confusion accumulate: prediction and ground truth sizes differ (" +
                         std::to_string(pred.size()) + " vs " + std::to_string(gt.size()) + ")");
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const int g = gt[i];
    if (g == kIgnoreLabel) continue;
    const int p = pred[i];
    if (g >= k_ || p >= k_) {
      throw DataError("confusion accumulate: label " + std::to_string(std::max(g, p)) +
                      " outside [0," + std::to_string(k_) + ") at pixel " + std::to_string(i));
    }
    ++counts_[static_cast<std::size_t>(g) * k_ + p];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_) {
    throw DimensionError("confusion merge: class count mismatch");
  }
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

MetricsReport compute_metrics(const ConfusionMatrix& conf) {
  const int k = conf.num_classes();
  MetricsReport r;
  r.iou.assign(static_cast<std::size_t>(k), 0.0);
  r.f1.assign(static_cast<std::size_t>(k), 0.0);
  r.precision.assign(static_cast<std::size_t>(k), 0.0);
  r.recall.assign(static_cast<std::size_t>(k), 0.0);
  r.counted.assign(static_cast<std::size_t>(k), false);

  std::uint64_t trace = 0;
  double iou_sum = 0.0, f1_sum = 0.0;
  int counted = 0;
  for (int c = 0; c < k; ++c) {
    const std::uint64_t tp = conf.at(c, c);
    std::uint64_t row = 0, col = 0;
    for (int j = 0; j < k; ++j) {
      row += conf.at(c, j);
      col += conf.at(j, c);
    }
    trace += tp;
    const std::uint64_t fn = row - tp;
    const std::uint64_t fp = col - tp;
    const std::uint64_t uni = tp + fp + fn;
    const std::size_t ci = static_cast<std::size_t>(c);
    r.precision[ci] = (tp + fp) ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    r.recall[ci] = (tp + fn) ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    const double pr = r.precision[ci] + r.recall[ci];
    r.f1[ci] = pr > 0.0 ? 2.0 * r.precision[ci] * r.recall[ci] / pr : 0.0;
    r.iou[ci] = uni ? static_cast<double>(tp) / static_cast<double>(uni) : 0.0;
    if (uni) {
      r.counted[ci] = true;
      iou_sum += r.iou[ci];
      f1_sum += r.f1[ci];
      ++counted;
    }
  }
  const std::uint64_t total = conf.total();
  r.oa = total ? static_cast<double>(trace) / static_cast<double>(total) : 0.0;
  r.miou = counted ? iou_sum / counted : 0.0;
  r.mean_f1 = counted ? f1_sum / counted : 0.0;
  return r;
}

std::string metrics_table(const MetricsReport& report, const LabelCodec& codec) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-14s %9s %9s %9s %9s\n", "class", "iou", "f1", "prec", "rec");
  os << buf;
  for (int c = 0; c < codec.num_classes(); ++c) {
    const std::size_t ci = static_cast<std::size_t>(c);
    std::snprintf(buf, sizeof(buf), "%-14s %9.4f %9.4f %9.4f %9.4f%s\n",
                  codec.entry(c).name.c_str(), report.iou[ci], report.f1[ci], report.precision[ci],
                  report.recall[ci], report.counted[ci] ? "" : "  (empty)");
    os << buf;
  }
  std::snprintf(buf, sizeof(buf), "mIoU %.4f  OA %.4f  mF1 %.4f\n", report.miou, report.oa,
                report.mean_f1);
  os << buf;
  return os.str();
}

std::string metrics_kv(const MetricsReport& report, const LabelCodec& codec) {
  std::ostringstream os;
  char buf[160];
  auto emit = [&](const std::string& key, double v) {
    std::snprintf(buf, sizeof(buf), "%s=%.6f\n", key.c_str(), v);
    os << buf;
  };
  emit("miou", report.miou);
  emit("oa", report.oa);
  emit("mean_f1", report.mean_f1);
  for (int c = 0; c < codec.num_classes(); ++c) {
    const std::size_t ci = static_cast<std::size_t>(c);
    const std::string& name = codec.entry(c).name;
    emit("iou." + name, report.iou[ci]);
    emit("f1." + name, report.f1[ci]);
    emit("precision." + name, report.precision[ci]);
    emit("recall." + name, report.recall[ci]);
  }
  return os.str();
}

}  // namespace emra
