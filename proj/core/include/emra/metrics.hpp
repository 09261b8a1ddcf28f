#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "emra/errors.hpp"
#include "emra/raster.hpp"

namespace emra {

inline constexpr int kIgnoreLabel = 255;

// Ordered class-name / RGB table. Class indices are 0-based positions in the
// list; (0,0,0) is reserved as the ignore color and maps to label 255.
class LabelCodec {
 public:
  struct Entry {
    std::string name;
    std::array<std::uint8_t, 3> rgb;
  };

  explicit LabelCodec(std::vector<Entry> entries);

  // The seven land-cover categories with their standard colors.
  static const LabelCodec& loveda();

  int num_classes() const { return static_cast<int>(entries_.size()); }
  const Entry& entry(int cls) const { return entries_[static_cast<std::size_t>(cls)]; }

  // RGB label image -> class-index map. Unknown colors raise a DataError
  // naming the pixel coordinate and triple.
  std::vector<std::uint8_t> decode_rgb(const ImageU8& label_image) const;

  // Class-index map -> RGB label image. Exact inverse of decode_rgb.
  ImageU8 encode_rgb(const std::vector<std::uint8_t>& labels, int h, int w) const;

 private:
  std::vector<Entry> entries_;
};

// K x K pixel counts, counts[gt][pred]. Ignored pixels are never counted.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  int num_classes() const { return k_; }
  std::uint64_t at(int gt, int pred) const {
    return counts_[static_cast<std::size_t>(gt) * k_ + pred];
  }
  std::uint64_t total() const;

  void accumulate(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt);
  void merge(const ConfusionMatrix& other);

 private:
  int k_;
  std::vector<std::uint64_t> counts_;
};

struct MetricsReport {
  double miou = 0.0;
  double oa = 0.0;
  double mean_f1 = 0.0;
  std::vector<double> iou;
  std::vector<double> f1;
  std::vector<double> precision;
  std::vector<double> recall;
  // Classes with an empty union (absent from both prediction and ground
  // truth) are excluded from the miou / mean_f1 averages.
  std::vector<bool> counted;
};

MetricsReport compute_metrics(const ConfusionMatrix& conf);

// Human-readable table, one row per class plus the summary line.
std::string metrics_table(const MetricsReport& report, const LabelCodec& codec);

// Machine-readable "metric=value" lines, six decimal places.
std::string metrics_kv(const MetricsReport& report, const LabelCodec& codec);

}  // namespace emra
