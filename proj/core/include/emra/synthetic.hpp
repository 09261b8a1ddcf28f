#pragma once

#include <cstdint>
#include <vector>

#include "emra/raster.hpp"
#include "emra/rng.hpp"

namespace emra {

// Deterministic multi-class scene generator: a background plus randomly
// placed rectangles, disks, and horizontal stripes, each painted in its
// class's palette color. Images carry additive Gaussian pixel noise; label
// maps are noise-free.
struct SyntheticSpec {
  std::uint64_t seed = 0;
  int count = 8;
  int image_size = 48;
  int num_classes = 4;  // at most 7 (palette bound)
  int shapes_min = 2;
  int shapes_max = 5;
};

struct Sample {
  Raster<float> image;              // [h,w,3] in [0,1]
  std::vector<std::uint8_t> labels; // [h*w] class indices
};

std::vector<Sample> gen_synthetic(const SyntheticSpec& spec);

}  // namespace emra
