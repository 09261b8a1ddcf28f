#pragma once

#include <string>

#include "emra/raster.hpp"

namespace emra {

// Binary netpbm I/O: P6 (RGB) and P5 (grayscale), maxval 255 only. Comments
// after the magic token are accepted on read and never written. Parse errors
// are FormatErrors carrying the byte offset of the problem.

ImageU8 load_netpbm(const std::string& path);
void save_netpbm(const std::string& path, const ImageU8& image);

// In-memory codecs, used by the file functions and directly by tests.
ImageU8 decode_netpbm(const std::string& bytes);
std::string encode_netpbm(const ImageU8& image);

}  // namespace emra
