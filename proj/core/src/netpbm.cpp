#include "emra/netpbm.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

namespace emra {

namespace {

struct Cursor {
  const std::string& bytes;
  std::size_t pos = 0;

  bool eof() const { return pos >= bytes.size(); }
  char peek() const { return bytes[pos]; }

  // Skips whitespace and '#' comments (comment runs to end of line).
  void skip_separators() {
    while (!eof()) {
      const char ch = bytes[pos];
      if (std::isspace(static_cast<unsigned char>(ch))) {
        ++pos;
      } else if (ch == '#') {
        while (!eof() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  }

  int read_uint(const char* what) {
    skip_separators();
    if (eof() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      throw FormatError(FormatIssue::bad_value,
                        std::string("netpbm: expected ") + what + " at byte offset " +
                            std::to_string(pos),
                        static_cast<long long>(pos));
    }
    long long value = 0;
    while (!eof() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      value = value * 10 + (bytes[pos] - '0');
      if (value > 1'000'000'000) {
        throw FormatError(FormatIssue::bad_value,
                          std::string("netpbm: ") + what + " out of range at byte offset " +
                              std::to_string(pos),
                          static_cast<long long>(pos));
      }
      ++pos;
    }
    return static_cast<int>(value);
  }
};

}  // namespace

ImageU8 decode_netpbm(const std::string& bytes) {
  if (bytes.size() < 2) {
    throw FormatError(FormatIssue::truncated, "netpbm: file shorter than magic token", 0);
  }
  int channels = 0;
  if (bytes[0] == 'P' && bytes[1] == '6') {
    channels = 3;
  } else if (bytes[0] == 'P' && bytes[1] == '5') {
    channels = 1;
  } else {
    throw FormatError(FormatIssue::bad_magic,
                      "netpbm: unsupported magic '" + bytes.substr(0, 2) +
                          "' (only binary P5/P6 are accepted)",
                      0);
  }
  Cursor cur{bytes, 2};
  const int w = cur.read_uint("width");
  const int h = cur.read_uint("height");
  const int maxval = cur.read_uint("maxval");
  if (w <= 0 || h <= 0) {
    throw FormatError(FormatIssue::bad_value, "netpbm: non-positive image dimensions",
                      static_cast<long long>(cur.pos));
  }
  if (maxval != 255) {
    throw FormatError(FormatIssue::bad_value,
                      "netpbm: maxval must be 255, got " + std::to_string(maxval),
                      static_cast<long long>(cur.pos));
  }
  // Exactly one whitespace byte separates the header from the raster.
  if (cur.eof() || !std::isspace(static_cast<unsigned char>(cur.peek()))) {
    throw FormatError(FormatIssue::bad_value, "netpbm: missing separator before pixel data",
                      static_cast<long long>(cur.pos));
  }
  ++cur.pos;
  const std::size_t need = static_cast<std::size_t>(w) * h * channels;
  if (bytes.size() - cur.pos < need) {
    throw FormatError(FormatIssue::truncated,
                      "netpbm: expected " + std::to_string(need) + " pixel bytes, found " +
                          std::to_string(bytes.size() - cur.pos) + " at byte offset " +
                          std::to_string(cur.pos),
                      static_cast<long long>(cur.pos));
  }
  ImageU8 image(h, w, channels);
  for (std::size_t i = 0; i < need; ++i) {
    image.v[i] = static_cast<std::uint8_t>(bytes[cur.pos + i]);
  }
  return image;
}

std::string encode_netpbm(const ImageU8& image) {
  if (image.c != 1 && image.c != 3) {
    throw DataError("netpbm: only 1- or 3-channel rasters can be written");
  }
  if (image.h <= 0 || image.w <= 0) {
    throw DataError("netpbm: empty raster");
  }
  std::ostringstream os;
  os << (image.c == 3 ? "P6" : "P5") << '\n' << image.w << ' ' << image.h << '\n' << "255\n";
  std::string out = os.str();
  out.append(reinterpret_cast<const char*>(image.v.data()), image.v.size());
  return out;
}

ImageU8 load_netpbm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw DataError("cannot open image file '" + path + "'");
  }
  std::ostringstream buf;
  buf << f.rdbuf();
  return decode_netpbm(buf.str());
}

void save_netpbm(const std::string& path, const ImageU8& image) {
  const std::string bytes = encode_netpbm(image);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) {
    throw DataError("cannot open '" + path + "' for writing");
  }
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) {
    throw DataError("short write to '" + path + "'");
  }
}

}  // namespace emra
