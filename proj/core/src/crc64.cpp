#include <array>
#include <cstddef>
#include <cstdint>

namespace emra {

namespace {

// CRC-64/XZ: reflected polynomial 0xC96C5795D7870F42.
std::array<std::uint64_t, 256> make_table() {
  std::array<std::uint64_t, 256> table{};
  for (std::uint64_t i = 0; i < 256; ++i) {
    std::uint64_t crc = i;
    for (int b = 0; b < 8; ++b) {
      crc = (crc & 1) ? (crc >> 1) ^ 0xC96C5795D7870F42ull : crc >> 1;
    }
    table[static_cast<std::size_t>(i)] = crc;
  }
  return table;
}

}  // namespace

std::uint64_t crc64(const void* data, std::size_t len) {
  static const std::array<std::uint64_t, 256> table = make_table();
  const auto* bytes = static_cast<const std::uint8_t*>(data);
  std::uint64_t crc = ~0ull;
  for (std::size_t i = 0; i < len; ++i) {
    crc = table[(crc ^ bytes[i]) & 0xFF] ^ (crc >> 8);
  }
  return ~crc;
}

}  // namespace emra
