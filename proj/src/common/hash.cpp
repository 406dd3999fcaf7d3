#include "cdg/hash.hpp"

#include <bit>
#include <cstring>

namespace cdg {

namespace {
constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;
}

std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= kFnvPrime;
  }
  return h;
}

std::uint64_t fnv1a(std::string_view text, std::uint64_t seed) {
  return fnv1a(std::as_bytes(std::span(text.data(), text.size())), seed);
}

std::uint64_t fnv1a(std::span<const double> values, std::uint64_t seed) {
  // Hash the little-endian encoding so results agree across hosts.
  std::uint64_t h = seed;
  for (double v : values) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xffu;
      h *= kFnvPrime;
    }
  }
  return h;
}

}  // namespace cdg
