#pragma once

#include <cstdint>
#include <span>
#include <string_view>

namespace cdg {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;

// 64-bit FNV-1a over raw bytes. Chainable through `seed`.
std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t seed = kFnvOffset);
std::uint64_t fnv1a(std::string_view text, std::uint64_t seed = kFnvOffset);
std::uint64_t fnv1a(std::span<const double> values, std::uint64_t seed = kFnvOffset);

}  // namespace cdg
