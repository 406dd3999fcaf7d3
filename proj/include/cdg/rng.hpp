#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace cdg {

// Seeded generator with portable derived distributions. The standard library's
// distributions are implementation-defined, so uniform/normal/integer draws are
// implemented here on top of mt19937_64, whose output sequence is fixed by the
// standard.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed), seed_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_int(std::uint64_t n);

  // Standard normal via the Marsaglia polar method.
  double normal();

  bool bernoulli(double p) { return uniform() < p; }

  // Independent child stream keyed by a tag; does not advance this generator.
  Rng derive(std::string_view tag) const;
  Rng derive(std::uint64_t tag) const;

  std::uint64_t seed() const { return seed_; }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// splitmix64 finalizer; used to combine seeds with tags.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace cdg
