#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "raregen/tensor.hpp"

namespace raregen::numerics {

// Seeded random stream. All randomness in the project flows through explicit
// streams passed by argument; there is no global generator. Draws are fully
// determined by the seed: the engine is mt19937_64 (bit-exact per the C++
// standard) and the uniform/normal transforms below are our own, so identical
// seeds give bitwise-identical sequences on any platform.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t bits() { return engine_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double u01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; the spare value is cached.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n) without modulo bias.
  std::uint64_t below(std::uint64_t n);

  Tensor normal_tensor(std::vector<std::size_t> shape);
  Tensor uniform_tensor(std::vector<std::size_t> shape, double lo, double hi);

  // Fisher-Yates shuffle of [0, n) index vector.
  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derives an independent sub-seed from a master seed and a purpose tag, so
// that e.g. reference i always maps to the same stream regardless of worker
// scheduling.
std::uint64_t derive_seed(std::uint64_t master, std::string_view tag, std::uint64_t index = 0);

}  // namespace raregen::numerics
