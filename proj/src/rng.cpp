#include "raregen/rng.hpp"

#include <cmath>
#include <numbers>

namespace raregen::numerics {

double RngStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller on (0,1] uniforms; 1-u keeps the log argument away from zero.
  const double u1 = 1.0 - u01();
  const double u2 = u01();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::uint64_t RngStream::below(std::uint64_t n) {
  const std::uint64_t limit = n * ((~std::uint64_t{0}) / n);
  while (true) {
    const std::uint64_t r = engine_();
    if (r < limit) return r % n;
  }
}

Tensor RngStream::normal_tensor(std::vector<std::size_t> shape) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = normal();
  return t;
}

Tensor RngStream::uniform_tensor(std::vector<std::size_t> shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = lo + (hi - lo) * u01();
  return t;
}

std::vector<std::size_t> RngStream::permutation(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(below(i));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view tag, std::uint64_t index) {
  // FNV-1a over the tag, then two splitmix64 rounds to decorrelate.
  std::uint64_t h = 1469598103934665603ull;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  std::uint64_t x = master ^ h ^ (0x9e3779b97f4a7c15ull * (index + 1));
  for (int round = 0; round < 2; ++round) {
    x += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    x = z ^ (z >> 31);
  }
  return x;
}

}  // namespace raregen::numerics
