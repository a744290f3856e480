#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>

namespace tablefree {

// Deterministic generator shared by every module.
//
// The engine is std::mt19937_64, whose output sequence is fixed by the C++
// standard. The standard *distributions* are implementation-defined, so all
// derived draws (uniform doubles, bounded integers, normals, shuffles) are
// computed here from raw 64-bit outputs:
//
//   uniform()  = (next() >> 11) * 2^-53                      in [0, 1)
//   below(n)   = rejection on next() against 2^64 - (2^64 mod n)
//   normal()   = Box-Muller cosine branch, u1 in (0, 1], u2 in [0, 1)
//   shuffle    = Fisher-Yates from the back, j = below(i + 1)
//
// Seeds are passed through mix64 first so small consecutive seeds give
// unrelated streams.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next() { return engine_(); }
  double uniform();
  std::uint64_t below(std::uint64_t n);
  double normal();
  // Normal(0, stddev^2) conditioned on |x| <= bound_sigmas * stddev.
  double truncated_normal(double stddev, double bound_sigmas);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// SplitMix64 finalizer: a bijective 64-bit mixer.
//   z = (x + 0x9e3779b97f4a7c15)
//   z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9
//   z = (z ^ (z >> 27)) * 0x94d049bb133111eb
//   return z ^ (z >> 31)
constexpr std::uint64_t mix64(std::uint64_t x) {
  std::uint64_t z = x + 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ mix64(b));
}

}  // namespace tablefree
