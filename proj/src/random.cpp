#include "tablefree/random.hpp"

#include <cmath>
#include <numbers>

#include "tablefree/error.hpp"

namespace tablefree {

std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::SingularMatrix: return "SingularMatrix";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::SamplingFailure: return "SamplingFailure";
    case Errc::TokenOutOfRange: return "TokenOutOfRange";
    case Errc::NonDivisibleWidth: return "NonDivisibleWidth";
    case Errc::NotFullVocabulary: return "NotFullVocabulary";
    case Errc::InvalidCodeSpec: return "InvalidCodeSpec";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::OddHeadDim: return "OddHeadDim";
    case Errc::TargetOutOfRange: return "TargetOutOfRange";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::EmptyStream: return "EmptyStream";
    case Errc::EmptyCorpus: return "EmptyCorpus";
    case Errc::InsufficientData: return "InsufficientData";
    case Errc::MissingRuns: return "MissingRuns";
    case Errc::InvalidArgs: return "InvalidArgs";
    case Errc::IoFailure: return "IoFailure";
    case Errc::ParseError: return "ParseError";
  }
  return "Unknown";
}

Rng::Rng(std::uint64_t seed) : engine_(mix64(seed)) {}

double Rng::uniform() {
  return static_cast<double>(next() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n <= 1) return 0;
  // Largest multiple of n representable in 64 bits; draws at or above it are rejected.
  const std::uint64_t limit = -n % n;  // (2^64 - n) mod n == 2^64 mod n
  for (;;) {
    const std::uint64_t x = next();
    if (x >= limit) return x % n;
  }
}

double Rng::normal() {
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::truncated_normal(double stddev, double bound_sigmas) {
  for (;;) {
    const double z = normal();
    if (std::abs(z) <= bound_sigmas) return z * stddev;
  }
}

}  // namespace tablefree
