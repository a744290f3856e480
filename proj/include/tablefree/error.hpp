#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tablefree {

enum class Errc {
  SingularMatrix,
  DimensionMismatch,
  SamplingFailure,
  TokenOutOfRange,
  NonDivisibleWidth,
  NotFullVocabulary,
  InvalidCodeSpec,
  ShapeMismatch,
  OddHeadDim,
  TargetOutOfRange,
  InvalidConfig,
  NonFiniteLoss,
  EmptyStream,
  EmptyCorpus,
  InsufficientData,
  MissingRuns,
  InvalidArgs,
  IoFailure,
  ParseError,
};

std::string_view to_string(Errc code);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace tablefree
