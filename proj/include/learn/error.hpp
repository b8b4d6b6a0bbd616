#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace learn {

enum class ErrorCode {
  OutOfRange,
  NonFinite,
  DimensionMismatch,
  ShapeMismatch,
  EmptyInput,
  BackendUnavailable,
  BadShape,
  EmptyCrop,
  EmptyDataset,
  NonFiniteLoss,
  MismatchedLengths,
  ZeroVector,
  AllMasked,
  InvalidSteps,
  EmptyCandidates,
  ParseError,
  UnknownNodeInEdge,
  CycleDetected,
  UnknownConcept,
  EmptyReferences,
  TooFewSamples,
  InsufficientSamples,
  DuplicateId,
  MissingImage,
  InvalidBox,
  SpecInvalid,
  AnnotatorUnavailable,
  BadFractions,
  InvalidConfig,
  IoError,
};

std::string_view to_string(ErrorCode code);

/// Domain error carrying a machine-checkable code. Everything the library
/// throws on bad input is one of these; std::bad_alloc and friends pass
/// through untouched.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code), detail_(what) {}

  ErrorCode code() const noexcept { return code_; }
  /// Message without the code prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace learn
