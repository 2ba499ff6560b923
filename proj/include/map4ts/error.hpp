#pragma once

#include <stdexcept>
#include <string>

namespace map4ts {

enum class ErrorCode {
  // validation
  InvalidArgument,
  InvalidConfig,
  MissingColumn,
  UnparseableValue,
  NonMonotonicTimestamps,
  FrequencyMismatch,
  EmptySeries,
  EmptyInput,
  SeriesTooShort,
  ConstantSeries,
  LagTooLarge,
  TooShort,
  PeriodTooLarge,
  DegenerateGroups,
  TooFewWindows,
  UnknownScale,
  UnknownDataset,
  LengthMismatch,
  DimMismatch,
  UnknownVariant,
  RankTooLarge,
  PromptTooLong,
  MissingAnalyses,
  ShapeMismatch,
  InvalidCard,
  // runtime
  IndexMissing,
  TokenizerUnavailable,
  RemoteUnavailable,
  RecordingDisabled,
  NonFiniteLoss,
  IoFailure,
  FormatError,
};

const char* to_string(ErrorCode code) noexcept;

// Validation errors map to CLI exit code 1, everything else to 2.
bool is_validation(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace map4ts
