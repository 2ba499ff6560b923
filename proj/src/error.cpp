#include "map4ts/error.hpp"

namespace map4ts {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::MissingColumn: return "MissingColumn";
    case ErrorCode::UnparseableValue: return "UnparseableValue";
    case ErrorCode::NonMonotonicTimestamps: return "NonMonotonicTimestamps";
    case ErrorCode::FrequencyMismatch: return "FrequencyMismatch";
    case ErrorCode::EmptySeries: return "EmptySeries";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::SeriesTooShort: return "SeriesTooShort";
    case ErrorCode::ConstantSeries: return "ConstantSeries";
    case ErrorCode::LagTooLarge: return "LagTooLarge";
    case ErrorCode::TooShort: return "TooShort";
    case ErrorCode::PeriodTooLarge: return "PeriodTooLarge";
    case ErrorCode::DegenerateGroups: return "DegenerateGroups";
    case ErrorCode::TooFewWindows: return "TooFewWindows";
    case ErrorCode::UnknownScale: return "UnknownScale";
    case ErrorCode::UnknownDataset: return "UnknownDataset";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::UnknownVariant: return "UnknownVariant";
    case ErrorCode::RankTooLarge: return "RankTooLarge";
    case ErrorCode::PromptTooLong: return "PromptTooLong";
    case ErrorCode::MissingAnalyses: return "MissingAnalyses";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::InvalidCard: return "InvalidCard";
    case ErrorCode::IndexMissing: return "IndexMissing";
    case ErrorCode::TokenizerUnavailable: return "TokenizerUnavailable";
    case ErrorCode::RemoteUnavailable: return "RemoteUnavailable";
    case ErrorCode::RecordingDisabled: return "RecordingDisabled";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::FormatError: return "FormatError";
  }
  return "Unknown";
}

bool is_validation(ErrorCode code) noexcept {
  return static_cast<int>(code) < static_cast<int>(ErrorCode::IndexMissing);
}

}  // namespace map4ts
