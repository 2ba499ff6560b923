#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "map4ts/error.hpp"

namespace map4ts::core {

enum class Frequency { Hourly, Daily, Weekly, Monthly };

const char* to_string(Frequency f) noexcept;
Frequency parse_frequency(const std::string& name);
// Nominal spacing in seconds.
double nominal_seconds(Frequency f) noexcept;

// Univariate series. Timestamps are seconds since the epoch for calendar
// inputs, or step indices scaled by the nominal frequency for numeric inputs.
struct TimeSeries {
  std::vector<double> values;
  std::vector<double> timestamps;
  Frequency frequency = Frequency::Hourly;
  std::string name;

  std::size_t size() const noexcept { return values.size(); }
};

// Throws on any violated invariant (lengths, monotonicity, frequency).
void validate(const TimeSeries& ts);

// Builds a series from raw values with index timestamps.
TimeSeries from_values(std::vector<double> values, Frequency f = Frequency::Hourly,
                       std::string name = "series");

struct ForecastTask {
  std::size_t input_len = 96;
  std::size_t horizon = 48;
};

struct SplitSpec {
  double train_frac = 0.7;
  double val_frac = 0.1;
  double test_frac = 0.2;
};

struct NormState {
  double mean = 0.0;
  double std = 0.0;
  double epsilon = 1e-5;

  double divisor() const noexcept { return std > epsilon ? std : epsilon; }
};

struct CsvOptions {
  char delimiter = ',';
  // When unset, calendar timestamps determine the frequency; numeric
  // timestamps default to Hourly steps.
  std::optional<Frequency> frequency;
};

// timestamp_column may be empty, in which case row indices are used.
TimeSeries load_csv(const std::string& path, const std::string& value_column,
                    const std::string& timestamp_column, const CsvOptions& opts = {});

// One independent series per requested column (channel-independent loading).
std::vector<TimeSeries> load_csv_channels(const std::string& path,
                                          const std::vector<std::string>& value_columns,
                                          const std::string& timestamp_column,
                                          const CsvOptions& opts = {});

// Parses "YYYY-MM-DD[ HH:MM[:SS]]", "YYYY/MM/DD..." or a plain number.
// Returns seconds since the epoch (calendar) or the number itself.
std::optional<double> parse_timestamp(const std::string& text, bool* is_calendar = nullptr);

// Point-count region boundaries: [0, train_end), [train_end, val_end), [val_end, n).
struct SplitBounds {
  std::size_t train_end = 0;
  std::size_t val_end = 0;
  std::size_t n = 0;
};

SplitBounds split_bounds(std::size_t n, const SplitSpec& spec);

// A window is identified by its input start; input = [s, s+T), target = [s+T, s+T+H).
struct WindowSet {
  std::vector<std::size_t> starts;
  std::size_t size() const noexcept { return starts.size(); }
};

struct Splits {
  SplitBounds bounds;
  WindowSet train;
  WindowSet val;
  WindowSet test;
};

Splits chrono_split(const TimeSeries& ts, const SplitSpec& spec, const ForecastTask& task);
Splits chrono_split(std::size_t n, const SplitSpec& spec, const ForecastTask& task);

struct Normalized {
  std::vector<double> values;
  NormState state;
};

Normalized instance_normalize(std::span<const double> window, double epsilon = 1e-5);
std::vector<double> normalize_with(std::span<const double> seq, const NormState& state);
std::vector<double> denormalize(std::span<const double> seq, const NormState& state);

}  // namespace map4ts::core
