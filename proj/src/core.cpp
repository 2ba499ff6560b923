#include "map4ts/core.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace map4ts::core {

namespace {

std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') {
      quoted = !quoted;
    } else if (c == delim && !quoted) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::optional<double> parse_number(const std::string& text) {
  std::string t = trim(text);
  if (t.empty()) return std::nullopt;
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size()) return std::nullopt;
  return v;
}

// Days since 1970-01-01 for a proleptic Gregorian date.
long long days_from_civil(long long y, unsigned m, unsigned d) {
  y -= m <= 2;
  const long long era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<long long>(doe) - 719468;
}

std::size_t column_index(const std::vector<std::string>& header, const std::string& name,
                         const std::string& path) {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (trim(header[i]) == name) return i;
  }
  throw Error(ErrorCode::MissingColumn, "column '" + name + "' not found in " + path);
}

}  // namespace

const char* to_string(Frequency f) noexcept {
  switch (f) {
    case Frequency::Hourly: return "Hourly";
    case Frequency::Daily: return "Daily";
    case Frequency::Weekly: return "Weekly";
    case Frequency::Monthly: return "Monthly";
  }
  return "Hourly";
}

Frequency parse_frequency(const std::string& name) {
  std::string n;
  for (char c : name) n.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (n == "hourly" || n == "h") return Frequency::Hourly;
  if (n == "daily" || n == "d") return Frequency::Daily;
  if (n == "weekly" || n == "w") return Frequency::Weekly;
  if (n == "monthly" || n == "m") return Frequency::Monthly;
  throw Error(ErrorCode::InvalidArgument, "unknown frequency '" + name + "'");
}

double nominal_seconds(Frequency f) noexcept {
  switch (f) {
    case Frequency::Hourly: return 3600.0;
    case Frequency::Daily: return 86400.0;
    case Frequency::Weekly: return 7.0 * 86400.0;
    case Frequency::Monthly: return 30.436875 * 86400.0;
  }
  return 3600.0;
}

std::optional<double> parse_timestamp(const std::string& raw, bool* is_calendar) {
  const std::string text = trim(raw);
  if (is_calendar) *is_calendar = false;
  if (auto v = parse_number(text)) return v;

  // YYYY-MM-DD or YYYY/MM/DD, optionally followed by HH:MM[:SS].
  int y = 0, mo = 0, d = 0, hh = 0, mm = 0, ss = 0;
  char s1 = 0, s2 = 0;
  std::istringstream in(text);
  if (!(in >> y >> s1 >> mo >> s2 >> d)) return std::nullopt;
  if (!((s1 == '-' && s2 == '-') || (s1 == '/' && s2 == '/'))) return std::nullopt;
  if (mo < 1 || mo > 12 || d < 1 || d > 31) return std::nullopt;
  std::string rest;
  std::getline(in, rest);
  rest = trim(rest);
  if (!rest.empty()) {
    if (rest.front() == 'T') rest.erase(rest.begin());
    char c1 = 0, c2 = 0;
    std::istringstream t(rest);
    if (!(t >> hh >> c1 >> mm) || c1 != ':') return std::nullopt;
    if (t >> c2) {
      if (c2 != ':' || !(t >> ss)) return std::nullopt;
    }
    std::string tail;
    t >> tail;
    if (!tail.empty()) return std::nullopt;
    if (hh < 0 || hh > 23 || mm < 0 || mm > 59 || ss < 0 || ss > 60) return std::nullopt;
  }
  if (is_calendar) *is_calendar = true;
  const long long days = days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d));
  return static_cast<double>(days) * 86400.0 + hh * 3600.0 + mm * 60.0 + ss;
}

void validate(const TimeSeries& ts) {
  if (ts.values.empty()) throw Error(ErrorCode::EmptySeries, "series '" + ts.name + "' is empty");
  if (ts.values.size() != ts.timestamps.size()) {
    throw Error(ErrorCode::LengthMismatch, "values and timestamps differ in length");
  }
  for (std::size_t i = 1; i < ts.timestamps.size(); ++i) {
    if (!(ts.timestamps[i] > ts.timestamps[i - 1])) {
      throw Error(ErrorCode::NonMonotonicTimestamps,
                  "timestamps not strictly increasing at row " + std::to_string(i));
    }
  }
  if (ts.timestamps.size() >= 2) {
    std::vector<double> deltas(ts.timestamps.size() - 1);
    for (std::size_t i = 1; i < ts.timestamps.size(); ++i) {
      deltas[i - 1] = ts.timestamps[i] - ts.timestamps[i - 1];
    }
    auto mid = deltas.begin() + static_cast<std::ptrdiff_t>(deltas.size() / 2);
    std::nth_element(deltas.begin(), mid, deltas.end());
    const double nominal = nominal_seconds(ts.frequency);
    if (std::abs(*mid - nominal) > 0.1 * nominal) {
      throw Error(ErrorCode::FrequencyMismatch,
                  std::string("median timestamp spacing inconsistent with ") +
                      to_string(ts.frequency));
    }
  }
}

TimeSeries from_values(std::vector<double> values, Frequency f, std::string name) {
  TimeSeries ts;
  ts.timestamps.resize(values.size());
  const double step = nominal_seconds(f);
  for (std::size_t i = 0; i < values.size(); ++i) ts.timestamps[i] = static_cast<double>(i) * step;
  ts.values = std::move(values);
  ts.frequency = f;
  ts.name = std::move(name);
  return ts;
}

std::vector<TimeSeries> load_csv_channels(const std::string& path,
                                          const std::vector<std::string>& value_columns,
                                          const std::string& timestamp_column,
                                          const CsvOptions& opts) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::EmptySeries, path + " has no header row");
  const auto header = split_line(line, opts.delimiter);

  std::vector<std::size_t> value_idx;
  for (const auto& c : value_columns) value_idx.push_back(column_index(header, c, path));
  std::optional<std::size_t> ts_idx;
  if (!timestamp_column.empty()) ts_idx = column_index(header, timestamp_column, path);

  std::vector<std::vector<double>> values(value_columns.size());
  std::vector<double> stamps;
  bool any_calendar = false;
  bool any_numeric = false;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto fields = split_line(line, opts.delimiter);
    for (std::size_t c = 0; c < value_idx.size(); ++c) {
      if (value_idx[c] >= fields.size()) {
        throw Error(ErrorCode::UnparseableValue, "row " + std::to_string(row) + " is short");
      }
      auto v = parse_number(fields[value_idx[c]]);
      if (!v || !std::isfinite(*v)) {
        throw Error(ErrorCode::UnparseableValue, "row " + std::to_string(row) + " column '" +
                                                     value_columns[c] + "': '" +
                                                     fields[value_idx[c]] + "'");
      }
      values[c].push_back(*v);
    }
    if (ts_idx) {
      if (*ts_idx >= fields.size()) {
        throw Error(ErrorCode::UnparseableValue, "row " + std::to_string(row) + " is short");
      }
      bool calendar = false;
      auto t = parse_timestamp(fields[*ts_idx], &calendar);
      if (!t) {
        throw Error(ErrorCode::UnparseableValue,
                    "row " + std::to_string(row) + " timestamp '" + fields[*ts_idx] + "'");
      }
      (calendar ? any_calendar : any_numeric) = true;
      stamps.push_back(*t);
    } else {
      stamps.push_back(static_cast<double>(stamps.size()));
    }
  }
  if (stamps.empty()) throw Error(ErrorCode::EmptySeries, path + " has no data rows");
  if (any_calendar && any_numeric) {
    throw Error(ErrorCode::UnparseableValue, "mixed calendar and numeric timestamps in " + path);
  }

  Frequency freq = opts.frequency.value_or(Frequency::Hourly);
  if (any_calendar) {
    if (!opts.frequency && stamps.size() >= 2) {
      std::vector<double> deltas;
      for (std::size_t i = 1; i < stamps.size(); ++i) deltas.push_back(stamps[i] - stamps[i - 1]);
      std::nth_element(deltas.begin(), deltas.begin() + deltas.size() / 2, deltas.end());
      const double med = deltas[deltas.size() / 2];
      freq = Frequency::Hourly;
      double best = 1e300;
      for (Frequency f : {Frequency::Hourly, Frequency::Daily, Frequency::Weekly,
                          Frequency::Monthly}) {
        const double rel = std::abs(med - nominal_seconds(f)) / nominal_seconds(f);
        if (rel < best) {
          best = rel;
          freq = f;
        }
      }
    }
  } else {
    // Numeric timestamps are step indices in units of the nominal frequency.
    for (double& s : stamps) s *= nominal_seconds(freq);
  }

  std::vector<TimeSeries> out;
  for (std::size_t c = 0; c < value_columns.size(); ++c) {
    TimeSeries ts;
    ts.values = std::move(values[c]);
    ts.timestamps = stamps;
    ts.frequency = freq;
    ts.name = value_columns[c];
    validate(ts);
    out.push_back(std::move(ts));
  }
  return out;
}

TimeSeries load_csv(const std::string& path, const std::string& value_column,
                    const std::string& timestamp_column, const CsvOptions& opts) {
  auto channels = load_csv_channels(path, {value_column}, timestamp_column, opts);
  return std::move(channels.front());
}

SplitBounds split_bounds(std::size_t n, const SplitSpec& spec) {
  if (!(spec.train_frac > 0 && spec.val_frac > 0 && spec.test_frac > 0) ||
      std::abs(spec.train_frac + spec.val_frac + spec.test_frac - 1.0) > 1e-9) {
    throw Error(ErrorCode::InvalidArgument, "split fractions must be positive and sum to 1");
  }
  SplitBounds b;
  b.n = n;
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * spec.train_frac));
  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * spec.test_frac));
  b.train_end = n_train;
  b.val_end = n - n_test;
  return b;
}

Splits chrono_split(std::size_t n, const SplitSpec& spec, const ForecastTask& task) {
  const std::size_t T = task.input_len;
  const std::size_t H = task.horizon;
  if (T < 1 || H < 1) throw Error(ErrorCode::InvalidArgument, "input_len and horizon must be >= 1");
  if (n < T + H) {
    throw Error(ErrorCode::SeriesTooShort, "series length " + std::to_string(n) +
                                               " < input_len + horizon = " +
                                               std::to_string(T + H));
  }
  Splits s;
  s.bounds = split_bounds(n, spec);
  // Windows whose target lies in [lo, hi); inputs may reach back T points.
  auto collect = [&](std::size_t target_lo, std::size_t hi) {
    WindowSet w;
    const std::size_t first = target_lo >= T ? target_lo - T : 0;
    for (std::size_t start = first; start + T + H <= hi; ++start) w.starts.push_back(start);
    return w;
  };
  s.train = collect(0, s.bounds.train_end);
  s.val = collect(s.bounds.train_end, s.bounds.val_end);
  s.test = collect(s.bounds.val_end, n);
  return s;
}

Splits chrono_split(const TimeSeries& ts, const SplitSpec& spec, const ForecastTask& task) {
  return chrono_split(ts.size(), spec, task);
}

Normalized instance_normalize(std::span<const double> window, double epsilon) {
  if (window.empty()) throw Error(ErrorCode::EmptyInput, "cannot normalize an empty window");
  const double n = static_cast<double>(window.size());
  const double mean = std::accumulate(window.begin(), window.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : window) ss += (v - mean) * (v - mean);
  Normalized out;
  out.state = NormState{mean, std::sqrt(ss / n), epsilon};
  out.values = normalize_with(window, out.state);
  return out;
}

std::vector<double> normalize_with(std::span<const double> seq, const NormState& state) {
  std::vector<double> out(seq.size());
  const double d = state.divisor();
  for (std::size_t i = 0; i < seq.size(); ++i) out[i] = (seq[i] - state.mean) / d;
  return out;
}

std::vector<double> denormalize(std::span<const double> seq, const NormState& state) {
  std::vector<double> out(seq.size());
  const double d = state.divisor();
  for (std::size_t i = 0; i < seq.size(); ++i) out[i] = seq[i] * d + state.mean;
  return out;
}

}  // namespace map4ts::core
