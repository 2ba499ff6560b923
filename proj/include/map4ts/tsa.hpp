#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "map4ts/core.hpp"

// Classical analysis primitives: descriptive statistics, autocorrelation,
// spectra, additive decomposition, trend/anomaly labelling, Levene's test.
namespace map4ts::tsa {

struct SummaryStats {
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
  double std = 0.0;  // population convention
};

SummaryStats summary_stats(std::span<const double> seq);

// Biased estimator: lag-k autocovariance divided by N, normalized by lag 0.
std::vector<double> acf(std::span<const double> seq, std::size_t max_lag);

// Durbin-Levinson on the biased acf. Element i holds lag i+1.
std::vector<double> pacf(std::span<const double> seq, std::size_t max_lag);

// Same recursion on a precomputed autocorrelation sequence (r[0] == 1).
std::vector<double> durbin_levinson(std::span<const double> r, std::size_t max_lag);

// In-place radix-2 transform; size must be a power of two.
void fft(std::vector<std::complex<double>>& data, bool inverse = false);
std::size_t next_pow2(std::size_t n) noexcept;

struct SpectralPeak {
  double frequency = 0.0;  // cycles per sample, in (0, 0.5]
  double power = 0.0;
  std::size_t bin = 0;
};

struct SpectralSummary {
  std::vector<SpectralPeak> dominant_frequencies;  // power descending
  std::size_t n_reported = 0;
  std::size_t fft_size = 0;
};

SpectralSummary periodogram_top(std::span<const double> seq, std::size_t n_peaks);

struct Decomposition {
  std::vector<double> trend;
  std::vector<double> seasonal;
  std::vector<double> residual;
  std::size_t period = 1;
};

// Centered moving-average trend (2xp for even p), periodic-mean seasonality.
Decomposition decompose(std::span<const double> seq, std::size_t period);

enum class Trend { Upward, Downward, Stable };
const char* to_string(Trend t) noexcept;

struct TrendOptions {
  double stable_fraction = 0.1;
  double epsilon = 1e-5;
};

// Least-squares slope against the sample index.
double ols_slope(std::span<const double> seq);
// Stable iff |slope * (n-1)| <= stable_fraction * (std + epsilon).
Trend classify_trend(double slope_span, double std, const TrendOptions& opts = {});
Trend trend_label(std::span<const double> seq, const TrendOptions& opts = {});

struct Anomaly {
  std::size_t index = 0;
  double value = 0.0;
  double z = 0.0;
};

// |z| > threshold, sorted by |z| descending (ties: lower index first).
std::vector<Anomaly> anomaly_points(std::span<const double> seq, double z_threshold = 2.5);

struct LeveneResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

// Mean-centered Levene W with an F(k-1, N-k) p-value.
LeveneResult levene_test(const std::vector<std::vector<double>>& groups);

// Seasonal period used for decomposition and lag ranges.
std::size_t default_period(core::Frequency f) noexcept;

}  // namespace map4ts::tsa
