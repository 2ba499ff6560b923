#include "map4ts/tsa.hpp"

#include <algorithm>
#include <boost/math/distributions/fisher_f.hpp>
#include <cmath>
#include <numbers>
#include <numeric>

namespace map4ts::tsa {

namespace {

double mean_of(std::span<const double> seq) {
  return std::accumulate(seq.begin(), seq.end(), 0.0) / static_cast<double>(seq.size());
}

bool is_constant(std::span<const double> seq) {
  const auto [lo, hi] = std::minmax_element(seq.begin(), seq.end());
  return *lo == *hi;
}

void check_lag_input(std::span<const double> seq, std::size_t max_lag) {
  if (seq.empty()) throw Error(ErrorCode::EmptyInput, "empty sequence");
  if (max_lag >= seq.size()) {
    throw Error(ErrorCode::LagTooLarge, "max_lag " + std::to_string(max_lag) +
                                            " must be below length " +
                                            std::to_string(seq.size()));
  }
  if (is_constant(seq)) throw Error(ErrorCode::ConstantSeries, "autocorrelation undefined");
}

}  // namespace

SummaryStats summary_stats(std::span<const double> seq) {
  if (seq.empty()) throw Error(ErrorCode::EmptyInput, "summary_stats on empty sequence");
  SummaryStats s;
  const auto [lo, hi] = std::minmax_element(seq.begin(), seq.end());
  s.min = *lo;
  s.max = *hi;
  if (s.min == s.max) {
    s.mean = s.min;
    s.std = 0.0;
    return s;
  }
  // Welford keeps the mean inside [min, max] and the variance non-negative.
  double mean = 0.0;
  double m2 = 0.0;
  std::size_t n = 0;
  for (double v : seq) {
    ++n;
    const double d = v - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (v - mean);
  }
  s.mean = std::clamp(mean, s.min, s.max);
  s.std = std::sqrt(std::max(0.0, m2 / static_cast<double>(n)));
  return s;
}

std::vector<double> acf(std::span<const double> seq, std::size_t max_lag) {
  check_lag_input(seq, max_lag);
  const std::size_t n = seq.size();
  const double mean = mean_of(seq);
  std::vector<double> centered(n);
  for (std::size_t i = 0; i < n; ++i) centered[i] = seq[i] - mean;
  double c0 = 0.0;
  for (double v : centered) c0 += v * v;
  std::vector<double> r(max_lag + 1);
  r[0] = 1.0;
  for (std::size_t k = 1; k <= max_lag; ++k) {
    double ck = 0.0;
    for (std::size_t t = 0; t + k < n; ++t) ck += centered[t] * centered[t + k];
    r[k] = std::clamp(ck / c0, -1.0, 1.0);
  }
  return r;
}

std::vector<double> durbin_levinson(std::span<const double> r, std::size_t max_lag) {
  if (max_lag < 1) throw Error(ErrorCode::LagTooLarge, "pacf needs max_lag >= 1");
  if (r.size() <= max_lag) throw Error(ErrorCode::LagTooLarge, "autocorrelation too short");
  std::vector<double> out(max_lag);
  std::vector<double> phi(max_lag + 1, 0.0);
  std::vector<double> prev(max_lag + 1, 0.0);
  phi[1] = r[1];
  out[0] = r[1];
  double err = 1.0 - r[1] * r[1];
  for (std::size_t k = 2; k <= max_lag; ++k) {
    prev = phi;
    double num = r[k];
    for (std::size_t j = 1; j < k; ++j) num -= prev[j] * r[k - j];
    const double kk = err > 0.0 ? num / err : 0.0;
    phi[k] = kk;
    for (std::size_t j = 1; j < k; ++j) phi[j] = prev[j] - kk * prev[k - j];
    err *= (1.0 - kk * kk);
    out[k - 1] = kk;
  }
  return out;
}

std::vector<double> pacf(std::span<const double> seq, std::size_t max_lag) {
  if (max_lag < 1) throw Error(ErrorCode::LagTooLarge, "pacf needs max_lag >= 1");
  const auto r = acf(seq, max_lag);
  return durbin_levinson(r, max_lag);
}

std::size_t next_pow2(std::size_t n) noexcept {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

void fft(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) {
    throw Error(ErrorCode::InvalidArgument, "fft size must be a power of two");
  }
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < len / 2; ++k) {
        // Direct twiddles avoid accumulated rounding from repeated products.
        const std::complex<double> w(std::cos(ang * static_cast<double>(k)),
                                     std::sin(ang * static_cast<double>(k)));
        const auto u = a[i + k];
        const auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
      }
    }
  }
  if (inverse) {
    for (auto& x : a) x /= static_cast<double>(n);
  }
}

SpectralSummary periodogram_top(std::span<const double> seq, std::size_t n_peaks) {
  if (seq.size() < 4) throw Error(ErrorCode::TooShort, "periodogram needs at least 4 points");
  if (n_peaks < 1) throw Error(ErrorCode::InvalidArgument, "n_peaks must be >= 1");
  const std::size_t m = next_pow2(seq.size());
  const double mean = mean_of(seq);
  std::vector<std::complex<double>> buf(m, {0.0, 0.0});
  double peak_abs = 0.0;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    buf[i] = {seq[i] - mean, 0.0};
    peak_abs = std::max(peak_abs, std::abs(seq[i]));
  }
  fft(buf);
  // Bins at or below this floor are rounding noise from the mean removal.
  const double n = static_cast<double>(seq.size());
  const double floor = 1e-20 * n * n * std::max(peak_abs * peak_abs, 1e-300);
  std::vector<SpectralPeak> bins;
  for (std::size_t k = 1; k <= m / 2; ++k) {
    const double p = std::norm(buf[k]);
    if (p > floor) bins.push_back({static_cast<double>(k) / static_cast<double>(m), p, k});
  }
  std::stable_sort(bins.begin(), bins.end(),
                   [](const SpectralPeak& a, const SpectralPeak& b) { return a.power > b.power; });
  if (bins.size() > n_peaks) bins.resize(n_peaks);
  SpectralSummary s;
  s.fft_size = m;
  s.n_reported = bins.size();
  s.dominant_frequencies = std::move(bins);
  return s;
}

Decomposition decompose(std::span<const double> seq, std::size_t period) {
  if (period < 1) throw Error(ErrorCode::InvalidArgument, "period must be positive");
  const std::size_t n = seq.size();
  if (n < 2 * period) {
    throw Error(ErrorCode::PeriodTooLarge, "decompose needs length >= 2 * period (" +
                                               std::to_string(2 * period) + "), got " +
                                               std::to_string(n));
  }
  Decomposition d;
  d.period = period;
  d.trend.assign(n, 0.0);
  const std::size_t half = period / 2;
  const bool even = period % 2 == 0;
  for (std::size_t i = half; i + half < n; ++i) {
    double acc = 0.0;
    if (even) {
      acc += 0.5 * seq[i - half] + 0.5 * seq[i + half];
      for (std::size_t j = i - half + 1; j < i + half; ++j) acc += seq[j];
    } else {
      for (std::size_t j = i - half; j <= i + half; ++j) acc += seq[j];
    }
    d.trend[i] = acc / static_cast<double>(period);
  }
  const std::size_t lo = half;
  const std::size_t hi = n - half - 1;  // inclusive
  for (std::size_t i = 0; i < lo; ++i) d.trend[i] = d.trend[lo];
  for (std::size_t i = hi + 1; i < n; ++i) d.trend[i] = d.trend[hi];

  std::vector<double> phase_sum(period, 0.0);
  std::vector<std::size_t> phase_count(period, 0);
  for (std::size_t i = lo; i <= hi; ++i) {
    phase_sum[i % period] += seq[i] - d.trend[i];
    ++phase_count[i % period];
  }
  std::vector<double> profile(period, 0.0);
  for (std::size_t p = 0; p < period; ++p) {
    profile[p] = phase_count[p] ? phase_sum[p] / static_cast<double>(phase_count[p]) : 0.0;
  }
  const double centre = std::accumulate(profile.begin(), profile.end(), 0.0) /
                        static_cast<double>(period);
  for (double& v : profile) v -= centre;

  d.seasonal.resize(n);
  d.residual.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    d.seasonal[i] = profile[i % period];
    d.residual[i] = seq[i] - d.trend[i] - d.seasonal[i];
  }
  return d;
}

const char* to_string(Trend t) noexcept {
  switch (t) {
    case Trend::Upward: return "upward";
    case Trend::Downward: return "downward";
    case Trend::Stable: return "stable";
  }
  return "stable";
}

double ols_slope(std::span<const double> seq) {
  const std::size_t n = seq.size();
  if (n < 2) throw Error(ErrorCode::TooShort, "slope needs at least 2 points");
  const double xbar = static_cast<double>(n - 1) / 2.0;
  const double ybar = mean_of(seq);
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = static_cast<double>(i) - xbar;
    sxy += dx * (seq[i] - ybar);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

Trend classify_trend(double slope_span, double std, const TrendOptions& opts) {
  if (std::abs(slope_span) <= opts.stable_fraction * (std + opts.epsilon)) return Trend::Stable;
  return slope_span > 0 ? Trend::Upward : Trend::Downward;
}

Trend trend_label(std::span<const double> seq, const TrendOptions& opts) {
  const double slope = ols_slope(seq);
  const auto stats = summary_stats(seq);
  return classify_trend(slope * static_cast<double>(seq.size() - 1), stats.std, opts);
}

std::vector<Anomaly> anomaly_points(std::span<const double> seq, double z_threshold) {
  if (seq.size() < 3) throw Error(ErrorCode::TooShort, "anomaly detection needs >= 3 points");
  if (is_constant(seq)) throw Error(ErrorCode::ConstantSeries, "z-scores undefined");
  const auto stats = summary_stats(seq);
  std::vector<Anomaly> out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const double z = (seq[i] - stats.mean) / stats.std;
    if (std::abs(z) > z_threshold) out.push_back({i, seq[i], z});
  }
  std::stable_sort(out.begin(), out.end(), [](const Anomaly& a, const Anomaly& b) {
    return std::abs(a.z) > std::abs(b.z);
  });
  return out;
}

LeveneResult levene_test(const std::vector<std::vector<double>>& groups) {
  if (groups.size() < 2) throw Error(ErrorCode::DegenerateGroups, "need at least 2 groups");
  std::vector<std::vector<double>> dev(groups.size());
  std::size_t total = 0;
  double grand = 0.0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].size() < 2) {
      throw Error(ErrorCode::DegenerateGroups, "group " + std::to_string(g) + " has < 2 values");
    }
    const double m = mean_of(groups[g]);
    for (double v : groups[g]) {
      dev[g].push_back(std::abs(v - m));
      grand += dev[g].back();
    }
    total += groups[g].size();
  }
  const std::size_t k = groups.size();
  if (total <= k) throw Error(ErrorCode::DegenerateGroups, "no within-group degrees of freedom");
  grand /= static_cast<double>(total);
  double between = 0.0;
  double within = 0.0;
  for (const auto& d : dev) {
    const double m = mean_of(d);
    between += static_cast<double>(d.size()) * (m - grand) * (m - grand);
    for (double v : d) within += (v - m) * (v - m);
  }
  LeveneResult r;
  if (within == 0.0) {
    if (between == 0.0) return r;  // every group has identical spread
    throw Error(ErrorCode::DegenerateGroups, "zero within-group dispersion");
  }
  const double df1 = static_cast<double>(k - 1);
  const double df2 = static_cast<double>(total - k);
  r.statistic = (df2 / df1) * between / within;
  if (r.statistic <= 0.0) {
    r.statistic = 0.0;
    r.p_value = 1.0;
    return r;
  }
  boost::math::fisher_f dist(df1, df2);
  r.p_value = boost::math::cdf(boost::math::complement(dist, r.statistic));
  return r;
}

std::size_t default_period(core::Frequency f) noexcept {
  switch (f) {
    case core::Frequency::Hourly: return 24;
    case core::Frequency::Daily: return 7;
    case core::Frequency::Weekly: return 52;
    case core::Frequency::Monthly: return 12;
  }
  return 24;
}

}  // namespace map4ts::tsa
