#include "map4ts/promptgen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "httplib.h"
#include "json.hpp"

namespace map4ts::prompt {

using nlohmann::json;

const char* to_string(Aspect a) noexcept {
  switch (a) {
    case Aspect::Global: return "Global";
    case Aspect::Local: return "Local";
    case Aspect::Statistical: return "Statistical";
    case Aspect::Temporal: return "Temporal";
  }
  return "Global";
}

const char* to_string(Variant v) noexcept {
  return v == Variant::Minimal ? "minimal" : "verbose";
}

Variant parse_variant(const std::string& s) {
  if (s == "minimal" || s == "Minimal") return Variant::Minimal;
  if (s == "verbose" || s == "Verbose") return Variant::Verbose;
  throw Error(ErrorCode::InvalidConfig, "unknown prompt variant '" + s + "'");
}

PromptMask PromptMask::parse(const std::string& s) {
  PromptMask m;
  if (s.empty() || s == "none" || s == "No Prompt") return m;
  if (s.size() == 4 && s.find_first_not_of("01") == std::string::npos) {
    for (std::size_t i = 0; i < 4; ++i) m.on[i] = s[i] == '1';
    return m;
  }
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, '+')) {
    if (item == "G" || item == "Global") m.on[0] = true;
    else if (item == "L" || item == "Local") m.on[1] = true;
    else if (item == "S" || item == "Statistical") m.on[2] = true;
    else if (item == "T" || item == "Temporal") m.on[3] = true;
    else throw Error(ErrorCode::InvalidConfig, "bad prompt mask '" + s + "'");
  }
  return m;
}

std::vector<PromptMask> PromptMask::power_set() {
  std::vector<PromptMask> out;
  for (unsigned bits = 0; bits < 16; ++bits) {
    PromptMask m;
    for (std::size_t i = 0; i < 4; ++i) m.on[i] = (bits >> (3 - i)) & 1u;
    out.push_back(m);
  }
  return out;
}

std::size_t PromptMask::count() const {
  return static_cast<std::size_t>(std::count(on.begin(), on.end(), true));
}

std::string PromptMask::bits() const {
  std::string s;
  for (bool b : on) s.push_back(b ? '1' : '0');
  return s;
}

std::string PromptMask::label() const {
  if (count() == 0) return "No Prompt";
  static const char* kShort[] = {"G", "L", "S", "T"};
  std::string s;
  for (std::size_t i = 0; i < 4; ++i) {
    if (!on[i]) continue;
    if (!s.empty()) s += "+";
    s += kShort[i];
  }
  return s;
}

void DatasetCard::validate() const {
  const std::pair<const char*, const std::string*> fields[] = {
      {"name", &name},         {"domain", &domain},     {"target", &target},
      {"frequency", &frequency}, {"timespan", &timespan}, {"collection_notes", &collection_notes}};
  for (const auto& [label, value] : fields) {
    if (value->empty()) throw Error(ErrorCode::InvalidCard, std::string("card field '") + label + "' is empty");
  }
}

std::uint64_t fnv1a(std::string_view data) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string render_list(std::span<const double> values) {
  std::string s = "[";
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) s += ", ";
    s += format_fixed(values[i]);
  }
  return s + "]";
}

}  // namespace

std::string DatasetCard::hash() const {
  json j = {{"name", name},         {"domain", domain},     {"target", target},
            {"frequency", frequency}, {"timespan", timespan}, {"notes", collection_notes}};
  return hex64(fnv1a(j.dump()));
}

std::optional<DatasetCard> builtin_card(const std::string& name) {
  static const DatasetCard kCards[] = {
      {"ETTh1", "Temperature", "Oil Temperature", "Hourly", "2016/07 -- 2018/06",
       "Readings come from electricity transformer stations in one Chinese region; the oil "
       "temperature reflects transformer load and ambient conditions."},
      {"ETTh2", "Temperature", "Oil Temperature", "Hourly", "2016/07 -- 2018/06",
       "Readings come from electricity transformer stations in a second Chinese region; the oil "
       "temperature reflects transformer load and ambient conditions."},
      {"Electricity", "Electricity", "Electricity Consumption", "Hourly", "2012/01 -- 2014/12",
       "Hourly consumption in kWh recorded for 321 customers of a power utility."},
      {"Traffic", "Transportation", "Road Occupancy Rate", "Hourly", "2015/01/01 -- 2016/12/31",
       "Occupancy rates between 0 and 1 measured by 862 freeway sensors in the San Francisco Bay "
       "Area."},
      {"Environment", "Air quality", "Air quality index", "Daily", "1980/01 -- 2023/09",
       "Daily air quality index values aggregated across monitoring stations in the United "
       "States."},
      {"Climate", "Drought", "D0 (Abnormally Dry Area Percentage)", "Weekly",
       "2000/01/04 -- 2024/05/14",
       "Weekly drought monitor shares of land area in the abnormally dry category, reported by "
       "NOAA."},
      {"Health", "Influenza", "Influenza Patients proportion", "Weekly", "1997/09/29 -- 2024/05/06",
       "Weekly proportion of outpatient visits for influenza-like illness reported to the CDC."},
      {"Agriculture", "Retail Price", "Retailer Broiler Composite", "Monthly", "1980/01 -- 2024/04",
       "Monthly composite retail price of broiler chicken published by the USDA."},
  };
  for (const auto& c : kCards) {
    if (c.name == name) return c;
  }
  return std::nullopt;
}

std::string format_fixed(double v, int decimals) {
  if (!std::isfinite(v)) return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
  const double half_ulp = 0.5 * std::pow(10.0, -decimals);
  if (std::abs(v) < half_ulp) v = 0.0;
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, decimals);
  if (ec != std::errc()) return "nan";
  return std::string(buf, ptr);
}

RemoteClient::RemoteClient(RemoteConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.cache_path.empty()) return;
  std::ifstream in(cfg_.cache_path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      cache_[j.at("key").get<std::string>()] = j.at("text").get<std::string>();
    } catch (const std::exception&) {
      // A truncated trailing line is ignored.
    }
  }
}

std::string RemoteClient::request_body(const std::string& prompt) const {
  return json{{"model", cfg_.model}, {"prompt", prompt}, {"max_tokens", cfg_.max_tokens}}.dump();
}

std::size_t RemoteClient::cache_size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return cache_.size();
}

std::string RemoteClient::generate(const std::string& prompt) {
  const std::string body = request_body(prompt);
  const std::string key = hex64(fnv1a(body));
  std::lock_guard<std::mutex> lock(mu_);
  if (auto it = cache_.find(key); it != cache_.end()) return it->second;

  const auto scheme_end = cfg_.url.find("://");
  if (cfg_.url.empty() || scheme_end == std::string::npos) {
    throw Error(ErrorCode::RemoteUnavailable, "no remote endpoint configured");
  }
  const auto path_start = cfg_.url.find('/', scheme_end + 3);
  const std::string host = cfg_.url.substr(0, path_start);
  const std::string path = path_start == std::string::npos ? "/" : cfg_.url.substr(path_start);

  httplib::Client client(host);
  const auto secs = static_cast<time_t>(cfg_.timeout_s);
  client.set_connection_timeout(secs, 0);
  client.set_read_timeout(secs, 0);
  httplib::Headers headers;
  if (const char* token = std::getenv(cfg_.token_env.c_str()); token && *token) {
    headers.emplace("Authorization", std::string("Bearer ") + token);
  }
  auto res = client.Post(path, headers, body, "application/json");
  if (!res) throw Error(ErrorCode::RemoteUnavailable, "request to " + cfg_.url + " failed");
  if (res->status != 200) {
    throw Error(ErrorCode::RemoteUnavailable, "remote returned HTTP " + std::to_string(res->status));
  }
  std::string text;
  try {
    const auto j = json::parse(res->body);
    if (j.contains("text")) {
      text = j.at("text").get<std::string>();
    } else if (j.contains("choices") && !j.at("choices").empty()) {
      const auto& c = j.at("choices").at(0);
      text = c.contains("text") ? c.at("text").get<std::string>()
                                : c.at("message").at("content").get<std::string>();
    } else {
      throw std::runtime_error("no text field");
    }
  } catch (const std::exception& e) {
    throw Error(ErrorCode::RemoteUnavailable, std::string("malformed response: ") + e.what());
  }
  cache_[key] = text;
  if (!cfg_.cache_path.empty()) {
    std::ofstream out(cfg_.cache_path, std::ios::app);
    out << json{{"key", key}, {"text", text}}.dump() << "\n";
  }
  return text;
}

std::string build_global(const DatasetCard& card, RemoteClient* client, RunLog* log) {
  card.validate();
  std::string text = "Dataset " + card.name + " comes from the " + card.domain +
                     " domain. The forecasting target is " + card.target +
                     ". Sampling frequency: " + card.frequency + ". Timespan: " + card.timespan +
                     ". " + card.collection_notes;
  if (!client) return text;
  try {
    const std::string continuation = client->generate(
        "Expand this short dataset description into roughly five sentences with more "
        "domain-specific detail about the data and its characteristics:\n" + text);
    return text + " " + continuation;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::RemoteUnavailable) throw;
    if (log) log->note(std::string("global prompt for ") + card.name + ": " + e.what() +
                       "; using template text");
    return text;
  }
}

namespace {

struct WindowTraits {
  tsa::Trend trend = tsa::Trend::Stable;
  std::vector<tsa::Anomaly> anomalies;
  double patch_swing = 0.0;
};

WindowTraits window_traits(std::span<const double> w, std::size_t patch_size,
                           const DescribeOptions& opts) {
  WindowTraits t;
  if (w.size() >= 2) t.trend = tsa::trend_label(w, opts.trend);
  const auto [lo, hi] = std::minmax_element(w.begin(), w.end());
  if (w.size() >= 3 && *lo != *hi) t.anomalies = tsa::anomaly_points(w, opts.z_threshold);
  const std::size_t p = std::max<std::size_t>(1, patch_size);
  std::size_t patches = 0;
  for (std::size_t s = 0; s + p <= w.size(); s += p) {
    const auto [a, b] = std::minmax_element(w.begin() + static_cast<std::ptrdiff_t>(s),
                                            w.begin() + static_cast<std::ptrdiff_t>(s + p));
    t.patch_swing += *b - *a;
    ++patches;
  }
  if (p == 1 || patches == 0) {
    t.patch_swing = *hi - *lo;
  } else {
    t.patch_swing /= static_cast<double>(patches);
  }
  return t;
}

}  // namespace

std::string describe_cluster(const patch::ScaleClusters& sc, std::size_t cluster,
                             const DescribeOptions& opts) {
  if (sc.windows.empty() || cluster >= sc.k) {
    throw Error(ErrorCode::IndexMissing, "cluster members unavailable for description");
  }
  const auto& rep = sc.windows.at(sc.representative.at(cluster));
  const auto traits = window_traits(rep, sc.config.patch_size, opts);
  std::string s = "Pattern " + std::to_string(cluster + 1) + "/" + std::to_string(sc.k) + ": " +
                  tsa::to_string(traits.trend) + " trend";
  if (traits.anomalies.empty()) {
    s += ", no unusual values";
  } else {
    const auto& a = traits.anomalies.front();
    s += std::string(", unusually ") + (a.z > 0 ? "high" : "low") + " value at step " +
         std::to_string(a.index + 1) + " (z " + format_fixed(a.z, 2) + ")";
    if (traits.anomalies.size() > 1) s += " plus " + std::to_string(traits.anomalies.size() - 1) + " more";
  }
  s += ", swing " + format_fixed(traits.patch_swing, 2) + " sd.";

  const auto& near = sc.nearest.at(cluster);
  std::size_t up = 0, down = 0, flat = 0, with_anomaly = 0;
  for (std::size_t m : near) {
    const auto t = window_traits(sc.windows.at(m), sc.config.patch_size, opts);
    (t.trend == tsa::Trend::Upward ? up : t.trend == tsa::Trend::Downward ? down : flat)++;
    if (!t.anomalies.empty()) ++with_anomaly;
  }
  s += " Closest " + std::to_string(near.size()) + ": " + std::to_string(up) + " up, " +
       std::to_string(down) + " down, " + std::to_string(flat) + " stable, " +
       std::to_string(with_anomaly) + " with outliers.";
  return s;
}

void describe_clusters(patch::ClusterIndex& idx, const DescribeOptions& opts) {
  for (auto& sc : idx.scales) {
    sc.descriptions.resize(sc.k);
    for (std::size_t j = 0; j < sc.k; ++j) sc.descriptions[j] = describe_cluster(sc, j, opts);
  }
}

void save_prompt_cache(const patch::ClusterIndex& idx, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path);
  for (const auto& sc : idx.scales) {
    for (std::size_t j = 0; j < sc.descriptions.size(); ++j) {
      out << json{{"scale", sc.config.scale_name}, {"cluster_id", j}, {"description", sc.descriptions[j]}}.dump()
          << "\n";
    }
  }
}

void load_prompt_cache(patch::ClusterIndex& idx, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    const auto scale = j.at("scale").get<std::string>();
    const auto id = j.at("cluster_id").get<std::size_t>();
    for (auto& sc : idx.scales) {
      if (sc.config.scale_name != scale) continue;
      if (sc.descriptions.size() <= id) sc.descriptions.resize(id + 1);
      sc.descriptions[id] = j.at("description").get<std::string>();
    }
  }
}

std::string build_local(std::span<const double> history, const patch::ClusterIndex& idx,
                        const std::vector<patch::PatchConfig>& configs) {
  std::string s = "Local patterns by timescale.";
  for (const auto& cfg : configs) {
    if (!idx.has_scale(cfg.scale_name)) {
      throw Error(ErrorCode::IndexMissing, "cluster index lacks scale '" + cfg.scale_name + "'");
    }
    if (history.size() < cfg.data_points) continue;
    const auto& sc = idx.scale(cfg.scale_name);
    const auto suffix = history.subspan(history.size() - cfg.data_points);
    const std::size_t id = patch::nearest_cluster(suffix, sc);
    if (id >= sc.descriptions.size() || sc.descriptions[id].empty()) {
      throw Error(ErrorCode::IndexMissing, "no description for " + cfg.scale_name + " cluster " +
                                               std::to_string(id));
    }
    s += "\n[" + cfg.scale_name + ", " + std::to_string(cfg.window_size) + "x" +
         std::to_string(cfg.patch_size) + "] " + sc.descriptions[id];
  }
  return s;
}

std::string build_statistical(std::span<const double> window, Variant variant,
                              const StatOptions& opts) {
  if (window.empty()) throw Error(ErrorCode::EmptyInput, "statistical prompt on empty window");
  const auto st = tsa::summary_stats(window);
  std::string s = "Input statistics: min: " + format_fixed(st.min) + ", max: " + format_fixed(st.max) +
                  ", mean: " + format_fixed(st.mean) + ", std: " + format_fixed(st.std) +
                  ". The trend is the slow drift of the level over the whole span; seasonality is "
                  "a shape that comes back again after a fixed number of steps.";
  if (variant == Variant::Minimal) return s;
  const std::size_t period = std::min(opts.period, window.size() / 2);
  if (period < 2) return s + " Decomposition unavailable for this window length.";
  const auto d = tsa::decompose(window, period);
  s += " Additive decomposition with period " + std::to_string(period) + ". Trend values: " +
       render_list(d.trend) + ". Seasonal values: " + render_list(d.seasonal) + ".";
  return s;
}

TemporalAnalyses analyze_temporal(std::span<const double> window, std::size_t period,
                                  std::size_t n_peaks, std::size_t max_lag) {
  TemporalAnalyses a;
  if (max_lag == 0) max_lag = 2 * std::max<std::size_t>(1, period);
  max_lag = std::min(max_lag, window.size() - 1);
  try {
    a.acf = tsa::acf(window, max_lag);
    a.pacf = max_lag >= 1 ? tsa::pacf(window, max_lag) : std::vector<double>{};
  } catch (const Error& e) {
    // A flat window has no autocorrelation; leave both lists empty.
    if (e.code() != ErrorCode::ConstantSeries) throw;
  }
  a.spectrum = tsa::periodogram_top(window, n_peaks);
  return a;
}

std::string build_temporal(Variant variant, const TemporalAnalyses* analyses) {
  std::string s =
      "Temporal structure. The autocorrelation function (ACF) relates each value to the value k "
      "steps earlier and also carries influence passed along through the steps in between. The "
      "partial autocorrelation function (PACF) keeps only the direct link between values k steps "
      "apart once the shorter lags are accounted for. A Fourier transform splits the series into "
      "sinusoids, and the strongest of them give its dominant frequencies and cycle lengths.";
  if (variant == Variant::Minimal) return s;
  if (!analyses) throw Error(ErrorCode::MissingAnalyses, "verbose temporal prompt needs analyses");
  if (analyses->acf.empty()) {
    s += " The window is flat, so ACF and PACF are undefined.";
  } else {
    s += " ACF by lag: " + render_list(analyses->acf) + ". PACF by lag: " + render_list(analyses->pacf) + ".";
  }
  if (analyses->spectrum.dominant_frequencies.empty()) {
    s += " No dominant frequency stands out.";
  } else {
    s += " Spectral peaks:";
    bool first = true;
    for (const auto& p : analyses->spectrum.dominant_frequencies) {
      s += std::string(first ? " dominant frequency " : "; then ") + format_fixed(p.frequency) +
           " cycles per step (period " + format_fixed(1.0 / p.frequency, 2) + " steps, power " +
           format_fixed(p.power, 2) + ")";
      first = false;
    }
    s += ".";
  }
  return s;
}

PromptBundle assemble(const std::array<std::optional<std::string>, 4>& parts, PromptMask mask,
                      const Tokenizer& tok, std::size_t context_limit) {
  PromptBundle b;
  b.mask = mask;
  for (std::size_t i = 0; i < 4; ++i) {
    if (!mask.on[i]) continue;
    if (!parts[i] || parts[i]->empty()) {
      throw Error(ErrorCode::InvalidArgument,
                  std::string(to_string(kAspects[i])) + " prompt is masked in but missing");
    }
    const std::size_t n = count_tokens(*parts[i], tok);
    if (n + 1 > context_limit) {
      throw Error(ErrorCode::PromptTooLong, std::string(to_string(kAspects[i])) + " prompt has " +
                                                std::to_string(n) + " tokens (limit " +
                                                std::to_string(context_limit) + " incl. EOS)");
    }
    b.text[i] = parts[i];
    b.token_counts[i] = n;
  }
  return b;
}

}  // namespace map4ts::prompt
