#pragma once

#include <array>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "map4ts/log.hpp"
#include "map4ts/patchcluster.hpp"
#include "map4ts/tokenizer.hpp"
#include "map4ts/tsa.hpp"

namespace map4ts::prompt {

// Fixed order in text and in the embedding stack.
enum class Aspect { Global = 0, Local = 1, Statistical = 2, Temporal = 3 };
inline constexpr std::array<Aspect, 4> kAspects = {Aspect::Global, Aspect::Local,
                                                   Aspect::Statistical, Aspect::Temporal};
const char* to_string(Aspect a) noexcept;

enum class Variant { Minimal, Verbose };
const char* to_string(Variant v) noexcept;
Variant parse_variant(const std::string& s);

struct PromptMask {
  std::array<bool, 4> on{};

  static PromptMask all() { return PromptMask{{true, true, true, true}}; }
  static PromptMask none() { return PromptMask{}; }
  // "1010" (G, L, S, T order) or "G+S" style; "none" for the empty mask.
  static PromptMask parse(const std::string& s);
  // All 16 masks, No-Prompt first, then by bit pattern.
  static std::vector<PromptMask> power_set();

  bool operator[](Aspect a) const { return on[static_cast<std::size_t>(a)]; }
  std::size_t count() const;
  std::string bits() const;   // "1010"
  std::string label() const;  // "No Prompt" or "G+S"
  bool operator==(const PromptMask&) const = default;
};

struct DatasetCard {
  std::string name;
  std::string domain;
  std::string target;
  std::string frequency;
  std::string timespan;
  std::string collection_notes;

  void validate() const;  // InvalidCard on any empty field
  std::string hash() const;
};

// Dataset overviews for the eight benchmark sources.
std::optional<DatasetCard> builtin_card(const std::string& name);

std::string format_fixed(double v, int decimals = 4);
std::uint64_t fnv1a(std::string_view data);

struct RemoteConfig {
  std::string url;  // http://host:port/path
  std::string model = "gpt-4o-mini";
  std::string token_env = "MAP4TS_REMOTE_TOKEN";
  std::string cache_path;  // JSON lines {key, text}
  int max_tokens = 200;
  double timeout_s = 30.0;
};

// Text-generation client with an on-disk response cache keyed by request hash.
class RemoteClient {
 public:
  explicit RemoteClient(RemoteConfig cfg);

  // Throws RemoteUnavailable on transport or protocol errors.
  std::string generate(const std::string& prompt);
  std::string request_body(const std::string& prompt) const;
  std::size_t cache_size() const;

 private:
  RemoteConfig cfg_;
  mutable std::mutex mu_;
  std::map<std::string, std::string> cache_;
};

std::string build_global(const DatasetCard& card, RemoteClient* client = nullptr,
                         RunLog* log = nullptr);

struct DescribeOptions {
  double z_threshold = 2.5;
  tsa::TrendOptions trend;
};

// Template description of one cluster from its representative and nearest
// members. Requires the training windows to be present.
std::string describe_cluster(const patch::ScaleClusters& sc, std::size_t cluster,
                             const DescribeOptions& opts = {});
void describe_clusters(patch::ClusterIndex& idx, const DescribeOptions& opts = {});

// Cached descriptions as JSON lines {scale, cluster_id, description}.
void save_prompt_cache(const patch::ClusterIndex& idx, const std::string& path);
void load_prompt_cache(patch::ClusterIndex& idx, const std::string& path);

// `history` ends at the forecast origin; each scale reads its suffix. Scales
// needing more history than available are omitted.
std::string build_local(std::span<const double> history, const patch::ClusterIndex& idx,
                        const std::vector<patch::PatchConfig>& configs);

struct StatOptions {
  std::size_t period = 24;
};

std::string build_statistical(std::span<const double> window, Variant variant,
                              const StatOptions& opts = {});

struct TemporalAnalyses {
  std::vector<double> acf;
  std::vector<double> pacf;
  tsa::SpectralSummary spectrum;
};

// max_lag == 0 selects 2 * period, capped below the window length.
TemporalAnalyses analyze_temporal(std::span<const double> window, std::size_t period,
                                  std::size_t n_peaks = 3, std::size_t max_lag = 0);

std::string build_temporal(Variant variant, const TemporalAnalyses* analyses = nullptr);

struct PromptBundle {
  std::array<std::optional<std::string>, 4> text;
  std::array<std::size_t, 4> token_counts{};
  PromptMask mask;

  std::size_t included() const { return mask.count(); }
};

// Token counts include no EOS; a part fails when count + 1 (its EOS) exceeds
// context_limit.
PromptBundle assemble(const std::array<std::optional<std::string>, 4>& parts, PromptMask mask,
                      const Tokenizer& tok, std::size_t context_limit = 1024);

}  // namespace map4ts::prompt
