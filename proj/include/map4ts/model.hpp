#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "map4ts/autograd.hpp"
#include "map4ts/promptgen.hpp"

namespace map4ts::model {

using ag::Mat;
using ag::ParameterStore;
using ag::Tape;
using ag::Var;
using prompt::Aspect;

struct BackboneConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t context_limit = 1024;
  std::size_t vocab_size = 257;
  std::size_t align_heads = 4;
  std::size_t lora_rank = 8;
  double lora_alpha = 16.0;

  void validate() const;  // InvalidConfig
};

enum class AlignVariant { CrossAttention, ConvMaxJoint, ConvMaxPromptCross, ConvMaxJointCross };
const char* to_string(AlignVariant v) noexcept;
AlignVariant parse_align_variant(const std::string& s);  // UnknownVariant
inline constexpr std::array<AlignVariant, 4> kAlignVariants = {
    AlignVariant::CrossAttention, AlignVariant::ConvMaxJoint, AlignVariant::ConvMaxPromptCross,
    AlignVariant::ConvMaxJointCross};

enum class EncoderMode { Single, DualFrozen, DualTrainable };
const char* to_string(EncoderMode m) noexcept;
EncoderMode parse_encoder_mode(const std::string& s);

struct ModelConfig {
  BackboneConfig backbone;
  std::size_t input_len = 96;
  std::size_t horizon = 48;
  AlignVariant variant = AlignVariant::CrossAttention;
  EncoderMode encoder = EncoderMode::Single;
  bool wte_baseline = false;
  std::size_t prototype_count = 64;
  // When set the base transformer weights are trained too.
  bool train_backbone = false;
  std::uint64_t seed = 1;

  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

// A transformer stack whose weights live in a shared ParameterStore under a
// name prefix. Holds parameter indices only.
class Backbone {
 public:
  Backbone() = default;
  Backbone(ParameterStore& store, const std::string& prefix, const BackboneConfig& cfg,
           std::mt19937_64& rng, bool trainable);

  void add_lora(ParameterStore& store, std::size_t rank, double alpha, std::mt19937_64& rng,
                bool trainable);
  bool has_lora() const noexcept { return lora_a_ != kNone; }
  const std::string& prefix() const noexcept { return prefix_; }

  // Token embeddings, including the low-rank update when present.
  Var token_embed(Tape& t, const ParameterStore& s, const std::vector<int>& ids) const;
  // Adds positions, runs every block and the final norm. `records` receives
  // one entry per layer when non-null.
  Var run(Tape& t, const ParameterStore& s, Var x, bool causal,
          const std::vector<char>& key_mask = {},
          std::vector<ag::AttentionRecord>* records = nullptr) const;

  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

 private:
  struct Block {
    std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  std::string prefix_;
  BackboneConfig cfg_;
  std::size_t wte_ = kNone, wpe_ = kNone, lnf_g_ = kNone, lnf_b_ = kNone;
  std::size_t lora_a_ = kNone, lora_b_ = kNone;
  double lora_scale_ = 0.0;
  std::vector<Block> blocks_;
};

// Prompt rows ordered Global, Local, Statistical, Temporal; empty = masked.
using PromptRows = std::array<std::optional<Var>, 4>;

// Attention recorded over the labelled stack [Global, Local, Statistical,
// Temporal, TS] by the forecasting backbone.
struct RunContext {
  bool record_attention = false;
  std::array<char, 5> active{};
  std::vector<ag::AttentionRecord> layers;  // [layer][head] 5x5
};

struct AttentionExport {
  std::array<std::string, 5> labels{"Global", "Local", "Statistical", "Temporal", "TS"};
  std::vector<std::size_t> rows;             // stack positions of exported rows
  std::vector<std::vector<Mat>> per_head;    // [layer][head] rows x 5
  std::vector<Mat> per_layer;                // head mean per layer
  std::vector<std::pair<std::size_t, std::size_t>> groups;  // [first, last] layers
  std::vector<Mat> grouped;                  // mean over each group's layers
};

AttentionExport export_attention(const RunContext& ctx);  // RecordingDisabled

class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  // Adds low-rank factors to the token embeddings; A starts at zero.
  void apply_lora(std::size_t rank, double alpha);

  const ModelConfig& config() const noexcept { return cfg_; }
  ParameterStore& params() noexcept { return store_; }
  const ParameterStore& params() const noexcept { return store_; }
  const Backbone& backbone() const noexcept { return backbone_; }
  const Backbone& text_encoder() const noexcept { return cfg_.encoder == EncoderMode::Single ? backbone_ : text_; }
  bool shares_text_encoder() const noexcept { return cfg_.encoder == EncoderMode::Single; }
  // True when encode results depend on no trainable parameter.
  bool text_encoder_frozen() const;
  std::uint64_t text_encoder_hash() const;

  Var embed_series(Tape& t, const std::vector<double>& window) const;  // LengthMismatch
  // Final hidden state at an appended EOS token (before projection).
  Var eos_hidden(Tape& t, const std::vector<int>& ids) const;  // PromptTooLong
  Var project_prompt(Tape& t, Aspect a, Var eos) const;
  Var encode_prompt(Tape& t, Aspect a, const std::vector<int>& ids) const;

  Var mhca(Tape& t, Var q, Var kv, ag::AttentionRecord* record = nullptr) const;
  Var align(Tape& t, const PromptRows& prompts, Var ts) const;
  Var align(Tape& t, const PromptRows& prompts, Var ts, AlignVariant variant) const;
  // Queries from a learned affine reduction of the prototype rows.
  Var wte_baseline_align(Tape& t, Var ts, Var prototypes) const;
  Var prototypes(Tape& t) const;  // first prototype_count token embeddings
  // `aligned` empty: the No-Prompt path with the series position only.
  Var forecast(Tape& t, Var ts, const std::optional<Var>& aligned) const;

  // Full forward for one window: series embedding, alignment (or bypass), head.
  Var predict(Tape& t, const std::vector<double>& window, const PromptRows& prompts) const;

  void attention_probe(Tape& t, const PromptRows& prompts, Var ts, RunContext& ctx) const;

  void save(std::ostream& out) const;
  void save(const std::string& path) const;
  static Model load(std::istream& in);
  static Model load(const std::string& path);
  // Overwrites same-named tensors of matching shape; returns how many.
  std::size_t import_tensors(std::istream& in);

 private:
  Var linear(Tape& t, Var x, std::size_t w, std::size_t b) const;
  Var conv_max(Tape& t, Var stack) const;
  Var cross_fuse(Tape& t, const PromptRows& slots, Var ts) const;
  std::size_t add_linear(const std::string& name, std::size_t in, std::size_t out, double std,
                         bool trainable);

  ModelConfig cfg_;
  ParameterStore store_;
  std::mt19937_64 rng_;
  Backbone backbone_;
  Backbone text_;
  std::size_t ts_w_ = 0, ts_b_ = 0;
  std::array<std::size_t, 4> proj_w_{}, proj_b_{};
  std::size_t mq_w_ = 0, mq_b_ = 0, mk_w_ = 0, mk_b_ = 0, mv_w_ = 0, mv_b_ = 0, mo_w_ = 0, mo_b_ = 0;
  std::size_t fuse_w_ = 0, fuse_b_ = 0;
  std::array<std::size_t, 3> conv_w_{};
  std::size_t conv_b_ = 0;
  std::size_t wte_r_ = 0, wte_rb_ = 0;
  std::size_t head_w_ = 0, head_b_ = 0;
};

}  // namespace map4ts::model
