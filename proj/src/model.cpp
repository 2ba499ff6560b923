#include "map4ts/model.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"
#include "map4ts/binio.hpp"
#include "map4ts/error.hpp"

namespace map4ts::model {

using nlohmann::json;

namespace {

constexpr char kCheckpointMagic[5] = "M4CK";
constexpr std::uint32_t kCheckpointVersion = 1;

Mat normal(std::mt19937_64& rng, std::size_t r, std::size_t c, double std) {
  std::normal_distribution<double> dist(0.0, std);
  Mat m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Mat zeros(std::size_t r, std::size_t c) {
  return Mat::Zero(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

Mat ones(std::size_t r, std::size_t c) {
  return Mat::Ones(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

const char* kAspectKey[4] = {"global", "local", "statistical", "temporal"};

}  // namespace

void BackboneConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidConfig, m); };
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || align_heads == 0) fail("backbone sizes must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_model % align_heads != 0) fail("d_model must be divisible by align_heads");
  if (context_limit < 2) fail("context_limit must be at least 2");
  if (vocab_size == 0) fail("vocab_size must be positive");
  if (lora_rank > d_model) {
    throw Error(ErrorCode::RankTooLarge, "lora_rank " + std::to_string(lora_rank) + " exceeds d_model");
  }
  if (!(lora_alpha > 0.0)) fail("lora_alpha must be positive");
}

const char* to_string(AlignVariant v) noexcept {
  switch (v) {
    case AlignVariant::CrossAttention: return "cross-attention";
    case AlignVariant::ConvMaxJoint: return "conv-max-joint";
    case AlignVariant::ConvMaxPromptCross: return "conv-max-prompt-cross";
    case AlignVariant::ConvMaxJointCross: return "conv-max-joint-cross";
  }
  return "cross-attention";
}

AlignVariant parse_align_variant(const std::string& s) {
  for (AlignVariant v : kAlignVariants) {
    if (s == to_string(v)) return v;
  }
  if (s == "CrossAttention") return AlignVariant::CrossAttention;
  if (s == "ConvMaxJoint") return AlignVariant::ConvMaxJoint;
  if (s == "ConvMaxPromptCross") return AlignVariant::ConvMaxPromptCross;
  if (s == "ConvMaxJointCross") return AlignVariant::ConvMaxJointCross;
  throw Error(ErrorCode::UnknownVariant, "unknown alignment variant '" + s + "'");
}

const char* to_string(EncoderMode m) noexcept {
  switch (m) {
    case EncoderMode::Single: return "single";
    case EncoderMode::DualFrozen: return "dual-frozen";
    case EncoderMode::DualTrainable: return "dual-trainable";
  }
  return "single";
}

EncoderMode parse_encoder_mode(const std::string& s) {
  if (s == "single" || s == "Single") return EncoderMode::Single;
  if (s == "dual-frozen" || s == "DualFrozen") return EncoderMode::DualFrozen;
  if (s == "dual-trainable" || s == "DualTrainable") return EncoderMode::DualTrainable;
  throw Error(ErrorCode::InvalidConfig, "unknown encoder mode '" + s + "'");
}

void ModelConfig::validate() const {
  backbone.validate();
  if (input_len == 0 || horizon == 0) throw Error(ErrorCode::InvalidConfig, "input_len and horizon must be positive");
  if (wte_baseline && (prototype_count == 0 || prototype_count > backbone.vocab_size)) {
    throw Error(ErrorCode::InvalidConfig, "prototype_count must be in [1, vocab_size]");
  }
}

std::string ModelConfig::to_json() const {
  json j = {{"d_model", backbone.d_model},
            {"n_layers", backbone.n_layers},
            {"n_heads", backbone.n_heads},
            {"context_limit", backbone.context_limit},
            {"vocab_size", backbone.vocab_size},
            {"align_heads", backbone.align_heads},
            {"lora_rank", backbone.lora_rank},
            {"lora_alpha", backbone.lora_alpha},
            {"input_len", input_len},
            {"horizon", horizon},
            {"variant", to_string(variant)},
            {"encoder", to_string(encoder)},
            {"wte_baseline", wte_baseline},
            {"prototype_count", prototype_count},
            {"train_backbone", train_backbone},
            {"seed", seed}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  ModelConfig c;
  try {
    const auto j = json::parse(text);
    c.backbone.d_model = j.value("d_model", c.backbone.d_model);
    c.backbone.n_layers = j.value("n_layers", c.backbone.n_layers);
    c.backbone.n_heads = j.value("n_heads", c.backbone.n_heads);
    c.backbone.context_limit = j.value("context_limit", c.backbone.context_limit);
    c.backbone.vocab_size = j.value("vocab_size", c.backbone.vocab_size);
    c.backbone.align_heads = j.value("align_heads", c.backbone.align_heads);
    c.backbone.lora_rank = j.value("lora_rank", c.backbone.lora_rank);
    c.backbone.lora_alpha = j.value("lora_alpha", c.backbone.lora_alpha);
    c.input_len = j.value("input_len", c.input_len);
    c.horizon = j.value("horizon", c.horizon);
    c.variant = parse_align_variant(j.value("variant", std::string(to_string(c.variant))));
    c.encoder = parse_encoder_mode(j.value("encoder", std::string(to_string(c.encoder))));
    c.wte_baseline = j.value("wte_baseline", c.wte_baseline);
    c.prototype_count = j.value("prototype_count", c.prototype_count);
    c.train_backbone = j.value("train_backbone", c.train_backbone);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("model config: ") + e.what());
  }
  return c;
}

Backbone::Backbone(ParameterStore& store, const std::string& prefix, const BackboneConfig& cfg,
                   std::mt19937_64& rng, bool trainable)
    : prefix_(prefix), cfg_(cfg) {
  const std::size_t d = cfg.d_model;
  const double s = 0.02;
  const double s_proj = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  wte_ = store.add(prefix + "wte", normal(rng, cfg.vocab_size, d, s), trainable);
  wpe_ = store.add(prefix + "wpe", normal(rng, cfg.context_limit, d, 0.01), trainable);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = prefix + "h" + std::to_string(l) + ".";
    Block b{};
    b.ln1_g = store.add(p + "ln1.g", ones(1, d), trainable);
    b.ln1_b = store.add(p + "ln1.b", zeros(1, d), trainable);
    b.wq = store.add(p + "attn.wq", normal(rng, d, d, s), trainable);
    b.bq = store.add(p + "attn.bq", zeros(1, d), trainable);
    b.wk = store.add(p + "attn.wk", normal(rng, d, d, s), trainable);
    b.bk = store.add(p + "attn.bk", zeros(1, d), trainable);
    b.wv = store.add(p + "attn.wv", normal(rng, d, d, s), trainable);
    b.bv = store.add(p + "attn.bv", zeros(1, d), trainable);
    b.wo = store.add(p + "attn.wo", normal(rng, d, d, s_proj), trainable);
    b.bo = store.add(p + "attn.bo", zeros(1, d), trainable);
    b.ln2_g = store.add(p + "ln2.g", ones(1, d), trainable);
    b.ln2_b = store.add(p + "ln2.b", zeros(1, d), trainable);
    b.w1 = store.add(p + "mlp.w1", normal(rng, d, 4 * d, s), trainable);
    b.b1 = store.add(p + "mlp.b1", zeros(1, 4 * d), trainable);
    b.w2 = store.add(p + "mlp.w2", normal(rng, 4 * d, d, s_proj), trainable);
    b.b2 = store.add(p + "mlp.b2", zeros(1, d), trainable);
    blocks_.push_back(b);
  }
  lnf_g_ = store.add(prefix + "ln_f.g", ones(1, d), trainable);
  lnf_b_ = store.add(prefix + "ln_f.b", zeros(1, d), trainable);
}

void Backbone::add_lora(ParameterStore& store, std::size_t rank, double alpha, std::mt19937_64& rng,
                        bool trainable) {
  lora_a_ = store.add(prefix_ + "lora_A", zeros(cfg_.vocab_size, rank), trainable);
  lora_b_ = store.add(prefix_ + "lora_B", normal(rng, rank, cfg_.d_model, 0.02), trainable);
  lora_scale_ = alpha / static_cast<double>(rank);
}

Var Backbone::token_embed(Tape& t, const ParameterStore& s, const std::vector<int>& ids) const {
  Var e = ag::gather_rows(t.param(s, wte_), ids);
  if (!has_lora()) return e;
  Var low = ag::matmul(ag::gather_rows(t.param(s, lora_a_), ids), t.param(s, lora_b_));
  return ag::add(e, ag::mul_scalar(low, lora_scale_));
}

Var Backbone::run(Tape& t, const ParameterStore& s, Var x, bool causal,
                  const std::vector<char>& key_mask,
                  std::vector<ag::AttentionRecord>* records) const {
  const Eigen::Index len = x.rows();
  if (len > static_cast<Eigen::Index>(cfg_.context_limit)) {
    throw Error(ErrorCode::PromptTooLong, "sequence of " + std::to_string(len) +
                                              " positions exceeds the context limit");
  }
  auto lin = [&](Var in, std::size_t w, std::size_t b) {
    return ag::add_row(ag::matmul(in, t.param(s, w)), t.param(s, b));
  };
  Var h = ag::add(x, ag::rows(t.param(s, wpe_), 0, len));
  if (records) records->assign(blocks_.size(), {});
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    Var a = ag::layernorm(h, t.param(s, b.ln1_g), t.param(s, b.ln1_b));
    ag::AttentionOptions opts;
    opts.heads = cfg_.n_heads;
    opts.causal = causal;
    opts.key_mask = key_mask;
    opts.record = records ? &(*records)[l] : nullptr;
    Var att = ag::attention(lin(a, b.wq, b.bq), lin(a, b.wk, b.bk), lin(a, b.wv, b.bv), opts);
    h = ag::add(h, lin(att, b.wo, b.bo));
    Var m = ag::layernorm(h, t.param(s, b.ln2_g), t.param(s, b.ln2_b));
    h = ag::add(h, lin(ag::gelu(lin(m, b.w1, b.b1)), b.w2, b.b2));
  }
  return ag::layernorm(h, t.param(s, lnf_g_), t.param(s, lnf_b_));
}

std::size_t Model::add_linear(const std::string& name, std::size_t in, std::size_t out, double std,
                              bool trainable) {
  const std::size_t w = store_.add(name + ".w", normal(rng_, in, out, std), trainable);
  store_.add(name + ".b", zeros(1, out), trainable);
  return w;
}

Model::Model(const ModelConfig& cfg) : cfg_(cfg), rng_(cfg.seed) {
  cfg_.validate();
  const auto& bc = cfg_.backbone;
  const std::size_t d = bc.d_model;
  const bool base_trainable = cfg_.train_backbone;
  backbone_ = Backbone(store_, "backbone.", bc, rng_, base_trainable);
  if (cfg_.encoder != EncoderMode::Single) {
    // The text encoder starts as a copy of the forecasting backbone, as two
    // instances of one pretrained model would.
    std::mt19937_64 scratch(cfg_.seed);
    const bool text_trainable = cfg_.encoder == EncoderMode::DualTrainable && base_trainable;
    text_ = Backbone(store_, "text.", bc, scratch, text_trainable);
    for (std::size_t i = 0; i < store_.size(); ++i) {
      const std::string& n = store_.name(i);
      if (n.rfind("text.", 0) == 0) store_.value(i) = store_.value(store_.index("backbone." + n.substr(5)));
    }
  }
  auto inv = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
  ts_w_ = add_linear("ts_embed", cfg_.input_len, d, inv(cfg_.input_len), true);
  ts_b_ = ts_w_ + 1;
  for (std::size_t a = 0; a < 4; ++a) {
    proj_w_[a] = add_linear(std::string("proj.") + kAspectKey[a], d, d, inv(d), true);
    proj_b_[a] = proj_w_[a] + 1;
  }
  mq_w_ = add_linear("mhca.q", d, d, inv(d), true);
  mq_b_ = mq_w_ + 1;
  mk_w_ = add_linear("mhca.k", d, d, inv(d), true);
  mk_b_ = mk_w_ + 1;
  mv_w_ = add_linear("mhca.v", d, d, inv(d), true);
  mv_b_ = mv_w_ + 1;
  mo_w_ = add_linear("mhca.o", d, d, inv(d), true);
  mo_b_ = mo_w_ + 1;
  fuse_w_ = add_linear("align.fuse", 4 * d, d, inv(4 * d), true);
  fuse_b_ = fuse_w_ + 1;
  for (std::size_t k = 0; k < 3; ++k) {
    conv_w_[k] = store_.add("align.conv.w" + std::to_string(k), normal(rng_, d, d, inv(3 * d)), true);
  }
  conv_b_ = store_.add("align.conv.b", zeros(1, d), true);
  if (cfg_.wte_baseline) {
    wte_r_ = store_.add("wte_reduce.w", normal(rng_, 4, cfg_.prototype_count, inv(cfg_.prototype_count)), true);
    wte_rb_ = store_.add("wte_reduce.b", zeros(4, d), true);
  }
  head_w_ = add_linear("head", d, cfg_.horizon, inv(d), true);
  head_b_ = head_w_ + 1;
}

void Model::apply_lora(std::size_t rank, double alpha) {
  if (rank == 0) throw Error(ErrorCode::InvalidArgument, "LoRA rank must be at least 1");
  if (rank > cfg_.backbone.d_model) {
    throw Error(ErrorCode::RankTooLarge, "LoRA rank " + std::to_string(rank) + " exceeds d_model " +
                                             std::to_string(cfg_.backbone.d_model));
  }
  if (backbone_.has_lora()) throw Error(ErrorCode::InvalidArgument, "LoRA already applied");
  backbone_.add_lora(store_, rank, alpha, rng_, true);
  if (cfg_.encoder != EncoderMode::Single) {
    text_.add_lora(store_, rank, alpha, rng_, cfg_.encoder == EncoderMode::DualTrainable);
    // Same initial factors as the forecasting backbone.
    store_.value(store_.index("text.lora_B")) = store_.value(store_.index("backbone.lora_B"));
  }
  cfg_.backbone.lora_rank = rank;
  cfg_.backbone.lora_alpha = alpha;
}

bool Model::text_encoder_frozen() const {
  const std::string prefix = text_encoder().prefix();
  for (std::size_t i = 0; i < store_.size(); ++i) {
    if (store_.name(i).rfind(prefix, 0) == 0 && store_.trainable(i)) return false;
  }
  return true;
}

std::uint64_t Model::text_encoder_hash() const {
  const std::string prefix = text_encoder().prefix();
  return store_.hash_where([&](const std::string& n) { return n.rfind(prefix, 0) == 0; });
}

Var Model::linear(Tape& t, Var x, std::size_t w, std::size_t b) const {
  return ag::add_row(ag::matmul(x, t.param(store_, w)), t.param(store_, b));
}

Var Model::embed_series(Tape& t, const std::vector<double>& window) const {
  if (window.size() != cfg_.input_len) {
    throw Error(ErrorCode::LengthMismatch, "series window has " + std::to_string(window.size()) +
                                               " points, expected " + std::to_string(cfg_.input_len));
  }
  Mat x = Eigen::Map<const Mat>(window.data(), 1, static_cast<Eigen::Index>(window.size()));
  return linear(t, t.constant(std::move(x)), ts_w_, ts_b_);
}

Var Model::eos_hidden(Tape& t, const std::vector<int>& ids) const {
  if (ids.size() + 1 > cfg_.backbone.context_limit) {
    throw Error(ErrorCode::PromptTooLong, std::to_string(ids.size()) + " tokens plus EOS exceed " +
                                              std::to_string(cfg_.backbone.context_limit));
  }
  std::vector<int> seq = ids;
  seq.push_back(static_cast<int>(cfg_.backbone.vocab_size) - 1);
  const Backbone& enc = text_encoder();
  Var h = enc.run(t, store_, enc.token_embed(t, store_, seq), true);
  return ag::rows(h, h.rows() - 1, 1);
}

Var Model::project_prompt(Tape& t, Aspect a, Var eos) const {
  const auto i = static_cast<std::size_t>(a);
  return linear(t, eos, proj_w_[i], proj_b_[i]);
}

Var Model::encode_prompt(Tape& t, Aspect a, const std::vector<int>& ids) const {
  return project_prompt(t, a, eos_hidden(t, ids));
}

Var Model::mhca(Tape& t, Var q, Var kv, ag::AttentionRecord* record) const {
  const std::size_t d = cfg_.backbone.d_model;
  if (static_cast<std::size_t>(q.cols()) != d || static_cast<std::size_t>(kv.cols()) != d) {
    throw Error(ErrorCode::DimMismatch, "mhca inputs must have width d_model");
  }
  ag::AttentionOptions opts;
  opts.heads = cfg_.backbone.align_heads;
  opts.record = record;
  Var o = ag::attention(linear(t, q, mq_w_, mq_b_), linear(t, kv, mk_w_, mk_b_),
                        linear(t, kv, mv_w_, mv_b_), opts);
  return linear(t, o, mo_w_, mo_b_);
}

Var Model::conv_max(Tape& t, Var stack) const {
  Var y = ag::matmul(ag::shift_rows(stack, 1), t.param(store_, conv_w_[0]));
  y = ag::add(y, ag::matmul(stack, t.param(store_, conv_w_[1])));
  y = ag::add(y, ag::matmul(ag::shift_rows(stack, -1), t.param(store_, conv_w_[2])));
  y = ag::add_row(y, t.param(store_, conv_b_));
  return ag::max_rows(y);
}

Var Model::cross_fuse(Tape& t, const PromptRows& slots, Var ts) const {
  std::vector<Var> present;
  for (const auto& s : slots) {
    if (s) present.push_back(*s);
  }
  Var q = ag::concat_rows(present);
  Var fused = ag::add(q, mhca(t, q, ts));
  const auto d = static_cast<Eigen::Index>(cfg_.backbone.d_model);
  std::vector<Var> rows4;
  Eigen::Index k = 0;
  for (const auto& s : slots) {
    rows4.push_back(s ? ag::rows(fused, k++, 1) : t.constant(Mat::Zero(1, d)));
  }
  return linear(t, ag::reshape(ag::concat_rows(rows4), 1, 4 * d), fuse_w_, fuse_b_);
}

Var Model::align(Tape& t, const PromptRows& prompts, Var ts) const {
  return align(t, prompts, ts, cfg_.variant);
}

Var Model::align(Tape& t, const PromptRows& prompts, Var ts, AlignVariant variant) const {
  std::vector<Var> present;
  for (const auto& p : prompts) {
    if (p) present.push_back(*p);
  }
  if (present.empty()) throw Error(ErrorCode::InvalidArgument, "align needs at least one prompt");
  switch (variant) {
    case AlignVariant::CrossAttention:
      return cross_fuse(t, prompts, ts);
    case AlignVariant::ConvMaxJoint: {
      present.push_back(ts);
      return conv_max(t, ag::concat_rows(present));
    }
    case AlignVariant::ConvMaxPromptCross: {
      Var c = conv_max(t, ag::concat_rows(present));
      return ag::add(c, mhca(t, c, ts));
    }
    case AlignVariant::ConvMaxJointCross: {
      present.push_back(ts);
      Var c = conv_max(t, ag::concat_rows(present));
      return ag::add(c, mhca(t, c, ts));
    }
  }
  throw Error(ErrorCode::UnknownVariant, "unknown alignment variant");
}

Var Model::prototypes(Tape& t) const {
  std::vector<int> ids(cfg_.prototype_count);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
  return backbone_.token_embed(t, store_, ids);
}

Var Model::wte_baseline_align(Tape& t, Var ts, Var prototypes) const {
  if (!cfg_.wte_baseline) throw Error(ErrorCode::InvalidConfig, "model built without the WTE baseline");
  const auto n = static_cast<Eigen::Index>(cfg_.prototype_count);
  if (prototypes.rows() > n || static_cast<std::size_t>(prototypes.cols()) != cfg_.backbone.d_model) {
    throw Error(ErrorCode::DimMismatch, "prototype matrix exceeds the configured prototype count");
  }
  Var p = prototypes;
  if (p.rows() < n) p = ag::concat_rows({p, t.constant(Mat::Zero(n - p.rows(), p.cols()))});
  Var q = ag::add(ag::matmul(t.param(store_, wte_r_), p), t.param(store_, wte_rb_));
  PromptRows slots;
  for (Eigen::Index i = 0; i < 4; ++i) slots[static_cast<std::size_t>(i)] = ag::rows(q, i, 1);
  return cross_fuse(t, slots, ts);
}

Var Model::forecast(Tape& t, Var ts, const std::optional<Var>& aligned) const {
  Var x = aligned ? ag::concat_rows({ts, *aligned}) : ts;
  Var h = backbone_.run(t, store_, x, true);
  return linear(t, ag::rows(h, h.rows() - 1, 1), head_w_, head_b_);
}

Var Model::predict(Tape& t, const std::vector<double>& window, const PromptRows& prompts) const {
  Var ts = embed_series(t, window);
  if (cfg_.wte_baseline) return forecast(t, ts, wte_baseline_align(t, ts, this->prototypes(t)));
  bool any = false;
  for (const auto& p : prompts) any = any || p.has_value();
  if (!any) return forecast(t, ts, std::nullopt);
  return forecast(t, ts, align(t, prompts, ts));
}

void Model::attention_probe(Tape& t, const PromptRows& prompts, Var ts, RunContext& ctx) const {
  if (!ctx.record_attention) throw Error(ErrorCode::RecordingDisabled, "attention recording is off");
  const auto d = static_cast<Eigen::Index>(cfg_.backbone.d_model);
  std::vector<Var> stack;
  std::vector<char> key_mask(5, 0);
  for (std::size_t i = 0; i < 4; ++i) {
    ctx.active[i] = prompts[i].has_value();
    key_mask[i] = prompts[i] ? 0 : 1;
    stack.push_back(prompts[i] ? *prompts[i] : t.constant(Mat::Zero(1, d)));
  }
  ctx.active[4] = 1;
  stack.push_back(ts);
  backbone_.run(t, store_, ag::concat_rows(stack), false, key_mask, &ctx.layers);
}

AttentionExport export_attention(const RunContext& ctx) {
  if (!ctx.record_attention || ctx.layers.empty()) {
    throw Error(ErrorCode::RecordingDisabled, "no attention was recorded for this run");
  }
  AttentionExport ex;
  for (std::size_t i = 0; i < 5; ++i) {
    if (ctx.active[i]) ex.rows.push_back(i);
  }
  for (const auto& layer : ctx.layers) {
    std::vector<Mat> heads;
    Mat mean = Mat::Zero(static_cast<Eigen::Index>(ex.rows.size()), 5);
    for (const auto& p : layer) {
      Mat sel(static_cast<Eigen::Index>(ex.rows.size()), 5);
      for (std::size_t r = 0; r < ex.rows.size(); ++r) {
        sel.row(static_cast<Eigen::Index>(r)) = p.row(static_cast<Eigen::Index>(ex.rows[r]));
      }
      mean += sel;
      heads.push_back(std::move(sel));
    }
    mean /= static_cast<double>(layer.size());
    ex.per_head.push_back(std::move(heads));
    ex.per_layer.push_back(std::move(mean));
  }
  const std::size_t n = ex.per_layer.size();
  const std::size_t g = std::min<std::size_t>(4, n);
  for (std::size_t k = 0; k < g; ++k) {
    const std::size_t first = k * n / g;
    const std::size_t last = (k + 1) * n / g - 1;
    Mat m = Mat::Zero(ex.per_layer[0].rows(), 5);
    for (std::size_t l = first; l <= last; ++l) m += ex.per_layer[l];
    m /= static_cast<double>(last - first + 1);
    ex.groups.emplace_back(first, last);
    ex.grouped.push_back(std::move(m));
  }
  return ex;
}

void Model::save(std::ostream& out) const {
  out.write(kCheckpointMagic, 4);
  binio::write_pod(out, kCheckpointVersion);
  json header = {{"model", json::parse(cfg_.to_json())}, {"lora", backbone_.has_lora()}};
  binio::write_string(out, header.dump());
  binio::write_pod(out, static_cast<std::uint64_t>(store_.size()));
  for (std::size_t i = 0; i < store_.size(); ++i) {
    const Mat& v = store_.value(i);
    binio::write_string(out, store_.name(i));
    binio::write_pod(out, static_cast<std::uint64_t>(v.rows()));
    binio::write_pod(out, static_cast<std::uint64_t>(v.cols()));
    for (Eigen::Index k = 0; k < v.size(); ++k) binio::write_pod(out, static_cast<float>(v.data()[k]));
  }
  if (!out) throw Error(ErrorCode::IoFailure, "checkpoint write failed");
}

void Model::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path);
  save(out);
}

namespace {

struct Header {
  ModelConfig cfg;
  bool lora = false;
};

Header read_header(std::istream& in) {
  binio::expect_magic(in, kCheckpointMagic);
  const auto version = binio::read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::FormatError, "unsupported checkpoint version " + std::to_string(version));
  }
  Header h;
  try {
    const auto j = json::parse(binio::read_string(in));
    h.cfg = ModelConfig::from_json(j.at("model").dump());
    h.lora = j.value("lora", false);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("checkpoint header: ") + e.what());
  }
  return h;
}

}  // namespace

std::size_t Model::import_tensors(std::istream& in) {
  const auto count = binio::read_pod<std::uint64_t>(in);
  std::size_t applied = 0;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = binio::read_string(in);
    const auto r = binio::read_pod<std::uint64_t>(in);
    const auto c = binio::read_pod<std::uint64_t>(in);
    Mat v(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] = binio::read_pod<float>(in);
    if (!store_.contains(name)) continue;
    Mat& dst = store_.value(store_.index(name));
    if (dst.rows() != v.rows() || dst.cols() != v.cols()) continue;
    dst = std::move(v);
    ++applied;
  }
  return applied;
}

Model Model::load(std::istream& in) {
  const Header h = read_header(in);
  Model m(h.cfg);
  if (h.lora) m.apply_lora(h.cfg.backbone.lora_rank, h.cfg.backbone.lora_alpha);
  const std::size_t applied = m.import_tensors(in);
  if (applied != m.store_.size()) {
    throw Error(ErrorCode::FormatError, "checkpoint tensors do not match the model layout");
  }
  return m;
}

Model Model::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path);
  return load(in);
}

}  // namespace map4ts::model
