#include "map4ts/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "map4ts/error.hpp"
#include "map4ts/tsa.hpp"

#ifndef MAP4TS_DATA_DIR
#define MAP4TS_DATA_DIR "data"
#endif

namespace map4ts::exp {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string resolve(const std::string& p, const std::string& base) {
  if (p.empty() || fs::path(p).is_absolute()) return p;
  return (fs::path(base) / p).lexically_normal().string();
}

core::ForecastTask parse_task(const json& j, core::ForecastTask t) {
  t.input_len = j.value("input_len", t.input_len);
  t.horizon = j.value("horizon", t.horizon);
  return t;
}

json task_json(const core::ForecastTask& t) { return {{"input_len", t.input_len}, {"horizon", t.horizon}}; }

std::vector<prompt::PromptMask> parse_masks(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "all16" || s == "power_set") return prompt::PromptMask::power_set();
    return {prompt::PromptMask::parse(s)};
  }
  std::vector<prompt::PromptMask> out;
  for (const auto& m : j) out.push_back(prompt::PromptMask::parse(m.get<std::string>()));
  return out;
}

template <class T>
void set_if(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

}  // namespace

void ExperimentConfig::validate() const {
  if (datasets.empty()) throw Error(ErrorCode::InvalidConfig, "no datasets configured");
  std::vector<std::string> names;
  for (const auto& d : datasets) {
    if (d.name.empty()) throw Error(ErrorCode::InvalidConfig, "dataset without a name");
    if (std::find(names.begin(), names.end(), d.name) != names.end()) {
      throw Error(ErrorCode::InvalidConfig, "dataset '" + d.name + "' listed twice");
    }
    names.push_back(d.name);
    if (!d.synthetic && d.csv_path.empty()) {
      throw Error(ErrorCode::InvalidConfig, "dataset '" + d.name + "' has neither csv nor synthetic source");
    }
    if (d.group != "LT" && d.group != "ST") throw Error(ErrorCode::InvalidConfig, "group must be LT or ST");
  }
  if (task.input_len == 0 || task.horizon == 0) throw Error(ErrorCode::InvalidConfig, "task sizes must be positive");
  if (masks.empty() || variants.empty() || encoders.empty()) {
    throw Error(ErrorCode::InvalidConfig, "masks, variants and encoders must be non-empty");
  }
  if (n_runs < 1) throw Error(ErrorCode::InvalidConfig, "n_runs must be at least 1");
  if (train_stride < 1 || eval_stride < 1) throw Error(ErrorCode::InvalidConfig, "strides must be at least 1");
  if (parallelism < 1) throw Error(ErrorCode::InvalidConfig, "parallelism must be at least 1");
  train.validate();
  model::ModelConfig mc = model;
  mc.input_len = task.input_len;
  mc.horizon = task.horizon;
  mc.validate();
}

std::string ExperimentConfig::to_json() const {
  json ds = json::array();
  for (const auto& d : datasets) {
    json j = {{"name", d.name}, {"group", d.group}};
    if (d.synthetic) {
      const auto& s = *d.synthetic;
      j["synthetic"] = {{"kind", s.kind},       {"length", s.length}, {"channels", s.channels},
                        {"phi", s.phi},         {"noise", s.noise},   {"period", s.period},
                        {"amplitude", s.amplitude}, {"level", s.level}, {"slope", s.slope},
                        {"seed", s.seed}};
    } else {
      j["csv"] = d.csv_path;
      j["columns"] = d.columns;
      j["timestamp"] = d.timestamp_column;
    }
    if (d.frequency) j["frequency"] = core::to_string(*d.frequency);
    if (!d.patch_table.empty()) j["patch_table"] = d.patch_table;
    if (d.task) j["task"] = task_json(*d.task);
    if (d.card) {
      j["card"] = {{"name", d.card->name},         {"domain", d.card->domain},
                   {"target", d.card->target},     {"frequency", d.card->frequency},
                   {"timespan", d.card->timespan}, {"collection_notes", d.card->collection_notes}};
    }
    ds.push_back(std::move(j));
  }
  json masks_j = json::array();
  for (const auto& m : masks) masks_j.push_back(m.bits());
  json variants_j = json::array();
  for (auto v : variants) variants_j.push_back(model::to_string(v));
  json enc_j = json::array();
  for (auto e : encoders) enc_j.push_back(model::to_string(e));
  json prompts_j = {{"variant", prompt::to_string(prompts.variant)},
                    {"clusters", prompts.clusters},
                    {"cluster_seed", prompts.cluster_seed},
                    {"z_threshold", prompts.describe.z_threshold},
                    {"tokenizer",
                     {{"kind", prompts.tokenizer.kind},
                      {"vocab", prompts.tokenizer.vocab_path},
                      {"merges", prompts.tokenizer.merges_path},
                      {"allow_fallback", prompts.tokenizer.allow_fallback}}}};
  if (prompts.remote) {
    prompts_j["remote"] = {{"url", prompts.remote->url},
                           {"model", prompts.remote->model},
                           {"token_env", prompts.remote->token_env},
                           {"cache", prompts.remote->cache_path},
                           {"max_tokens", prompts.remote->max_tokens},
                           {"timeout_s", prompts.remote->timeout_s}};
  }
  json j = {{"seed", seed},
            {"n_runs", n_runs},
            {"parallelism", parallelism},
            {"output_dir", output_dir},
            {"denormalized_metrics", denormalized_metrics},
            {"task", task_json(task)},
            {"split", {{"train", split.train_frac}, {"val", split.val_frac}, {"test", split.test_frac}}},
            {"train",
             {{"lr", train.lr},
              {"batch_size", train.batch_size},
              {"epochs", train.epochs},
              {"weight_decay", train.weight_decay},
              {"clip_norm", train.clip_norm},
              {"shuffle", train.shuffle}}},
            {"windows",
             {{"train_stride", train_stride},
              {"max_train", max_train_windows},
              {"eval_stride", eval_stride},
              {"max_eval", max_eval_windows}}},
            {"model", json::parse(model.to_json())},
            {"prompts", prompts_j},
            {"masks", masks_j},
            {"variants", variants_j},
            {"encoders", enc_j},
            {"datasets", ds}};
  j["model"].erase("input_len");
  j["model"].erase("horizon");
  j["model"].erase("seed");
  j["model"].erase("vocab_size");
  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text, const std::string& base_dir) {
  ExperimentConfig c;
  c.prompts.tokenizer.kind = "bpe";
  c.prompts.tokenizer.vocab_path = std::string(MAP4TS_DATA_DIR) + "/tokenizer/vocab.json";
  c.prompts.tokenizer.merges_path = std::string(MAP4TS_DATA_DIR) + "/tokenizer/merges.txt";
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("config is not valid JSON: ") + e.what());
  }
  try {
    set_if(j, "seed", c.seed);
    set_if(j, "n_runs", c.n_runs);
    set_if(j, "parallelism", c.parallelism);
    set_if(j, "denormalized_metrics", c.denormalized_metrics);
    if (j.contains("output_dir")) c.output_dir = resolve(j.at("output_dir").get<std::string>(), base_dir);
    if (j.contains("task")) c.task = parse_task(j.at("task"), c.task);
    if (j.contains("split")) {
      const auto& s = j.at("split");
      c.split.train_frac = s.value("train", c.split.train_frac);
      c.split.val_frac = s.value("val", c.split.val_frac);
      c.split.test_frac = s.value("test", c.split.test_frac);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      set_if(t, "lr", c.train.lr);
      set_if(t, "batch_size", c.train.batch_size);
      set_if(t, "epochs", c.train.epochs);
      set_if(t, "weight_decay", c.train.weight_decay);
      set_if(t, "clip_norm", c.train.clip_norm);
      set_if(t, "shuffle", c.train.shuffle);
    }
    if (j.contains("windows")) {
      const auto& w = j.at("windows");
      set_if(w, "train_stride", c.train_stride);
      set_if(w, "max_train", c.max_train_windows);
      set_if(w, "eval_stride", c.eval_stride);
      set_if(w, "max_eval", c.max_eval_windows);
    }
    if (j.contains("model")) {
      json m = j.at("model");
      c.model = model::ModelConfig::from_json(m.dump());
    }
    if (j.contains("prompts")) {
      const auto& p = j.at("prompts");
      if (p.contains("variant")) c.prompts.variant = prompt::parse_variant(p.at("variant").get<std::string>());
      set_if(p, "clusters", c.prompts.clusters);
      set_if(p, "cluster_seed", c.prompts.cluster_seed);
      if (p.contains("z_threshold")) c.prompts.describe.z_threshold = p.at("z_threshold").get<double>();
      if (p.contains("tokenizer")) {
        const auto& t = p.at("tokenizer");
        set_if(t, "kind", c.prompts.tokenizer.kind);
        if (t.contains("vocab")) c.prompts.tokenizer.vocab_path = resolve(t.at("vocab").get<std::string>(), base_dir);
        if (t.contains("merges")) c.prompts.tokenizer.merges_path = resolve(t.at("merges").get<std::string>(), base_dir);
        set_if(t, "allow_fallback", c.prompts.tokenizer.allow_fallback);
      }
      if (p.contains("remote") && !p.at("remote").is_null()) {
        const auto& r = p.at("remote");
        prompt::RemoteConfig rc;
        set_if(r, "url", rc.url);
        set_if(r, "model", rc.model);
        set_if(r, "token_env", rc.token_env);
        if (r.contains("cache")) rc.cache_path = resolve(r.at("cache").get<std::string>(), base_dir);
        set_if(r, "max_tokens", rc.max_tokens);
        set_if(r, "timeout_s", rc.timeout_s);
        c.prompts.remote = rc;
      }
    }
    if (j.contains("masks")) c.masks = parse_masks(j.at("masks"));
    if (j.contains("variants")) {
      c.variants.clear();
      for (const auto& v : j.at("variants")) c.variants.push_back(model::parse_align_variant(v.get<std::string>()));
    }
    if (j.contains("encoders")) {
      c.encoders.clear();
      for (const auto& v : j.at("encoders")) c.encoders.push_back(model::parse_encoder_mode(v.get<std::string>()));
    }
    for (const auto& dj : j.value("datasets", json::array())) {
      DatasetSpec d;
      d.name = dj.value("name", std::string());
      d.group = dj.value("group", d.group);
      if (dj.contains("csv")) d.csv_path = resolve(dj.at("csv").get<std::string>(), base_dir);
      set_if(dj, "columns", d.columns);
      if (dj.contains("column")) d.columns = {dj.at("column").get<std::string>()};
      d.timestamp_column = dj.value("timestamp", d.timestamp_column);
      if (dj.contains("frequency")) d.frequency = core::parse_frequency(dj.at("frequency").get<std::string>());
      d.patch_table = dj.value("patch_table", d.patch_table);
      if (dj.contains("task")) d.task = parse_task(dj.at("task"), c.task);
      if (dj.contains("synthetic")) {
        const auto& s = dj.at("synthetic");
        SyntheticSpec sp;
        set_if(s, "kind", sp.kind);
        set_if(s, "length", sp.length);
        set_if(s, "channels", sp.channels);
        set_if(s, "phi", sp.phi);
        set_if(s, "noise", sp.noise);
        set_if(s, "period", sp.period);
        set_if(s, "amplitude", sp.amplitude);
        set_if(s, "level", sp.level);
        set_if(s, "slope", sp.slope);
        set_if(s, "seed", sp.seed);
        d.synthetic = sp;
      }
      if (dj.contains("card")) {
        const auto& cj = dj.at("card");
        prompt::DatasetCard card;
        card.name = cj.value("name", d.name);
        card.domain = cj.value("domain", std::string());
        card.target = cj.value("target", std::string());
        card.frequency = cj.value("frequency", std::string());
        card.timespan = cj.value("timespan", std::string());
        card.collection_notes = cj.value("collection_notes", std::string());
        card.validate();
        d.card = card;
      }
      c.datasets.push_back(std::move(d));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("config field: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str(), fs::path(path).parent_path().string().empty() ? "." : fs::path(path).parent_path().string());
}

core::TimeSeries synthesize(const SyntheticSpec& s, std::size_t channel, const std::string& name) {
  if (s.length == 0) throw Error(ErrorCode::EmptySeries, "synthetic length is zero");
  std::mt19937_64 rng(s.seed + 1000003ull * channel);
  std::normal_distribution<double> eps(0.0, 1.0);
  std::vector<double> v(s.length);
  if (s.kind == "ar1") {
    if (!(std::abs(s.phi) < 1.0)) throw Error(ErrorCode::InvalidConfig, "ar1 needs |phi| < 1");
    double x = s.noise / std::sqrt(1.0 - s.phi * s.phi) * eps(rng);
    for (std::size_t t = 0; t < s.length; ++t) {
      if (t) x = s.phi * x + s.noise * eps(rng);
      v[t] = s.level + x;
    }
  } else if (s.kind == "sine") {
    const double phase = 2.0 * M_PI * static_cast<double>(channel) / 7.0;
    for (std::size_t t = 0; t < s.length; ++t) {
      v[t] = s.level + s.amplitude * std::sin(2.0 * M_PI * static_cast<double>(t) / s.period + phase) +
             s.noise * eps(rng);
    }
  } else if (s.kind == "trend") {
    for (std::size_t t = 0; t < s.length; ++t) v[t] = s.level + s.slope * static_cast<double>(t) + s.noise * eps(rng);
  } else if (s.kind == "constant") {
    std::fill(v.begin(), v.end(), s.level);
  } else {
    throw Error(ErrorCode::InvalidConfig, "unknown synthetic kind '" + s.kind + "'");
  }
  return core::from_values(std::move(v), core::Frequency::Hourly,
                           s.channels > 1 ? name + "#" + std::to_string(channel) : name);
}

std::vector<core::TimeSeries> load_dataset(const DatasetSpec& spec) {
  std::vector<core::TimeSeries> out;
  if (spec.synthetic) {
    for (std::size_t c = 0; c < std::max<std::size_t>(1, spec.synthetic->channels); ++c) {
      auto ts = synthesize(*spec.synthetic, c, spec.name);
      if (spec.frequency) {
        ts = core::from_values(std::move(ts.values), *spec.frequency, ts.name);
      }
      out.push_back(std::move(ts));
    }
    return out;
  }
  core::CsvOptions opts;
  opts.frequency = spec.frequency;
  if (spec.columns.empty()) throw Error(ErrorCode::InvalidConfig, "dataset '" + spec.name + "' lists no columns");
  return core::load_csv_channels(spec.csv_path, spec.columns, spec.timestamp_column, opts);
}

prompt::DatasetCard card_for(const DatasetSpec& spec, const std::vector<core::TimeSeries>& channels) {
  if (spec.card) return *spec.card;
  if (auto b = prompt::builtin_card(spec.name)) return *b;
  prompt::DatasetCard c;
  c.name = spec.name;
  const core::Frequency f = channels.empty() ? core::Frequency::Hourly : channels.front().frequency;
  c.frequency = core::to_string(f);
  const std::size_t n = channels.empty() ? 0 : channels.front().size();
  c.timespan = "steps 0 -- " + std::to_string(n ? n - 1 : 0);
  if (spec.synthetic) {
    const auto& s = *spec.synthetic;
    c.domain = "Synthetic";
    c.target = "Simulated value";
    if (s.kind == "ar1") {
      c.collection_notes = "Simulated first-order autoregressive process with coefficient " +
                           prompt::format_fixed(s.phi, 2) + " and Gaussian shocks of scale " +
                           prompt::format_fixed(s.noise, 2) + ".";
    } else if (s.kind == "sine") {
      c.collection_notes = "Simulated sinusoid with period " + prompt::format_fixed(s.period, 1) +
                           " steps plus Gaussian noise of scale " + prompt::format_fixed(s.noise, 2) + ".";
    } else if (s.kind == "trend") {
      c.collection_notes = "Simulated linear drift of " + prompt::format_fixed(s.slope, 4) +
                           " per step plus Gaussian noise.";
    } else {
      c.collection_notes = "Simulated constant level.";
    }
  } else {
    c.domain = "Unspecified";
    c.target = spec.columns.empty() ? "value" : spec.columns.front();
    c.collection_notes = "Loaded from " + fs::path(spec.csv_path).filename().string() + ".";
  }
  return c;
}

std::vector<patch::PatchConfig> patch_configs_for(const DatasetSpec& spec, core::Frequency f) {
  std::string table = spec.patch_table;
  if (table.empty()) {
    const auto names = patch::table_datasets();
    if (std::find(names.begin(), names.end(), spec.name) != names.end()) {
      table = spec.name;
    } else {
      switch (f) {
        case core::Frequency::Hourly: table = "ETTh1"; break;
        case core::Frequency::Daily: table = "Environment"; break;
        case core::Frequency::Weekly: table = "Health"; break;
        case core::Frequency::Monthly: table = "Agriculture"; break;
      }
    }
  }
  return patch::table_configs(table);
}

namespace {

std::vector<std::size_t> subsample(const std::vector<std::size_t>& starts, std::size_t stride, std::size_t max) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < starts.size(); i += stride) out.push_back(starts[i]);
  if (max > 0 && out.size() > max) {
    std::vector<std::size_t> even;
    for (std::size_t i = 0; i < max; ++i) even.push_back(out[i * out.size() / max]);
    out = std::move(even);
  }
  return out;
}

std::size_t period_for(core::Frequency f, std::size_t input_len) {
  return std::max<std::size_t>(2, std::min(tsa::default_period(f), input_len / 2));
}

}  // namespace

train::Sample make_sample(const PreparedDataset& d, const ChannelData& ch, std::size_t start,
                          const PromptSettings& ps, const prompt::Tokenizer& tok,
                          std::size_t context_limit) {
  const std::size_t T = d.task.input_len, H = d.task.horizon;
  const auto& v = ch.series.values;
  if (start + T + H > v.size()) throw Error(ErrorCode::InvalidArgument, "window runs past the series end");
  const std::span<const double> input(v.data() + start, T);
  const std::span<const double> target(v.data() + start + T, H);
  train::Sample s;
  s.window_start = start;
  auto norm = core::instance_normalize(input);
  s.input = std::move(norm.values);
  s.norm = norm.state;
  s.target = core::normalize_with(target, s.norm);

  const std::size_t period = period_for(ch.series.frequency, T);
  std::array<std::optional<std::string>, 4> parts;
  parts[0] = d.global_text;
  parts[1] = prompt::build_local(std::span<const double>(v.data(), start + T), ch.index, d.configs);
  parts[2] = prompt::build_statistical(input, ps.variant, {period});
  if (ps.variant == prompt::Variant::Minimal) {
    parts[3] = prompt::build_temporal(prompt::Variant::Minimal);
  } else {
    const auto a = prompt::analyze_temporal(input, period);
    parts[3] = prompt::build_temporal(prompt::Variant::Verbose, &a);
  }
  const auto bundle = prompt::assemble(parts, prompt::PromptMask::all(), tok, context_limit);
  for (std::size_t a = 0; a < 4; ++a) {
    s.text[a] = *bundle.text[a];
    s.tokens[a] = tok.encode(s.text[a]);
  }
  return s;
}

std::shared_ptr<const prompt::Tokenizer> make_tokenizer(const ExperimentConfig& cfg, RunLog* log) {
  std::string warning;
  auto tok = prompt::make_tokenizer(cfg.prompts.tokenizer, &warning);
  if (!warning.empty() && log) log->note(warning);
  return tok;
}

PreparedDataset prepare(const DatasetSpec& spec, const ExperimentConfig& cfg,
                        const prompt::Tokenizer& tok, RunLog* log) {
  PreparedDataset d;
  d.spec = spec;
  d.task = spec.task.value_or(cfg.task);
  auto series = load_dataset(spec);
  if (series.empty()) throw Error(ErrorCode::EmptySeries, "dataset '" + spec.name + "' has no channels");
  d.card = card_for(spec, series);
  const auto all_configs = patch_configs_for(spec, series.front().frequency);

  std::unique_ptr<prompt::RemoteClient> remote;
  if (cfg.prompts.remote && !cfg.prompts.remote->url.empty()) {
    remote = std::make_unique<prompt::RemoteClient>(*cfg.prompts.remote);
  }
  d.global_text = prompt::build_global(d.card, remote.get(), log);

  patch::KMeansOptions km;
  km.k = cfg.prompts.clusters;
  km.seed = cfg.prompts.cluster_seed;
  for (auto& ts : series) {
    core::validate(ts);
    ChannelData ch;
    ch.splits = core::chrono_split(ts, cfg.split, d.task);
    const std::span<const double> train_region(ts.values.data(), ch.splits.bounds.train_end);
    if (d.configs.empty()) {
      for (const auto& pc : all_configs) {
        if (pc.data_points * 2 <= train_region.size()) d.configs.push_back(pc);
      }
      if (d.configs.empty()) {
        throw Error(ErrorCode::SeriesTooShort, "training region too short for any patch scale");
      }
    }
    ch.index = patch::build_cluster_index(train_region, d.configs, km);
    prompt::describe_clusters(ch.index, cfg.prompts.describe);
    ch.series = std::move(ts);
    d.channels.push_back(std::move(ch));
  }

  const std::size_t limit = cfg.model.backbone.context_limit;
  for (std::size_t c = 0; c < d.channels.size(); ++c) {
    const auto& ch = d.channels[c];
    auto add = [&](const core::WindowSet& w, std::size_t stride, std::size_t max,
                   std::vector<train::Sample>& dst) {
      for (std::size_t start : subsample(w.starts, stride, max)) {
        auto s = make_sample(d, ch, start, cfg.prompts, tok, limit);
        s.channel = c;
        for (const auto& t : s.tokens) d.max_prompt_tokens = std::max(d.max_prompt_tokens, t.size());
        dst.push_back(std::move(s));
      }
    };
    add(ch.splits.train, cfg.train_stride, cfg.max_train_windows, d.train);
    add(ch.splits.val, cfg.eval_stride, cfg.max_eval_windows, d.val);
    add(ch.splits.test, cfg.eval_stride, cfg.max_eval_windows, d.test);
  }
  if (log) {
    log->note(spec.name + ": " + std::to_string(d.channels.size()) + " channel(s), " +
              std::to_string(d.train.size()) + "/" + std::to_string(d.val.size()) + "/" +
              std::to_string(d.test.size()) + " train/val/test windows, longest prompt " +
              std::to_string(d.max_prompt_tokens) + " tokens");
  }
  return d;
}

model::ModelConfig model_config_for(const ExperimentConfig& cfg, const PreparedDataset& d,
                                    const CellSpec& cell, std::size_t vocab_size) {
  model::ModelConfig mc = cfg.model;
  mc.input_len = d.task.input_len;
  mc.horizon = d.task.horizon;
  mc.variant = cell.variant;
  mc.encoder = cell.encoder;
  mc.wte_baseline = cell.wte_baseline;
  mc.seed = cell.seed;
  mc.backbone.vocab_size = vocab_size;
  return mc;
}

model::Model build_model(const model::ModelConfig& mc) {
  model::Model m(mc);
  if (mc.backbone.lora_rank > 0) m.apply_lora(mc.backbone.lora_rank, mc.backbone.lora_alpha);
  return m;
}

TrainedCell train_cell(const PreparedDataset& d, const ExperimentConfig& cfg, const CellSpec& cell,
                       std::size_t vocab_size, std::uint64_t seed, RunLog* log) {
  CellSpec c = cell;
  c.seed = seed;
  TrainedCell out{build_model(model_config_for(cfg, d, c, vocab_size)), {}};
  train::TrainConfig tc = cfg.train;
  tc.seed = seed;
  out.trace = train::train_run(out.model, d.train, cell.mask, tc, log);
  return out;
}

CellResult run_cell(const PreparedDataset& d, const ExperimentConfig& cfg, const CellSpec& cell,
                    std::size_t vocab_size, RunLog* log) {
  CellResult r;
  r.spec = cell;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    bool first = true;
    r.report = train::repeat_runs(
        [&](std::uint64_t seed) {
          auto tc = train_cell(d, cfg, cell, vocab_size, seed, nullptr);
          if (first) {
            r.first_run_epoch_loss = tc.trace.epoch_loss;
            first = false;
          }
          return train::evaluate(tc.model, d.test, cell.mask, cfg.denormalized_metrics);
        },
        cell.seed, cfg.n_runs);
    r.ok = std::isfinite(r.report.mean.mse) && std::isfinite(r.report.mean.mae);
    if (!r.ok) r.error = "non-finite metrics";
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (log) {
    log->note(d.spec.name + " [" + cell.mask.label() + ", " + model::to_string(cell.variant) + ", " +
              model::to_string(cell.encoder) + (cell.wte_baseline ? ", wte" : "") + "] " +
              (r.ok ? "mse " + format_metric(r.report.mean.mse) + " mae " + format_metric(r.report.mean.mae)
                    : "failed: " + r.error));
  }
  return r;
}

std::vector<CellResult> run_cells(const std::vector<const PreparedDataset*>& data,
                                  const ExperimentConfig& cfg, const std::vector<CellSpec>& cells,
                                  std::size_t vocab_size, RunLog* log) {
  auto find = [&](const std::string& name) -> const PreparedDataset* {
    for (const auto* d : data) {
      if (d->spec.name == name) return d;
    }
    return nullptr;
  };
  std::vector<CellResult> out(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const PreparedDataset* d = find(cells[i].dataset);
      if (!d) {
        out[i].spec = cells[i];
        out[i].error = "unknown dataset '" + cells[i].dataset + "'";
        continue;
      }
      out[i] = run_cell(*d, cfg, cells[i], vocab_size, log);
    }
  };
  const std::size_t n = std::min(cfg.parallelism, std::max<std::size_t>(1, cells.size()));
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < n; ++k) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return out;
}

std::size_t ResultTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i] == name) return i;
  }
  throw Error(ErrorCode::InvalidArgument, "no column '" + name + "'");
}

std::string format_metric(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

ResultTable ablation_table(const std::string& key_column, const std::vector<std::string>& row_labels,
                           const std::vector<std::string>& datasets,
                           const std::vector<std::string>& groups,
                           const std::vector<std::vector<const CellResult*>>& cells) {
  ResultTable t;
  t.columns.push_back(key_column);
  for (const auto& d : datasets) {
    t.columns.push_back(d + " MSE");
    t.columns.push_back(d + " MAE");
  }
  std::vector<std::string> group_order;
  for (const auto& g : groups) {
    if (std::find(group_order.begin(), group_order.end(), g) == group_order.end()) group_order.push_back(g);
  }
  for (const auto& g : group_order) {
    t.columns.push_back(g + " Sum(Loss) MSE");
    t.columns.push_back(g + " Sum(Loss) MAE");
  }
  t.columns.push_back("status");
  for (std::size_t r = 0; r < row_labels.size(); ++r) {
    std::vector<std::string> row{row_labels[r]};
    std::vector<double> gm(group_order.size(), 0.0), ga(group_order.size(), 0.0);
    std::string status = "ok";
    for (std::size_t k = 0; k < datasets.size(); ++k) {
      const CellResult* c = cells[r][k];
      const double mse = c && c->ok ? c->report.mean.mse : std::nan("");
      const double mae = c && c->ok ? c->report.mean.mae : std::nan("");
      if (!c || !c->ok) {
        status = (status == "ok" ? std::string("failed: ") : status + "; ") + datasets[k] + ": " +
                 (c ? c->error : "missing");
      }
      row.push_back(format_metric(mse));
      row.push_back(format_metric(mae));
      const auto g = static_cast<std::size_t>(
          std::find(group_order.begin(), group_order.end(), groups[k]) - group_order.begin());
      gm[g] += mse;
      ga[g] += mae;
    }
    for (std::size_t g = 0; g < group_order.size(); ++g) {
      row.push_back(format_metric(gm[g]));
      row.push_back(format_metric(ga[g]));
    }
    row.push_back(status);
    t.rows.push_back(std::move(row));
  }
  return t;
}

Experiment::Experiment(ExperimentConfig c) : cfg(std::move(c)) {
  cfg.validate();
  tokenizer = make_tokenizer(cfg, &log);
  if (tokenizer->eos_id() != static_cast<int>(tokenizer->vocab_size()) - 1) {
    throw Error(ErrorCode::InvalidConfig, "tokenizer EOS id must be the last vocabulary entry");
  }
  for (const auto& spec : cfg.datasets) data.push_back(prepare(spec, cfg, *tokenizer, &log));
}

const PreparedDataset& Experiment::dataset(const std::string& name) const {
  for (const auto& d : data) {
    if (d.spec.name == name) return d;
  }
  throw Error(ErrorCode::UnknownDataset, "dataset '" + name + "' is not registered");
}

std::vector<const PreparedDataset*> Experiment::all() const {
  std::vector<const PreparedDataset*> out;
  for (const auto& d : data) out.push_back(&d);
  return out;
}

namespace {

SweepOutput sweep(Experiment& e, const std::string& key, const std::vector<std::string>& labels,
                  const std::function<CellSpec(std::size_t row, const std::string& dataset)>& make) {
  std::vector<CellSpec> specs;
  std::vector<std::string> names, groups;
  for (const auto& d : e.data) {
    names.push_back(d.spec.name);
    groups.push_back(d.spec.group);
  }
  for (std::size_t r = 0; r < labels.size(); ++r) {
    for (const auto& n : names) specs.push_back(make(r, n));
  }
  SweepOutput out;
  out.cells = run_cells(e.all(), e.cfg, specs, e.tokenizer->vocab_size(), &e.log);
  std::vector<std::vector<const CellResult*>> grid(labels.size());
  for (std::size_t r = 0; r < labels.size(); ++r) {
    for (std::size_t k = 0; k < names.size(); ++k) grid[r].push_back(&out.cells[r * names.size() + k]);
  }
  out.table = ablation_table(key, labels, names, groups, grid);
  return out;
}

}  // namespace

SweepOutput run_ablation_prompts(Experiment& e) {
  const auto masks = prompt::PromptMask::power_set();
  std::vector<std::string> labels;
  for (const auto& m : masks) labels.push_back(m.label());
  return sweep(e, "prompts", labels, [&](std::size_t r, const std::string& ds) {
    CellSpec c;
    c.dataset = ds;
    c.mask = masks[r];
    c.variant = e.cfg.model.variant;
    c.encoder = e.cfg.model.encoder;
    c.seed = e.cfg.seed;
    return c;
  });
}

SweepOutput run_alignment_ablation(Experiment& e) {
  std::vector<std::string> labels;
  for (auto v : model::kAlignVariants) labels.push_back(model::to_string(v));
  return sweep(e, "variant", labels, [&](std::size_t r, const std::string& ds) {
    CellSpec c;
    c.dataset = ds;
    c.mask = e.cfg.masks.front();
    c.variant = model::kAlignVariants[r];
    c.encoder = e.cfg.model.encoder;
    c.seed = e.cfg.seed;
    return c;
  });
}

SweepOutput run_encoder_ablation(Experiment& e) {
  const std::array<model::EncoderMode, 3> modes = {model::EncoderMode::Single, model::EncoderMode::DualFrozen,
                                                   model::EncoderMode::DualTrainable};
  std::vector<std::string> labels;
  for (auto m : modes) labels.push_back(model::to_string(m));
  return sweep(e, "encoder", labels, [&](std::size_t r, const std::string& ds) {
    CellSpec c;
    c.dataset = ds;
    c.mask = e.cfg.masks.front();
    c.variant = e.cfg.model.variant;
    c.encoder = modes[r];
    c.seed = e.cfg.seed;
    return c;
  });
}

ZeroShotRow zero_shot_eval(const model::Model& m, const PreparedDataset& target,
                           const ExperimentConfig& cfg, const prompt::PromptMask& mask) {
  if (m.config().input_len != target.task.input_len || m.config().horizon != target.task.horizon) {
    throw Error(ErrorCode::ShapeMismatch, "model is " + std::to_string(m.config().input_len) + "->" +
                                              std::to_string(m.config().horizon) + " but target '" +
                                              target.spec.name + "' needs " +
                                              std::to_string(target.task.input_len) + "->" +
                                              std::to_string(target.task.horizon));
  }
  ZeroShotRow row;
  row.target = target.spec.name;
  row.hash_before = m.params().hash();
  row.metrics = train::evaluate(m, target.test, mask, cfg.denormalized_metrics);
  row.hash_after = m.params().hash();
  return row;
}

ZeroShotOutput run_zero_shot(Experiment& e, const std::string& source, const std::vector<std::string>& targets) {
  const PreparedDataset& src = e.dataset(source);
  CellSpec cell;
  cell.dataset = source;
  cell.mask = e.cfg.masks.front();
  cell.variant = e.cfg.model.variant;
  cell.encoder = e.cfg.model.encoder;
  cell.seed = e.cfg.seed;
  auto trained = train_cell(src, e.cfg, cell, e.tokenizer->vocab_size(), cell.seed, &e.log);
  ZeroShotOutput out;
  out.in_domain = train::evaluate(trained.model, src.test, cell.mask, e.cfg.denormalized_metrics);
  out.table.columns = {"source", "target", "MSE", "MAE", "params_unchanged", "status"};
  for (const auto& t : targets) {
    ZeroShotRow row;
    row.source = source;
    row.target = t;
    std::string status = "ok";
    try {
      row = zero_shot_eval(trained.model, e.dataset(t), e.cfg, cell.mask);
      row.source = source;
    } catch (const Error& err) {
      status = std::string("failed: ") + err.what();
      row.metrics.mse = row.metrics.mae = std::nan("");
    }
    out.table.rows.push_back({source + " -> " + t, t, format_metric(row.metrics.mse),
                              format_metric(row.metrics.mae),
                              row.hash_before == row.hash_after ? "yes" : "no", status});
    out.rows.push_back(row);
  }
  return out;
}

ReportFormat parse_report_format(const std::string& s) {
  if (s == "csv") return ReportFormat::Csv;
  if (s == "markdown" || s == "md" || s == "markdown-table") return ReportFormat::Markdown;
  if (s == "plot-data" || s == "plot") return ReportFormat::PlotData;
  throw Error(ErrorCode::InvalidArgument, "unknown report format '" + s + "'");
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

bool numeric(const std::string& s, double* out = nullptr) {
  if (s.empty()) return false;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) return false;
  if (out) *out = v;
  return true;
}

}  // namespace

std::string render(const ResultTable& t, ReportFormat f) {
  std::ostringstream os;
  switch (f) {
    case ReportFormat::Csv: {
      auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << csv_field(cells[i]);
        os << "\n";
      };
      line(t.columns);
      for (const auto& r : t.rows) line(r);
      break;
    }
    case ReportFormat::Markdown: {
      auto line = [&](const std::vector<std::string>& cells) {
        os << "|";
        for (const auto& c : cells) {
          std::string esc;
          for (char ch : c) esc += ch == '|' ? std::string("\\|") : std::string(1, ch);
          os << " " << esc << " |";
        }
        os << "\n";
      };
      line(t.columns);
      os << "|";
      for (std::size_t i = 0; i < t.columns.size(); ++i) os << "---|";
      os << "\n";
      for (const auto& r : t.rows) line(r);
      break;
    }
    case ReportFormat::PlotData: {
      // Row index plus every column whose cells are all numeric.
      std::vector<std::size_t> keep;
      for (std::size_t c = 0; c < t.columns.size(); ++c) {
        bool all = !t.rows.empty();
        for (const auto& r : t.rows) all = all && (numeric(r[c]) || r[c] == "nan");
        if (all) keep.push_back(c);
      }
      os << "# row";
      for (std::size_t c : keep) {
        std::string name = t.columns[c];
        std::replace(name.begin(), name.end(), ' ', '_');
        os << " " << name;
      }
      os << "\n";
      for (std::size_t r = 0; r < t.rows.size(); ++r) {
        os << r;
        for (std::size_t c : keep) os << " " << t.rows[r][c];
        os << "\n";
      }
      break;
    }
  }
  return os.str();
}

void emit_report(const ResultTable& t, ReportFormat f, const std::string& path) {
  if (t.rows.empty()) throw Error(ErrorCode::InvalidArgument, "refusing to write an empty report");
  const std::string text = render(t, f);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path);
  out << text;
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path);
}

ResultTable parse_csv_table(const std::string& text) {
  std::vector<std::vector<std::string>> lines;
  std::vector<std::string> cur;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      cur.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        cur.push_back(std::move(field));
        lines.push_back(std::move(cur));
      }
      cur.clear();
      field.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw Error(ErrorCode::FormatError, "unterminated quoted field");
  if (any || !field.empty()) {
    cur.push_back(std::move(field));
    lines.push_back(std::move(cur));
  }
  if (lines.empty()) throw Error(ErrorCode::FormatError, "empty CSV");
  ResultTable t;
  t.columns = lines.front();
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].size() != t.columns.size()) throw Error(ErrorCode::FormatError, "ragged CSV row " + std::to_string(i));
    t.rows.push_back(std::move(lines[i]));
  }
  return t;
}

ResultTable read_csv_table(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_csv_table(ss.str());
}

std::string render_attention(const model::AttentionExport& ex) {
  std::ostringstream os;
  auto matrix = [&](const ag::Mat& m) {
    os << "from\\to";
    for (const auto& l : ex.labels) os << " " << l;
    os << "\n";
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      os << ex.labels[ex.rows[static_cast<std::size_t>(r)]];
      for (Eigen::Index c = 0; c < m.cols(); ++c) os << " " << prompt::format_fixed(m(r, c), 6);
      os << "\n";
    }
  };
  for (std::size_t l = 0; l < ex.per_layer.size(); ++l) {
    os << "# layer " << l << " (head mean)\n";
    matrix(ex.per_layer[l]);
  }
  for (std::size_t g = 0; g < ex.grouped.size(); ++g) {
    os << "# layers " << ex.groups[g].first << "-" << ex.groups[g].second << " (mean)\n";
    matrix(ex.grouped[g]);
  }
  return os.str();
}

std::string cell_record(const CellResult& r, const ExperimentConfig& cfg) {
  json runs = json::array();
  for (std::size_t i = 0; i < r.report.runs.size(); ++i) {
    runs.push_back({{"seed", i < r.report.seeds.size() ? r.report.seeds[i] : 0},
                    {"mse", r.report.runs[i].mse},
                    {"mae", r.report.runs[i].mae}});
  }
  json j = {{"dataset", r.spec.dataset},
            {"mask", r.spec.mask.bits()},
            {"variant", model::to_string(r.spec.variant)},
            {"encoder", model::to_string(r.spec.encoder)},
            {"wte_baseline", r.spec.wte_baseline},
            {"seed", r.spec.seed},
            {"ok", r.ok},
            {"error", r.error},
            {"runs", runs},
            {"seconds", r.seconds}};
  if (r.ok) {
    j["mse"] = r.report.mean.mse;
    j["mae"] = r.report.mean.mae;
    j["best_mse"] = r.report.best.mse;
    j["best_mae"] = r.report.best.mae;
  }
  j["config"] = json::parse(cfg.to_json());
  return j.dump();
}

}  // namespace map4ts::exp
