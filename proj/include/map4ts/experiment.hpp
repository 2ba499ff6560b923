#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "map4ts/core.hpp"
#include "map4ts/log.hpp"
#include "map4ts/model.hpp"
#include "map4ts/patchcluster.hpp"
#include "map4ts/promptgen.hpp"
#include "map4ts/tokenizer.hpp"
#include "map4ts/train.hpp"

// Experiment orchestration: datasets, prompt caches, cells, sweeps, reports.
namespace map4ts::exp {

struct SyntheticSpec {
  std::string kind = "ar1";  // ar1 | sine | trend | constant
  std::size_t length = 5000;
  std::size_t channels = 1;
  double phi = 0.9;
  double noise = 1.0;
  double period = 24.0;
  double amplitude = 1.0;
  double level = 0.0;
  double slope = 0.0;
  std::uint64_t seed = 7;
};

struct DatasetSpec {
  std::string name;
  // CSV source (ignored when `synthetic` is set).
  std::string csv_path;
  std::vector<std::string> columns;
  std::string timestamp_column;
  std::optional<core::Frequency> frequency;
  std::optional<SyntheticSpec> synthetic;
  // Registry dataset whose patch configs drive the local prompt; empty picks
  // one by sampling frequency.
  std::string patch_table;
  std::optional<prompt::DatasetCard> card;
  std::string group = "LT";  // LT or ST, for the Sum(Loss) columns
  std::optional<core::ForecastTask> task;
};

struct PromptSettings {
  prompt::Variant variant = prompt::Variant::Minimal;
  std::size_t clusters = 5;
  std::uint64_t cluster_seed = 1;
  prompt::DescribeOptions describe;
  prompt::TokenizerConfig tokenizer;
  std::optional<prompt::RemoteConfig> remote;
};

struct ExperimentConfig {
  std::vector<DatasetSpec> datasets;
  core::ForecastTask task;
  core::SplitSpec split;
  train::TrainConfig train;
  model::ModelConfig model;
  std::vector<prompt::PromptMask> masks = {prompt::PromptMask::all()};
  std::vector<model::AlignVariant> variants = {model::AlignVariant::CrossAttention};
  std::vector<model::EncoderMode> encoders = {model::EncoderMode::Single};
  PromptSettings prompts;
  std::size_t n_runs = 1;
  std::uint64_t seed = 1;
  bool denormalized_metrics = false;
  // Toy-scale window subsampling: every k-th window, then at most max.
  std::size_t train_stride = 1;
  std::size_t max_train_windows = 0;  // 0 = unlimited
  std::size_t eval_stride = 1;
  std::size_t max_eval_windows = 0;
  std::size_t parallelism = 1;
  std::string output_dir = "map4ts_out";

  void validate() const;
  std::string to_json() const;
  // Relative paths resolve against `base_dir`.
  static ExperimentConfig from_json(const std::string& text, const std::string& base_dir = ".");
  static ExperimentConfig load(const std::string& path);
};

core::TimeSeries synthesize(const SyntheticSpec& s, std::size_t channel, const std::string& name);
std::vector<core::TimeSeries> load_dataset(const DatasetSpec& spec);
prompt::DatasetCard card_for(const DatasetSpec& spec, const std::vector<core::TimeSeries>& channels);
std::vector<patch::PatchConfig> patch_configs_for(const DatasetSpec& spec, core::Frequency f);

struct ChannelData {
  core::TimeSeries series;
  core::Splits splits;
  patch::ClusterIndex index;
};

// Everything a cell needs, built once per dataset and read-only afterwards.
struct PreparedDataset {
  DatasetSpec spec;
  core::ForecastTask task;
  prompt::DatasetCard card;
  std::vector<patch::PatchConfig> configs;
  std::vector<ChannelData> channels;
  std::string global_text;
  std::vector<train::Sample> train, val, test;
  std::size_t max_prompt_tokens = 0;
};

// One sample per window, prompts for all four aspects. Throws PromptTooLong
// when an aspect exceeds the context limit.
train::Sample make_sample(const PreparedDataset& d, const ChannelData& ch, std::size_t start,
                          const PromptSettings& ps, const prompt::Tokenizer& tok,
                          std::size_t context_limit);

PreparedDataset prepare(const DatasetSpec& spec, const ExperimentConfig& cfg,
                        const prompt::Tokenizer& tok, RunLog* log = nullptr);

std::shared_ptr<const prompt::Tokenizer> make_tokenizer(const ExperimentConfig& cfg, RunLog* log = nullptr);

struct CellSpec {
  std::string dataset;
  prompt::PromptMask mask;
  model::AlignVariant variant = model::AlignVariant::CrossAttention;
  model::EncoderMode encoder = model::EncoderMode::Single;
  bool wte_baseline = false;
  std::uint64_t seed = 1;
};

struct CellResult {
  CellSpec spec;
  bool ok = false;
  std::string error;
  train::RepeatReport report;
  std::vector<double> first_run_epoch_loss;
  double seconds = 0.0;
};

model::ModelConfig model_config_for(const ExperimentConfig& cfg, const PreparedDataset& d,
                                    const CellSpec& cell, std::size_t vocab_size);
// A fresh model with LoRA applied when the configured rank is positive.
model::Model build_model(const model::ModelConfig& mc);

struct TrainedCell {
  model::Model model;
  train::TrainResult trace;
};
TrainedCell train_cell(const PreparedDataset& d, const ExperimentConfig& cfg, const CellSpec& cell,
                       std::size_t vocab_size, std::uint64_t seed, RunLog* log = nullptr);

// Trains n_runs models (derived seeds) and scores each on the test split.
// Failures are captured in the result rather than thrown.
CellResult run_cell(const PreparedDataset& d, const ExperimentConfig& cfg, const CellSpec& cell,
                    std::size_t vocab_size, RunLog* log = nullptr);

// Runs cells with up to cfg.parallelism worker threads; order is preserved.
std::vector<CellResult> run_cells(const std::vector<const PreparedDataset*>& data,
                                  const ExperimentConfig& cfg, const std::vector<CellSpec>& cells,
                                  std::size_t vocab_size, RunLog* log = nullptr);

struct ResultTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  bool operator==(const ResultTable&) const = default;
  std::size_t column(const std::string& name) const;  // InvalidArgument
};

std::string format_metric(double v);

// Rows keyed by `row_labels`; per dataset MSE/MAE, then per-group sums.
ResultTable ablation_table(const std::string& key_column, const std::vector<std::string>& row_labels,
                           const std::vector<std::string>& datasets,
                           const std::vector<std::string>& groups,
                           const std::vector<std::vector<const CellResult*>>& cells);

struct Experiment {
  ExperimentConfig cfg;
  std::shared_ptr<const prompt::Tokenizer> tokenizer;
  std::vector<PreparedDataset> data;
  RunLog log;

  explicit Experiment(ExperimentConfig c);
  const PreparedDataset& dataset(const std::string& name) const;
  std::vector<const PreparedDataset*> all() const;
};

struct SweepOutput {
  ResultTable table;
  std::vector<CellResult> cells;
};

SweepOutput run_ablation_prompts(Experiment& e);
SweepOutput run_alignment_ablation(Experiment& e);
SweepOutput run_encoder_ablation(Experiment& e);

struct ZeroShotRow {
  std::string source, target;
  train::Metrics metrics;
  std::uint64_t hash_before = 0, hash_after = 0;
};
struct ZeroShotOutput {
  ResultTable table;
  std::vector<ZeroShotRow> rows;
  train::Metrics in_domain;
};

// Trains on `source` and evaluates on every target without updates.
ZeroShotOutput run_zero_shot(Experiment& e, const std::string& source,
                             const std::vector<std::string>& targets);
// Same for an already trained model; ShapeMismatch when T/H differ.
ZeroShotRow zero_shot_eval(const model::Model& m, const PreparedDataset& target,
                           const ExperimentConfig& cfg, const prompt::PromptMask& mask);

enum class ReportFormat { Csv, Markdown, PlotData };
ReportFormat parse_report_format(const std::string& s);
std::string render(const ResultTable& t, ReportFormat f);
// Writes nothing and throws InvalidArgument for an empty table; IoFailure on write errors.
void emit_report(const ResultTable& t, ReportFormat f, const std::string& path);
ResultTable parse_csv_table(const std::string& text);
ResultTable read_csv_table(const std::string& path);
std::string render_attention(const model::AttentionExport& ex);

// One JSON object per cell: spec, seed, metrics.
std::string cell_record(const CellResult& r, const ExperimentConfig& cfg);

}  // namespace map4ts::exp
