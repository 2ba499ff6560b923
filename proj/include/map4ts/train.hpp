#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "map4ts/core.hpp"
#include "map4ts/log.hpp"
#include "map4ts/model.hpp"

namespace map4ts::train {

struct TrainConfig {
  double lr = 1e-4;
  std::size_t batch_size = 4;
  std::size_t epochs = 10;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;  // <= 0 disables clipping
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool shuffle = false;
  std::uint64_t seed = 1;

  void validate() const;  // InvalidConfig
};

// One forecasting example. Inputs and targets are on the normalized scale;
// every aspect's text and token ids are stored and the mask picks among them.
struct Sample {
  std::size_t channel = 0;
  std::size_t window_start = 0;
  std::vector<double> input;
  std::vector<double> target;
  core::NormState norm;
  std::array<std::string, 4> text;
  std::array<std::vector<int>, 4> tokens;
};

class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}
  // Updates trainable parameters from store.grad(); lr == 0 leaves values untouched.
  void step(ag::ParameterStore& store);
  std::size_t steps() const noexcept { return t_; }

 private:
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::vector<ag::Mat> m_, v_;
};

double grad_norm(const ag::ParameterStore& store);
// Scales trainable gradients so their global norm is at most max_norm; returns the pre-clip norm.
double clip_grad_norm(ag::ParameterStore& store, double max_norm);

// Builds prompt rows for a set of samples on one tape, encoding each distinct
// (aspect, text) once. With a frozen text encoder, EOS states are memoised
// across tapes in `eos_cache`. One encoder per tape.
class PromptEncoder {
 public:
  PromptEncoder(const model::Model& m, std::map<std::string, ag::Mat>* eos_cache = nullptr)
      : model_(m), cache_(eos_cache) {}
  model::PromptRows rows(ag::Tape& t, const Sample& s, const prompt::PromptMask& mask);

 private:
  const model::Model& model_;
  std::map<std::string, ag::Mat>* cache_;
  ag::Tape* tape_ = nullptr;
  std::map<std::string, ag::Var> on_tape_;
};

struct TrainResult {
  std::vector<double> step_loss;
  std::vector<double> epoch_loss;  // mean step loss per epoch
  std::size_t steps = 0;
};

// Sequential batches (seeded shuffle optional), one tape per batch, fixed
// epoch count. Throws NonFiniteLoss naming the offending batch.
TrainResult train_run(model::Model& m, const std::vector<Sample>& samples,
                      const prompt::PromptMask& mask, const TrainConfig& cfg,
                      RunLog* log = nullptr);

struct Metrics {
  double mse = 0.0;
  double mae = 0.0;
  std::size_t count = 0;  // scored values
};

// Naive mean squared and absolute errors over flattened rows.
Metrics score(const std::vector<std::vector<double>>& preds,
              const std::vector<std::vector<double>>& targets);

std::vector<std::vector<double>> predict_all(const model::Model& m, const std::vector<Sample>& samples,
                                             const prompt::PromptMask& mask);

// Gradient-free. `denormalized` scores in data units instead of the
// instance-normalized scale.
Metrics evaluate(const model::Model& m, const std::vector<Sample>& samples,
                 const prompt::PromptMask& mask, bool denormalized = false);

struct RepeatReport {
  std::vector<Metrics> runs;
  std::vector<std::uint64_t> seeds;
  Metrics mean;
  Metrics best;  // minimum over runs, per metric
};

std::uint64_t derive_seed(std::uint64_t base, std::size_t run);
RepeatReport aggregate(const std::vector<Metrics>& runs);
RepeatReport repeat_runs(const std::function<Metrics(std::uint64_t seed)>& run, std::uint64_t base_seed,
                         std::size_t n_runs = 3);

struct TraceRow {
  std::string run_id;
  std::string dataset;
  std::size_t horizon = 0;
  std::string mask;
  std::string variant;
  std::size_t step = 0;
  std::string metric;
  double value = 0.0;
};

void write_trace_csv(const std::vector<TraceRow>& rows, const std::string& path);

}  // namespace map4ts::train
