#include "map4ts/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "map4ts/error.hpp"

namespace map4ts::train {

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw Error(ErrorCode::InvalidConfig, "learning rate must be finite and non-negative");
  if (batch_size < 1) throw Error(ErrorCode::InvalidConfig, "batch size must be at least 1");
  if (epochs < 1) throw Error(ErrorCode::InvalidConfig, "epochs must be at least 1");
  if (weight_decay < 0.0) throw Error(ErrorCode::InvalidConfig, "weight decay must be non-negative");
}

void AdamW::step(ag::ParameterStore& store) {
  if (m_.empty()) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      m_.push_back(ag::Mat::Zero(store.value(i).rows(), store.value(i).cols()));
      v_.push_back(m_.back());
    }
  }
  ++t_;
  if (cfg_.lr == 0.0) return;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (!store.trainable(i)) continue;
    const ag::Mat& g = store.grad(i);
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    ag::Mat& p = store.value(i);
    p.array() -= cfg_.lr * ((m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.adam_eps) +
                            cfg_.weight_decay * p.array());
  }
}

double grad_norm(const ag::ParameterStore& store) {
  double s = 0.0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (store.trainable(i)) s += store.grad(i).squaredNorm();
  }
  return std::sqrt(s);
}

double clip_grad_norm(ag::ParameterStore& store, double max_norm) {
  const double n = grad_norm(store);
  if (max_norm > 0.0 && n > max_norm) {
    const double f = max_norm / n;
    for (std::size_t i = 0; i < store.size(); ++i) {
      if (store.trainable(i)) store.grad(i) *= f;
    }
  }
  return n;
}

model::PromptRows PromptEncoder::rows(ag::Tape& t, const Sample& s, const prompt::PromptMask& mask) {
  if (tape_ && tape_ != &t) throw Error(ErrorCode::InvalidArgument, "prompt encoder reused across tapes");
  tape_ = &t;
  model::PromptRows out;
  for (std::size_t a = 0; a < 4; ++a) {
    if (!mask.on[a]) continue;
    const std::string key = std::to_string(a) + '\x1f' + s.text[a];
    auto hit = on_tape_.find(key);
    if (hit != on_tape_.end()) {
      out[a] = hit->second;
      continue;
    }
    ag::Var eos;
    if (cache_) {
      auto c = cache_->find(s.text[a]);
      if (c == cache_->end()) {
        ag::Tape scratch(false);
        c = cache_->emplace(s.text[a], model_.eos_hidden(scratch, s.tokens[a]).value()).first;
      }
      eos = t.constant(c->second);
    } else {
      eos = model_.eos_hidden(t, s.tokens[a]);
    }
    const ag::Var row = model_.project_prompt(t, prompt::kAspects[a], eos);
    on_tape_.emplace(key, row);
    out[a] = row;
  }
  return out;
}

namespace {

ag::Mat as_row(const std::vector<double>& v) {
  return Eigen::Map<const ag::Mat>(v.data(), 1, static_cast<Eigen::Index>(v.size()));
}

}  // namespace

TrainResult train_run(model::Model& m, const std::vector<Sample>& samples,
                      const prompt::PromptMask& mask, const TrainConfig& cfg, RunLog* log) {
  cfg.validate();
  if (samples.empty()) throw Error(ErrorCode::TooFewWindows, "no training windows");
  TrainResult res;
  AdamW opt(cfg);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::map<std::string, ag::Mat> eos_cache;
  const bool frozen_text = m.text_encoder_frozen();
  auto& store = m.params();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.shuffle) std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      store.zero_grad();
      ag::Tape tape;
      PromptEncoder enc(m, frozen_text ? &eos_cache : nullptr);
      std::vector<ag::Var> losses;
      for (std::size_t b = start; b < end; ++b) {
        const Sample& s = samples[order[b]];
        ag::Var pred = m.predict(tape, s.input, enc.rows(tape, s, mask));
        losses.push_back(ag::mse(pred, as_row(s.target)));
      }
      ag::Var total = ag::mul_scalar(ag::sum(ag::concat_rows(losses)),
                                     1.0 / static_cast<double>(losses.size()));
      const double loss = total.value()(0, 0);
      if (!std::isfinite(loss)) {
        throw Error(ErrorCode::NonFiniteLoss,
                    "epoch " + std::to_string(epoch) + " batch " + std::to_string(start / cfg.batch_size) +
                        " (window starts " + std::to_string(samples[order[start]].window_start) + "..) loss " +
                        std::to_string(loss));
      }
      tape.backward(total);
      tape.accumulate(store);
      if (!std::isfinite(grad_norm(store))) {
        throw Error(ErrorCode::NonFiniteLoss, "non-finite gradient in epoch " + std::to_string(epoch) +
                                                  " batch " + std::to_string(start / cfg.batch_size));
      }
      clip_grad_norm(store, cfg.clip_norm);
      opt.step(store);
      res.step_loss.push_back(loss);
      epoch_sum += loss;
      ++epoch_steps;
    }
    res.epoch_loss.push_back(epoch_sum / static_cast<double>(epoch_steps));
    if (log) log->note("epoch " + std::to_string(epoch + 1) + " train loss " + std::to_string(res.epoch_loss.back()));
  }
  store.zero_grad();
  res.steps = opt.steps();
  return res;
}

Metrics score(const std::vector<std::vector<double>>& preds,
              const std::vector<std::vector<double>>& targets) {
  if (preds.size() != targets.size()) throw Error(ErrorCode::LengthMismatch, "prediction/target count differs");
  Metrics r;
  double se = 0.0, ae = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].size() != targets[i].size()) throw Error(ErrorCode::LengthMismatch, "prediction length differs");
    for (std::size_t k = 0; k < preds[i].size(); ++k) {
      const double d = preds[i][k] - targets[i][k];
      se += d * d;
      ae += std::abs(d);
      ++r.count;
    }
  }
  if (r.count) {
    r.mse = se / static_cast<double>(r.count);
    r.mae = ae / static_cast<double>(r.count);
  }
  return r;
}

std::vector<std::vector<double>> predict_all(const model::Model& m, const std::vector<Sample>& samples,
                                             const prompt::PromptMask& mask) {
  std::map<std::string, ag::Mat> eos_cache;
  std::vector<std::vector<double>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    ag::Tape tape(false);
    PromptEncoder enc(m, &eos_cache);
    const ag::Mat p = m.predict(tape, s.input, enc.rows(tape, s, mask)).value();
    out.emplace_back(p.data(), p.data() + p.size());
  }
  return out;
}

Metrics evaluate(const model::Model& m, const std::vector<Sample>& samples,
                 const prompt::PromptMask& mask, bool denormalized) {
  auto preds = predict_all(m, samples, mask);
  std::vector<std::vector<double>> targets;
  targets.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (denormalized) {
      preds[i] = core::denormalize(preds[i], samples[i].norm);
      targets.push_back(core::denormalize(samples[i].target, samples[i].norm));
    } else {
      targets.push_back(samples[i].target);
    }
  }
  return score(preds, targets);
}

std::uint64_t derive_seed(std::uint64_t base, std::size_t run) {
  // splitmix64 step
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (static_cast<std::uint64_t>(run) + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

RepeatReport aggregate(const std::vector<Metrics>& runs) {
  if (runs.empty()) throw Error(ErrorCode::InvalidArgument, "no runs to aggregate");
  RepeatReport r;
  r.runs = runs;
  r.best = runs.front();
  for (const auto& m : runs) {
    r.mean.mse += m.mse;
    r.mean.mae += m.mae;
    r.mean.count += m.count;
    r.best.mse = std::min(r.best.mse, m.mse);
    r.best.mae = std::min(r.best.mae, m.mae);
  }
  r.mean.mse /= static_cast<double>(runs.size());
  r.mean.mae /= static_cast<double>(runs.size());
  r.mean.count /= runs.size();
  return r;
}

RepeatReport repeat_runs(const std::function<Metrics(std::uint64_t seed)>& run, std::uint64_t base_seed,
                         std::size_t n_runs) {
  if (n_runs < 1) throw Error(ErrorCode::InvalidArgument, "n_runs must be at least 1");
  std::vector<Metrics> runs;
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < n_runs; ++i) {
    seeds.push_back(n_runs == 1 ? base_seed : derive_seed(base_seed, i));
    runs.push_back(run(seeds.back()));
  }
  RepeatReport r = aggregate(runs);
  r.seeds = std::move(seeds);
  return r;
}

void write_trace_csv(const std::vector<TraceRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path);
  out << "run_id,dataset,horizon,mask,variant,step,metric,value\n";
  out.precision(17);
  for (const auto& r : rows) {
    out << r.run_id << ',' << r.dataset << ',' << r.horizon << ',' << r.mask << ',' << r.variant << ','
        << r.step << ',' << r.metric << ',' << r.value << '\n';
  }
}

}  // namespace map4ts::train
