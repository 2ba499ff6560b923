#include "map4ts/map4ts.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>

#include "json.hpp"
#include "map4ts/error.hpp"
#include "map4ts/experiment.hpp"

using map4ts::Error;
using map4ts::ErrorCode;
using nlohmann::json;
namespace mx = map4ts::exp;
namespace fs = std::filesystem;

struct map4ts_config {
  mx::ExperimentConfig cfg;
};

struct map4ts_experiment {
  std::unique_ptr<mx::Experiment> e;
};

struct map4ts_table {
  mx::ResultTable t;
};

static_assert(static_cast<int>(ErrorCode::FormatError) + 1 == MAP4TS_FORMAT_ERROR);
static_assert(static_cast<int>(ErrorCode::InvalidCard) + 1 == MAP4TS_INVALID_CARD);

namespace {

thread_local std::string g_last_error;

map4ts_status fail(map4ts_status s, std::string msg) {
  g_last_error = std::move(msg);
  return s;
}

template <class F>
map4ts_status guard(F&& f) {
  try {
    f();
    g_last_error.clear();
    return MAP4TS_OK;
  } catch (const Error& e) {
    return fail(static_cast<map4ts_status>(static_cast<int>(e.code()) + 1), e.what());
  } catch (const std::bad_alloc&) {
    return fail(MAP4TS_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(MAP4TS_INTERNAL, e.what());
  }
}

char* dup(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (!p) throw std::bad_alloc();
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

void need(const void* p, const char* what) {
  if (!p) throw Error(ErrorCode::InvalidArgument, std::string(what) + " is null");
}

mx::CellSpec default_cell(const mx::Experiment& e, const std::string& dataset) {
  mx::CellSpec c;
  c.dataset = dataset;
  c.mask = e.cfg.masks.front();
  c.variant = e.cfg.variants.front();
  c.encoder = e.cfg.encoders.front();
  c.wte_baseline = e.cfg.model.wte_baseline;
  c.seed = e.cfg.seed;
  return c;
}

map4ts::model::Model load_checked(const mx::Experiment& e, const mx::PreparedDataset& d, const char* path) {
  auto m = map4ts::model::Model::load(std::string(path));
  if (m.config().backbone.vocab_size != e.tokenizer->vocab_size()) {
    throw Error(ErrorCode::InvalidConfig, "checkpoint vocabulary (" + std::to_string(m.config().backbone.vocab_size) +
                                              ") differs from the tokenizer (" +
                                              std::to_string(e.tokenizer->vocab_size()) + ")");
  }
  if (m.config().input_len != d.task.input_len || m.config().horizon != d.task.horizon) {
    throw Error(ErrorCode::ShapeMismatch, "checkpoint task shape differs from dataset '" + d.spec.name + "'");
  }
  return m;
}

void ensure_parent(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) {
    std::error_code ec;
    fs::create_directories(parent, ec);
    if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + parent.string() + ": " + ec.message());
  }
}

}  // namespace

extern "C" {

int map4ts_status_category(map4ts_status s) {
  if (s == MAP4TS_OK) return 0;
  if (s >= MAP4TS_INVALID_ARGUMENT && s <= MAP4TS_FORMAT_ERROR) {
    return map4ts::is_validation(static_cast<ErrorCode>(static_cast<int>(s) - 1)) ? 1 : 2;
  }
  return 2;
}

const char* map4ts_status_name(map4ts_status s) {
  if (s == MAP4TS_OK) return "Ok";
  if (s >= MAP4TS_INVALID_ARGUMENT && s <= MAP4TS_FORMAT_ERROR) {
    return map4ts::to_string(static_cast<ErrorCode>(static_cast<int>(s) - 1));
  }
  return "Internal";
}

const char* map4ts_last_error(void) { return g_last_error.c_str(); }

const char* map4ts_version(void) { return "0.1.0"; }

void map4ts_string_free(char* s) { std::free(s); }

map4ts_status map4ts_config_load(const char* path, map4ts_config** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = new map4ts_config{mx::ExperimentConfig::load(path)};
  });
}

map4ts_status map4ts_config_parse(const char* text, const char* base_dir, map4ts_config** out) {
  return guard([&] {
    need(text, "json");
    need(out, "out");
    *out = new map4ts_config{mx::ExperimentConfig::from_json(text, base_dir ? base_dir : ".")};
  });
}

map4ts_status map4ts_config_set_seed(map4ts_config* cfg, uint64_t seed) {
  return guard([&] {
    need(cfg, "config");
    cfg->cfg.seed = seed;
  });
}

map4ts_status map4ts_config_set_output_dir(map4ts_config* cfg, const char* dir) {
  return guard([&] {
    need(cfg, "config");
    need(dir, "dir");
    cfg->cfg.output_dir = dir;
  });
}

map4ts_status map4ts_config_override(map4ts_config* cfg, const char* key, const char* json_value) {
  return guard([&] {
    need(cfg, "config");
    need(key, "key");
    need(json_value, "value");
    json doc = json::parse(cfg->cfg.to_json());
    json value;
    try {
      value = json::parse(json_value);
    } catch (const json::exception&) {
      value = std::string(json_value);  // bare words are strings
    }
    json* node = &doc;
    std::stringstream ss(key);
    std::vector<std::string> parts;
    for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
    if (parts.empty()) throw Error(ErrorCode::InvalidConfig, "empty override key");
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      if (!node->is_object()) throw Error(ErrorCode::InvalidConfig, std::string("cannot override ") + key);
      node = &(*node)[parts[i]];
      if (node->is_null()) *node = json::object();
    }
    (*node)[parts.back()] = std::move(value);
    cfg->cfg = mx::ExperimentConfig::from_json(doc.dump(), ".");
  });
}

map4ts_status map4ts_config_to_json(const map4ts_config* cfg, char** out) {
  return guard([&] {
    need(cfg, "config");
    need(out, "out");
    *out = dup(cfg->cfg.to_json());
  });
}

void map4ts_config_free(map4ts_config* cfg) { delete cfg; }

map4ts_status map4ts_experiment_create(const map4ts_config* cfg, map4ts_experiment** out) {
  return guard([&] {
    need(cfg, "config");
    need(out, "out");
    *out = new map4ts_experiment{std::make_unique<mx::Experiment>(cfg->cfg)};
  });
}

void map4ts_experiment_free(map4ts_experiment* e) { delete e; }

map4ts_status map4ts_experiment_log(const map4ts_experiment* e, char** out) {
  return guard([&] {
    need(e, "experiment");
    need(out, "out");
    std::string s;
    for (const auto& l : e->e->log.lines()) s += l + "\n";
    *out = dup(s);
  });
}

map4ts_status map4ts_experiment_summary(const map4ts_experiment* e, char** out) {
  return guard([&] {
    need(e, "experiment");
    need(out, "out");
    json ds = json::array();
    for (const auto& d : e->e->data) {
      json chans = json::array();
      for (const auto& c : d.channels) {
        chans.push_back({{"name", c.series.name},
                         {"length", c.series.size()},
                         {"frequency", map4ts::core::to_string(c.series.frequency)},
                         {"train_end", c.splits.bounds.train_end},
                         {"val_end", c.splits.bounds.val_end},
                         {"windows", {c.splits.train.size(), c.splits.val.size(), c.splits.test.size()}}});
      }
      json scales = json::array();
      for (const auto& p : d.configs) {
        scales.push_back({{"scale", p.scale_name}, {"patch_size", p.patch_size},
                          {"window_size", p.window_size}, {"data_points", p.data_points}});
      }
      ds.push_back({{"name", d.spec.name},
                    {"group", d.spec.group},
                    {"input_len", d.task.input_len},
                    {"horizon", d.task.horizon},
                    {"channels", chans},
                    {"scales", scales},
                    {"samples", {d.train.size(), d.val.size(), d.test.size()}},
                    {"max_prompt_tokens", d.max_prompt_tokens},
                    {"card_hash", d.card.hash()}});
    }
    json j = {{"tokenizer", e->e->tokenizer->name()},
              {"vocab_size", e->e->tokenizer->vocab_size()},
              {"datasets", ds}};
    *out = dup(j.dump(2));
  });
}

map4ts_status map4ts_experiment_save_index(const map4ts_experiment* e, const char* dataset, size_t channel,
                                           const char* index_path, const char* prompt_cache_path) {
  return guard([&] {
    need(e, "experiment");
    need(dataset, "dataset");
    const auto& d = e->e->dataset(dataset);
    if (channel >= d.channels.size()) throw Error(ErrorCode::InvalidArgument, "channel out of range");
    if (index_path) {
      ensure_parent(index_path);
      map4ts::patch::save_index(d.channels[channel].index, std::string(index_path));
    }
    if (prompt_cache_path) {
      ensure_parent(prompt_cache_path);
      map4ts::prompt::save_prompt_cache(d.channels[channel].index, prompt_cache_path);
    }
  });
}

map4ts_status map4ts_experiment_dump_prompts(const map4ts_experiment* e, const char* path) {
  return guard([&] {
    need(e, "experiment");
    need(path, "path");
    ensure_parent(path);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoFailure, std::string("cannot write ") + path);
    for (const auto& d : e->e->data) {
      const std::pair<const char*, const std::vector<map4ts::train::Sample>*> splits[] = {
          {"train", &d.train}, {"val", &d.val}, {"test", &d.test}};
      for (const auto& [name, samples] : splits) {
        for (const auto& s : *samples) {
          json texts = json::array(), counts = json::array();
          for (std::size_t a = 0; a < 4; ++a) {
            texts.push_back(s.text[a]);
            counts.push_back(s.tokens[a].size());
          }
          out << json{{"dataset", d.spec.name}, {"split", name},   {"channel", s.channel},
                      {"start", s.window_start}, {"text", texts}, {"tokens", counts}}
                     .dump()
              << "\n";
        }
      }
    }
    if (!out) throw Error(ErrorCode::IoFailure, std::string("write failed for ") + path);
  });
}

map4ts_status map4ts_train(map4ts_experiment* e, const char* dataset, const char* checkpoint_path,
                           const char* trace_csv) {
  return guard([&] {
    need(e, "experiment");
    need(dataset, "dataset");
    need(checkpoint_path, "checkpoint path");
    auto& ex = *e->e;
    const auto& d = ex.dataset(dataset);
    const auto cell = default_cell(ex, dataset);
    auto trained = mx::train_cell(d, ex.cfg, cell, ex.tokenizer->vocab_size(), cell.seed, &ex.log);
    ensure_parent(checkpoint_path);
    trained.model.save(std::string(checkpoint_path));
    if (trace_csv) {
      std::vector<map4ts::train::TraceRow> rows;
      const std::string run_id = d.spec.name + "-" + cell.mask.bits() + "-" + std::to_string(cell.seed);
      for (std::size_t i = 0; i < trained.trace.step_loss.size(); ++i) {
        rows.push_back({run_id, d.spec.name, d.task.horizon, cell.mask.bits(),
                        map4ts::model::to_string(cell.variant), i + 1, "train_mse", trained.trace.step_loss[i]});
      }
      for (std::size_t i = 0; i < trained.trace.epoch_loss.size(); ++i) {
        rows.push_back({run_id, d.spec.name, d.task.horizon, cell.mask.bits(),
                        map4ts::model::to_string(cell.variant), i + 1, "epoch_mse", trained.trace.epoch_loss[i]});
      }
      ensure_parent(trace_csv);
      map4ts::train::write_trace_csv(rows, trace_csv);
    }
  });
}

map4ts_status map4ts_eval(map4ts_experiment* e, const char* dataset, const char* checkpoint_path,
                          map4ts_table** out) {
  return guard([&] {
    need(e, "experiment");
    need(dataset, "dataset");
    need(checkpoint_path, "checkpoint path");
    need(out, "out");
    auto& ex = *e->e;
    const auto& d = ex.dataset(dataset);
    const auto m = load_checked(ex, d, checkpoint_path);
    const auto mask = ex.cfg.masks.front();
    const auto r = map4ts::train::evaluate(m, d.test, mask, ex.cfg.denormalized_metrics);
    mx::ResultTable t;
    t.columns = {"dataset", "mask", "MSE", "MAE", "count"};
    t.rows.push_back({d.spec.name, mask.label(), mx::format_metric(r.mse), mx::format_metric(r.mae),
                      std::to_string(r.count)});
    *out = new map4ts_table{std::move(t)};
  });
}

map4ts_status map4ts_attention(map4ts_experiment* e, const char* dataset, const char* checkpoint_path,
                               size_t test_window, char** out) {
  return guard([&] {
    need(e, "experiment");
    need(dataset, "dataset");
    need(checkpoint_path, "checkpoint path");
    need(out, "out");
    auto& ex = *e->e;
    const auto& d = ex.dataset(dataset);
    if (test_window >= d.test.size()) throw Error(ErrorCode::InvalidArgument, "test window out of range");
    const auto m = load_checked(ex, d, checkpoint_path);
    const auto& s = d.test[test_window];
    map4ts::ag::Tape tape(false);
    map4ts::train::PromptEncoder enc(m);
    const auto rows = enc.rows(tape, s, ex.cfg.masks.front());
    map4ts::model::RunContext ctx;
    ctx.record_attention = true;
    m.attention_probe(tape, rows, m.embed_series(tape, s.input), ctx);
    *out = dup(mx::render_attention(map4ts::model::export_attention(ctx)));
  });
}

map4ts_status map4ts_sweep_run(map4ts_experiment* e, map4ts_sweep kind, const char* records_path,
                               map4ts_table** out) {
  return guard([&] {
    need(e, "experiment");
    need(out, "out");
    auto& ex = *e->e;
    mx::SweepOutput r;
    switch (kind) {
      case MAP4TS_SWEEP_PROMPTS: r = mx::run_ablation_prompts(ex); break;
      case MAP4TS_SWEEP_ALIGN: r = mx::run_alignment_ablation(ex); break;
      case MAP4TS_SWEEP_ENCODER: r = mx::run_encoder_ablation(ex); break;
      default: throw Error(ErrorCode::InvalidArgument, "unknown sweep kind");
    }
    if (records_path) {
      ensure_parent(records_path);
      std::ofstream f(records_path, std::ios::binary);
      if (!f) throw Error(ErrorCode::IoFailure, std::string("cannot write ") + records_path);
      for (const auto& c : r.cells) f << mx::cell_record(c, ex.cfg) << "\n";
    }
    *out = new map4ts_table{std::move(r.table)};
  });
}

map4ts_status map4ts_zero_shot(map4ts_experiment* e, const char* source, const char* targets,
                               map4ts_table** out) {
  return guard([&] {
    need(e, "experiment");
    need(source, "source");
    need(targets, "targets");
    need(out, "out");
    std::vector<std::string> names;
    std::stringstream ss(targets);
    for (std::string t; std::getline(ss, t, ',');) {
      if (!t.empty()) names.push_back(t);
    }
    if (names.empty()) throw Error(ErrorCode::InvalidArgument, "no target datasets");
    auto r = mx::run_zero_shot(*e->e, source, names);
    *out = new map4ts_table{std::move(r.table)};
  });
}

map4ts_status map4ts_table_read_csv(const char* path, map4ts_table** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = new map4ts_table{mx::read_csv_table(path)};
  });
}

map4ts_status map4ts_table_render(const map4ts_table* t, const char* format, char** out) {
  return guard([&] {
    need(t, "table");
    need(format, "format");
    need(out, "out");
    *out = dup(mx::render(t->t, mx::parse_report_format(format)));
  });
}

map4ts_status map4ts_table_emit(const map4ts_table* t, const char* format, const char* path) {
  return guard([&] {
    need(t, "table");
    need(format, "format");
    need(path, "path");
    const auto f = mx::parse_report_format(format);
    if (!t->t.rows.empty()) ensure_parent(path);
    mx::emit_report(t->t, f, path);
  });
}

size_t map4ts_table_rows(const map4ts_table* t) { return t ? t->t.rows.size() : 0; }

size_t map4ts_table_cols(const map4ts_table* t) { return t ? t->t.columns.size() : 0; }

const char* map4ts_table_cell(const map4ts_table* t, size_t row, size_t col) {
  if (!t || col >= t->t.columns.size()) return nullptr;
  if (row == SIZE_MAX) return t->t.columns[col].c_str();
  if (row >= t->t.rows.size() || col >= t->t.rows[row].size()) return nullptr;
  return t->t.rows[row][col].c_str();
}

void map4ts_table_free(map4ts_table* t) { delete t; }

}  // extern "C"
