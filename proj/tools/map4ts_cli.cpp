// map4ts command line front end. Talks to the library only through map4ts.h.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "map4ts/map4ts.h"

namespace {

struct Failure {
  map4ts_status status;
};

void check(map4ts_status s) {
  if (s != MAP4TS_OK) throw Failure{s};
}

std::string take(char* s) {
  std::string out = s ? s : "";
  map4ts_string_free(s);
  return out;
}

std::string quoted(const std::string& s) {
  std::string q = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') q += '\\';
    q += c;
  }
  return q + "\"";
}

struct Table {
  map4ts_table* t = nullptr;
  ~Table() { map4ts_table_free(t); }
};

struct Options {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string output_dir;
  std::string mask, variant, encoder, prompt_variant;
  int epochs = 0, batch_size = 0, n_runs = 0, parallelism = 0;
  double lr = -1.0;
  bool wte = false;
  std::vector<std::string> sets;  // key=json
  std::string dataset, checkpoint, source, targets, input, format = "markdown", out;
  std::size_t channel = 0;
  long attention = -1;
};

std::string out_dir(map4ts_config* cfg) {
  char* j = nullptr;
  check(map4ts_config_to_json(cfg, &j));
  const std::string text = take(j);
  const auto k = text.find("\"output_dir\"");
  if (k == std::string::npos) return "map4ts_out";
  const auto a = text.find('"', text.find(':', k) + 1);
  const auto b = text.find('"', a + 1);
  return text.substr(a + 1, b - a - 1);
}

map4ts_config* load_config(const Options& o) {
  if (o.config.empty()) {
    std::fprintf(stderr, "error: --config is required\n");
    throw Failure{MAP4TS_INVALID_CONFIG};
  }
  map4ts_config* cfg = nullptr;
  check(map4ts_config_load(o.config.c_str(), &cfg));
  auto set = [&](const std::string& key, const std::string& value) {
    if (map4ts_config_override(cfg, key.c_str(), value.c_str()) != MAP4TS_OK) {
      std::fprintf(stderr, "error: override %s: %s\n", key.c_str(), map4ts_last_error());
      map4ts_config_free(cfg);
      throw Failure{MAP4TS_INVALID_CONFIG};
    }
  };
  if (o.seed_set) check(map4ts_config_set_seed(cfg, o.seed));
  if (!o.output_dir.empty()) check(map4ts_config_set_output_dir(cfg, o.output_dir.c_str()));
  if (!o.mask.empty()) set("masks", "[" + quoted(o.mask) + "]");
  if (!o.variant.empty()) {
    set("variants", "[" + quoted(o.variant) + "]");
    set("model.variant", quoted(o.variant));
  }
  if (!o.encoder.empty()) {
    set("encoders", "[" + quoted(o.encoder) + "]");
    set("model.encoder", quoted(o.encoder));
  }
  if (!o.prompt_variant.empty()) set("prompts.variant", quoted(o.prompt_variant));
  if (o.epochs > 0) set("train.epochs", std::to_string(o.epochs));
  if (o.batch_size > 0) set("train.batch_size", std::to_string(o.batch_size));
  if (o.lr >= 0.0) set("train.lr", std::to_string(o.lr));
  if (o.n_runs > 0) set("n_runs", std::to_string(o.n_runs));
  if (o.parallelism > 0) set("parallelism", std::to_string(o.parallelism));
  if (o.wte) set("model.wte_baseline", "true");
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "error: --set expects key=value, got '%s'\n", kv.c_str());
      map4ts_config_free(cfg);
      throw Failure{MAP4TS_INVALID_ARGUMENT};
    }
    set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

struct Session {
  map4ts_config* cfg = nullptr;
  map4ts_experiment* exp = nullptr;
  std::string dir;

  explicit Session(const Options& o) {
    cfg = load_config(o);
    dir = out_dir(cfg);
    map4ts_status s = map4ts_experiment_create(cfg, &exp);
    if (s != MAP4TS_OK) {
      map4ts_config_free(cfg);
      throw Failure{s};
    }
  }
  ~Session() {
    if (exp) {
      char* log = nullptr;
      if (map4ts_experiment_log(exp, &log) == MAP4TS_OK) std::cerr << take(log);
    }
    map4ts_experiment_free(exp);
    map4ts_config_free(cfg);
  }
  std::string path(const std::string& name) const { return (std::filesystem::path(dir) / name).string(); }
};

void emit_all(const map4ts_table* t, const std::string& base) {
  check(map4ts_table_emit(t, "csv", (base + ".csv").c_str()));
  check(map4ts_table_emit(t, "markdown", (base + ".md").c_str()));
  check(map4ts_table_emit(t, "plot-data", (base + ".dat").c_str()));
  char* md = nullptr;
  check(map4ts_table_render(t, "markdown", &md));
  std::cout << take(md);
}

std::string need_dataset(const Options& o) {
  if (o.dataset.empty()) {
    std::fprintf(stderr, "error: --dataset is required\n");
    throw Failure{MAP4TS_INVALID_ARGUMENT};
  }
  return o.dataset;
}

int run(const std::string& verb, const Options& o) {
  if (verb == "report") {
    if (o.input.empty()) {
      std::fprintf(stderr, "error: --input is required\n");
      return 1;
    }
    Table t;
    check(map4ts_table_read_csv(o.input.c_str(), &t.t));
    if (!o.out.empty()) {
      check(map4ts_table_emit(t.t, o.format.c_str(), o.out.c_str()));
    } else {
      char* s = nullptr;
      check(map4ts_table_render(t.t, o.format.c_str(), &s));
      std::cout << take(s);
    }
    return 0;
  }
  Session s(o);
  if (verb == "ingest") {
    char* j = nullptr;
    check(map4ts_experiment_summary(s.exp, &j));
    std::cout << take(j) << "\n";
  } else if (verb == "build-index") {
    const std::string ds = need_dataset(o);
    const std::string stem = s.path("index/" + ds + "_" + std::to_string(o.channel));
    check(map4ts_experiment_save_index(s.exp, ds.c_str(), o.channel, (stem + ".idx").c_str(),
                                       (stem + "_prompts.jsonl").c_str()));
    std::cout << stem << ".idx\n" << stem << "_prompts.jsonl\n";
  } else if (verb == "build-prompts") {
    const std::string p = o.out.empty() ? s.path("prompts.jsonl") : o.out;
    check(map4ts_experiment_dump_prompts(s.exp, p.c_str()));
    std::cout << p << "\n";
  } else if (verb == "train") {
    const std::string ds = need_dataset(o);
    const std::string ckpt = o.checkpoint.empty() ? s.path(ds + ".ckpt") : o.checkpoint;
    const std::string trace = s.path(ds + "_trace.csv");
    check(map4ts_train(s.exp, ds.c_str(), ckpt.c_str(), trace.c_str()));
    std::cout << ckpt << "\n" << trace << "\n";
  } else if (verb == "eval") {
    const std::string ds = need_dataset(o);
    const std::string ckpt = o.checkpoint.empty() ? s.path(ds + ".ckpt") : o.checkpoint;
    Table t;
    check(map4ts_eval(s.exp, ds.c_str(), ckpt.c_str(), &t.t));
    emit_all(t.t, s.path(ds + "_eval"));
    if (o.attention >= 0) {
      char* a = nullptr;
      check(map4ts_attention(s.exp, ds.c_str(), ckpt.c_str(), static_cast<std::size_t>(o.attention), &a));
      const std::string text = take(a);
      const std::string p = s.path(ds + "_attention.txt");
      std::ofstream f(p);
      if (!(f << text)) throw Failure{MAP4TS_IO_FAILURE};
      std::cout << text;
    }
  } else if (verb == "ablate-prompts" || verb == "ablate-align" || verb == "ablate-encoder") {
    const map4ts_sweep kind = verb == "ablate-prompts" ? MAP4TS_SWEEP_PROMPTS
                              : verb == "ablate-align" ? MAP4TS_SWEEP_ALIGN
                                                       : MAP4TS_SWEEP_ENCODER;
    std::string base = verb;
    for (auto& c : base) c = c == '-' ? '_' : c;
    Table t;
    check(map4ts_sweep_run(s.exp, kind, s.path(base + "_cells.jsonl").c_str(), &t.t));
    emit_all(t.t, s.path(base));
  } else if (verb == "zero-shot") {
    if (o.source.empty() || o.targets.empty()) {
      std::fprintf(stderr, "error: --source and --targets are required\n");
      return 1;
    }
    Table t;
    check(map4ts_zero_shot(s.exp, o.source.c_str(), o.targets.c_str(), &t.t));
    emit_all(t.t, s.path("zero_shot_" + o.source));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-aspect prompting for time-series forecasting"};
  app.require_subcommand(1);
  Options o;
  const std::map<std::string, std::string> verbs = {
      {"ingest", "Load datasets and print split and window counts"},
      {"build-index", "Write a channel's cluster index and descriptions"},
      {"build-prompts", "Write every window's prompts as JSON lines"},
      {"train", "Train the configured cell and save a checkpoint"},
      {"eval", "Score a checkpoint on the test split"},
      {"ablate-prompts", "Run all 16 prompt combinations"},
      {"ablate-align", "Run the four alignment variants"},
      {"ablate-encoder", "Run single, dual-frozen and dual-trainable text encoders"},
      {"zero-shot", "Train on a source dataset and score target datasets"},
      {"report", "Render a results CSV as csv, markdown or plot-data"},
  };
  for (const auto& [name, help] : verbs) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "Experiment config (JSON)");
    sub->add_option("--seed", o.seed, "Override the base seed")->each([&](const std::string&) { o.seed_set = true; });
    sub->add_option("--output-dir", o.output_dir, "Override the output directory");
    sub->add_option("--mask", o.mask, "Prompt mask, e.g. 1111 or G+S");
    sub->add_option("--variant", o.variant, "Alignment variant");
    sub->add_option("--encoder", o.encoder, "Text encoder mode");
    sub->add_option("--prompt-variant", o.prompt_variant, "minimal or verbose");
    sub->add_option("--epochs", o.epochs);
    sub->add_option("--batch-size", o.batch_size);
    sub->add_option("--lr", o.lr);
    sub->add_option("--n-runs", o.n_runs);
    sub->add_option("--parallelism", o.parallelism);
    sub->add_flag("--wte-baseline", o.wte, "Use token-prototype queries instead of prompts");
    sub->add_option("--set", o.sets, "Override any config field: key.path=json");
    sub->add_option("--dataset", o.dataset);
    sub->add_option("--channel", o.channel);
    sub->add_option("--checkpoint", o.checkpoint);
    sub->add_option("--attention", o.attention, "Also dump attention for this test window");
    sub->add_option("--source", o.source);
    sub->add_option("--targets", o.targets, "Comma separated target datasets");
    sub->add_option("--input", o.input, "Results CSV (report)");
    sub->add_option("--format", o.format, "csv, markdown or plot-data (report)");
    sub->add_option("--out", o.out, "Output file");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  const std::string verb = app.get_subcommands().front()->get_name();
  try {
    return run(verb, o);
  } catch (const Failure& f) {
    const char* msg = map4ts_last_error();
    if (msg && *msg) std::fprintf(stderr, "error: %s\n", msg);
    return map4ts_status_category(f.status) == 1 ? 1 : 2;
  }
}
