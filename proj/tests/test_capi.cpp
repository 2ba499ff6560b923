#include <sys/wait.h>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "map4ts/map4ts.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kConfig = R"({
  "seed": 2,
  "task": {"input_len": 48, "horizon": 12},
  "train": {"lr": 0.002, "batch_size": 8, "epochs": 1},
  "windows": {"train_stride": 24, "max_train": 16, "eval_stride": 24, "max_eval": 8},
  "model": {"d_model": 8, "n_layers": 2, "n_heads": 2, "context_limit": 512, "align_heads": 2, "lora_rank": 2},
  "prompts": {"variant": "minimal", "clusters": 3},
  "masks": ["1011"],
  "datasets": [
    {"name": "A", "group": "LT", "synthetic": {"kind": "ar1", "length": 1500, "seed": 1}},
    {"name": "B", "group": "ST", "synthetic": {"kind": "sine", "length": 1300, "seed": 2}}
  ]
})";

fs::path workdir() {
  static const fs::path p = [] {
    auto d = fs::temp_directory_path() / "map4ts_capi";
    fs::remove_all(d);
    fs::create_directories(d);
    std::ofstream(d / "cfg.json") << kConfig;
    std::ofstream(d / "bad.json") << "{\"datasets\": []}";
    return d;
  }();
  return p;
}

std::string take(char* s) {
  std::string out = s ? s : "";
  map4ts_string_free(s);
  return out;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(MAP4TS_CLI) + " " + args + " >" + (workdir() / "stdout.txt").string() +
                          " 2>" + (workdir() / "stderr.txt").string();
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("status codes") {
  CHECK(map4ts_status_category(MAP4TS_OK) == 0);
  CHECK(map4ts_status_category(MAP4TS_INVALID_CONFIG) == 1);
  CHECK(map4ts_status_category(MAP4TS_PROMPT_TOO_LONG) == 1);
  CHECK(map4ts_status_category(MAP4TS_IO_FAILURE) == 2);
  CHECK(map4ts_status_category(MAP4TS_INTERNAL) == 2);
  CHECK(std::string(map4ts_status_name(MAP4TS_SHAPE_MISMATCH)) == "ShapeMismatch");
  CHECK(std::string(map4ts_version()).size() > 0);
}

TEST_CASE("config handling") {
  map4ts_config* cfg = nullptr;
  REQUIRE(map4ts_config_parse(kConfig, workdir().c_str(), &cfg) == MAP4TS_OK);
  CHECK(map4ts_config_override(cfg, "train.epochs", "3") == MAP4TS_OK);
  CHECK(map4ts_config_override(cfg, "prompts.variant", "verbose") == MAP4TS_OK);
  CHECK(map4ts_config_set_seed(cfg, 99) == MAP4TS_OK);
  char* text = nullptr;
  REQUIRE(map4ts_config_to_json(cfg, &text) == MAP4TS_OK);
  const auto j = json::parse(take(text));
  CHECK(j.at("train").at("epochs") == 3);
  CHECK(j.at("prompts").at("variant") == "verbose");
  CHECK(j.at("seed") == 99);
  CHECK(map4ts_config_override(cfg, "train.epochs", "0") == MAP4TS_INVALID_CONFIG);
  CHECK(std::string(map4ts_last_error()).find("epoch") != std::string::npos);
  map4ts_config_free(cfg);

  map4ts_config* bad = nullptr;
  CHECK(map4ts_config_parse("{oops", ".", &bad) == MAP4TS_INVALID_CONFIG);
  CHECK(bad == nullptr);
  CHECK(map4ts_config_load((workdir() / "bad.json").c_str(), &bad) == MAP4TS_INVALID_CONFIG);
  CHECK(map4ts_config_load("/nonexistent.json", &bad) != MAP4TS_OK);
  CHECK(map4ts_config_parse(nullptr, ".", &bad) == MAP4TS_INVALID_ARGUMENT);
}

TEST_CASE("experiment lifecycle through the C interface") {
  map4ts_config* cfg = nullptr;
  REQUIRE(map4ts_config_parse(kConfig, workdir().c_str(), &cfg) == MAP4TS_OK);
  map4ts_experiment* e = nullptr;
  REQUIRE(map4ts_experiment_create(cfg, &e) == MAP4TS_OK);
  map4ts_config_free(cfg);

  char* summary = nullptr;
  REQUIRE(map4ts_experiment_summary(e, &summary) == MAP4TS_OK);
  CHECK(take(summary).find("\"A\"") != std::string::npos);

  const auto ckpt = (workdir() / "A.ckpt").string();
  const auto trace = (workdir() / "A_trace.csv").string();
  REQUIRE(map4ts_train(e, "A", ckpt.c_str(), trace.c_str()) == MAP4TS_OK);
  CHECK(fs::exists(ckpt));
  CHECK(slurp(trace).rfind("run_id,dataset,horizon,mask,variant,step,metric,value", 0) == 0);

  map4ts_table* t = nullptr;
  REQUIRE(map4ts_eval(e, "A", ckpt.c_str(), &t) == MAP4TS_OK);
  CHECK(map4ts_table_rows(t) == 1);
  CHECK(std::string(map4ts_table_cell(t, SIZE_MAX, 0)) == "dataset");
  CHECK(map4ts_table_cell(t, 5, 0) == nullptr);
  char* md = nullptr;
  REQUIRE(map4ts_table_render(t, "markdown", &md) == MAP4TS_OK);
  CHECK(take(md).find("| A |") != std::string::npos);
  CHECK(map4ts_table_render(t, "xml", &md) == MAP4TS_INVALID_ARGUMENT);
  map4ts_table_free(t);

  char* att = nullptr;
  REQUIRE(map4ts_attention(e, "A", ckpt.c_str(), 0, &att) == MAP4TS_OK);
  CHECK(take(att).find("# layer 1") != std::string::npos);
  CHECK(map4ts_attention(e, "A", ckpt.c_str(), 100000, &att) == MAP4TS_INVALID_ARGUMENT);

  CHECK(map4ts_eval(e, "A", "/nonexistent.ckpt", &t) == MAP4TS_IO_FAILURE);
  CHECK(map4ts_eval(e, "Z", ckpt.c_str(), &t) != MAP4TS_OK);

  const auto records = (workdir() / "cells.jsonl").string();
  REQUIRE(map4ts_sweep_run(e, MAP4TS_SWEEP_ALIGN, records.c_str(), &t) == MAP4TS_OK);
  CHECK(map4ts_table_rows(t) == 4);
  const auto csv = (workdir() / "align.csv").string();
  REQUIRE(map4ts_table_emit(t, "csv", csv.c_str()) == MAP4TS_OK);
  map4ts_table* back = nullptr;
  REQUIRE(map4ts_table_read_csv(csv.c_str(), &back) == MAP4TS_OK);
  CHECK(map4ts_table_rows(back) == map4ts_table_rows(t));
  CHECK(map4ts_table_cols(back) == map4ts_table_cols(t));
  map4ts_table_free(back);
  map4ts_table_free(t);
  std::ifstream rec(records);
  std::string line;
  std::size_t n = 0;
  while (std::getline(rec, line)) n += json::parse(line).at("ok").get<bool>();
  CHECK(n == 8);

  REQUIRE(map4ts_zero_shot(e, "A", "B", &t) == MAP4TS_OK);
  CHECK(map4ts_table_rows(t) == 1);
  CHECK(std::string(map4ts_table_cell(t, 0, 4)) == "yes");
  map4ts_table_free(t);

  REQUIRE(map4ts_experiment_dump_prompts(e, (workdir() / "prompts.jsonl").c_str()) == MAP4TS_OK);
  REQUIRE(map4ts_experiment_save_index(e, "A", 0, (workdir() / "a.idx").c_str(),
                                       (workdir() / "a_prompts.jsonl").c_str()) == MAP4TS_OK);
  CHECK(map4ts_experiment_save_index(e, "A", 3, (workdir() / "x.idx").c_str(), nullptr) ==
        MAP4TS_INVALID_ARGUMENT);
  map4ts_experiment_free(e);
}

TEST_CASE("command line exit codes") {
  const std::string cfg = "--config " + (workdir() / "cfg.json").string() + " --output-dir " +
                          (workdir() / "out").string();
  CHECK(cli("ingest " + cfg) == 0);
  CHECK(slurp(workdir() / "stdout.txt").find("\"B\"") != std::string::npos);
  CHECK(cli("train " + cfg + " --dataset A") == 0);
  CHECK(fs::exists(workdir() / "out" / "A.ckpt"));
  CHECK(cli("eval " + cfg + " --dataset A --attention 0") == 0);
  CHECK(fs::exists(workdir() / "out" / "A_eval.csv"));
  CHECK(fs::exists(workdir() / "out" / "A_attention.txt"));
  CHECK(cli("report --input " + (workdir() / "out" / "A_eval.csv").string() + " --format plot-data") == 0);
  CHECK(cli("build-index " + cfg + " --dataset B") == 0);
  CHECK(fs::exists(workdir() / "out" / "index" / "B_0.idx"));

  // Validation failures exit 1.
  CHECK(cli("") == 1);
  CHECK(cli("ingest") == 1);
  CHECK(cli("ingest --no-such-flag") == 1);
  CHECK(cli("ingest --config " + (workdir() / "bad.json").string()) == 1);
  CHECK(cli("ingest " + cfg + " --mask G+Q") == 1);
  CHECK(cli("train " + cfg) == 1);
  CHECK(cli("ingest " + cfg + " --set train.epochs=0") == 1);
  CHECK(slurp(workdir() / "stderr.txt").find("error") != std::string::npos);
  CHECK(cli("report --input " + (workdir() / "out" / "A_eval.csv").string() + " --format xml") == 1);

  // Runtime failures exit 2.
  CHECK(cli("eval " + cfg + " --dataset A --checkpoint /nonexistent.ckpt") == 2);
  CHECK(cli("report --input /nonexistent.csv") == 2);
}
