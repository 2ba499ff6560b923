#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>

#include "doctest.h"
#include "json.hpp"
#include "map4ts/experiment.hpp"
#include "oracles.hpp"

using namespace map4ts;
using namespace map4ts::exp;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

template <class F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::InvalidArgument;
}

json base_config() {
  return json::parse(R"({
    "seed": 3,
    "task": {"input_len": 48, "horizon": 12},
    "split": {"train": 0.7, "val": 0.1, "test": 0.2},
    "train": {"lr": 0.002, "batch_size": 8, "epochs": 1},
    "windows": {"train_stride": 24, "max_train": 24, "eval_stride": 24, "max_eval": 12},
    "model": {"d_model": 8, "n_layers": 1, "n_heads": 2, "context_limit": 512, "align_heads": 2, "lora_rank": 2},
    "prompts": {"variant": "minimal", "clusters": 3},
    "datasets": [
      {"name": "A", "group": "LT", "synthetic": {"kind": "ar1", "length": 1600, "phi": 0.8, "seed": 1}},
      {"name": "B", "group": "LT", "synthetic": {"kind": "sine", "length": 1400, "period": 24, "noise": 0.2, "seed": 2}},
      {"name": "C", "group": "ST", "synthetic": {"kind": "trend", "length": 1200, "slope": 0.01, "seed": 3}}
    ]
  })");
}

ExperimentConfig config(const json& j = base_config()) { return ExperimentConfig::from_json(j.dump()); }

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("map4ts_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

double num(const std::string& s) { return std::stod(s); }

}  // namespace

TEST_CASE("config round trip and validation") {
  auto j = base_config();
  j["masks"] = "all16";
  j["variants"] = {"cross-attention", "conv-max-joint"};
  j["encoders"] = {"single", "dual-frozen"};
  const auto cfg = config(j);
  CHECK(cfg.masks.size() == 16);
  CHECK(cfg.variants.size() == 2);
  CHECK(cfg.encoders.size() == 2);
  CHECK(cfg.datasets.at(1).synthetic->kind == "sine");
  const auto back = ExperimentConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());

  auto dup = base_config();
  dup["datasets"][1]["name"] = "A";
  CHECK(code_of([&] { config(dup).validate(); }) == ErrorCode::InvalidConfig);
  auto none = base_config();
  none["datasets"] = json::array();
  CHECK(code_of([&] { config(none).validate(); }) == ErrorCode::InvalidConfig);
  auto grp = base_config();
  grp["datasets"][0]["group"] = "MID";
  CHECK(code_of([&] { config(grp).validate(); }) == ErrorCode::InvalidConfig);
  CHECK(code_of([] { ExperimentConfig::from_json("{not json"); }) == ErrorCode::InvalidConfig);
}

TEST_CASE("synthetic series") {
  SyntheticSpec s;
  s.length = 20000;
  s.phi = 0.9;
  const auto a = synthesize(s, 0, "X");
  const auto b = synthesize(s, 0, "X");
  CHECK(a.values == b.values);
  CHECK(synthesize(s, 1, "X").values != a.values);
  CHECK(tsa::acf(a.values, 1)[1] == doctest::Approx(0.9).epsilon(0.02));
  s.kind = "constant";
  s.level = 4;
  const auto c = synthesize(s, 0, "K");
  CHECK(std::all_of(c.values.begin(), c.values.end(), [](double v) { return v == 4.0; }));
}

TEST_CASE("prepared samples follow the split and normalization contract") {
  Experiment e(config());
  const auto& d = e.dataset("A");
  const auto& ch = d.channels.at(0);
  CHECK(d.task.input_len == 48);
  CHECK(!d.train.empty());
  CHECK(!d.test.empty());
  for (const auto& s : d.train) {
    CHECK(s.window_start + 60 <= ch.splits.bounds.train_end);
  }
  for (const auto& s : d.test) {
    CHECK(s.window_start + 48 >= ch.splits.bounds.val_end);
    const std::vector<double> raw(ch.series.values.begin() + s.window_start,
                                  ch.series.values.begin() + s.window_start + 60);
    const auto norm = core::instance_normalize(std::span<const double>(raw.data(), 48));
    CHECK(oracle::max_abs_diff(s.input, norm.values) == 0.0);
    CHECK(s.target.size() == 12);
    CHECK(s.target[0] == doctest::Approx((raw[48] - norm.state.mean) / norm.state.divisor()));
    for (std::size_t a = 0; a < 4; ++a) CHECK(!s.tokens[a].empty());
  }
  CHECK(d.max_prompt_tokens + 1 <= 512);
  CHECK_THROWS_AS(e.dataset("missing"), Error);
}

TEST_CASE("no information from validation or test reaches training inputs") {
  const auto dir = temp_dir("leak");
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  std::vector<double> x(1500);
  double ar = 0;
  for (auto& v : x) v = ar = 0.8 * ar + g(rng);
  const auto split = core::chrono_split(x.size(), {0.7, 0.1, 0.2}, {48, 12});
  auto write = [&](const std::string& name, bool poison) {
    std::ofstream out(dir / name);
    out << "t,v\n";
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double v = poison && i >= split.bounds.train_end ? 1e6 + 17.0 * i : x[i];
      out << i << "," << std::setprecision(17) << v << "\n";
    }
  };
  write("clean.csv", false);
  write("poisoned.csv", true);
  auto j = base_config();
  j["datasets"] = json::array();
  for (const char* n : {"clean", "poisoned"}) {
    j["datasets"].push_back({{"name", n}, {"csv", (dir / (std::string(n) + ".csv")).string()},
                             {"columns", {"v"}}, {"timestamp", "t"}, {"frequency", "hourly"}});
  }
  j["windows"]["train_stride"] = 1;
  j["windows"]["max_train"] = 0;
  Experiment e(config(j));
  const auto& a = e.dataset("clean");
  const auto& b = e.dataset("poisoned");
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].input == b.train[i].input);
    CHECK(a.train[i].target == b.train[i].target);
    for (std::size_t k = 1; k < 4; ++k) CHECK(a.train[i].text[k] == b.train[i].text[k]);
  }
  for (std::size_t s = 0; s < a.channels[0].index.scales.size(); ++s) {
    CHECK(a.channels[0].index.scales[s].centroids == b.channels[0].index.scales[s].centroids);
  }
  CHECK(a.test.front().input != b.test.front().input);
  fs::remove_all(dir);
}

TEST_CASE("channels are prepared independently") {
  auto j = base_config();
  j["datasets"] = json::array();
  j["datasets"].push_back({{"name", "one"}, {"synthetic", {{"kind", "ar1"}, {"length", 1500}, {"seed", 5}}}});
  j["datasets"].push_back(
      {{"name", "two"}, {"synthetic", {{"kind", "ar1"}, {"length", 1500}, {"seed", 5}, {"channels", 2}}}});
  Experiment e(config(j));
  const auto& one = e.dataset("one");
  const auto& two = e.dataset("two");
  std::vector<const train::Sample*> first;
  for (const auto& s : two.train) {
    if (s.channel == 0) first.push_back(&s);
  }
  REQUIRE(first.size() == one.train.size());
  CHECK(two.train.size() == 2 * one.train.size());
  for (std::size_t i = 0; i < first.size(); ++i) {
    CHECK(first[i]->input == one.train[i].input);
    CHECK(first[i]->text[1] == one.train[i].text[1]);
  }
  // Predictions for one channel do not depend on the other's presence in the batch.
  const auto mc = model_config_for(e.cfg, two, CellSpec{"two"}, e.tokenizer->vocab_size());
  const auto m = build_model(mc);
  const auto all = train::predict_all(m, two.test, prompt::PromptMask::all());
  std::vector<train::Sample> only0;
  for (const auto& s : two.test) {
    if (s.channel == 0) only0.push_back(s);
  }
  const auto part = train::predict_all(m, only0, prompt::PromptMask::all());
  std::size_t k = 0;
  for (std::size_t i = 0; i < two.test.size(); ++i) {
    if (two.test[i].channel == 0) CHECK(all[i] == part[k++]);
  }
}

TEST_CASE("prompt ablation table and group sums") {
  auto j = base_config();
  j["masks"] = {"0000", "1111", "0110"};
  Experiment e(config(j));
  const auto out = run_ablation_prompts(e);
  const auto& t = out.table;
  REQUIRE(t.rows.size() == 16);
  CHECK(out.cells.size() == 16 * 3);
  CHECK(t.rows[0][0] == "No Prompt");
  CHECK(t.rows[15][0] == "G+L+S+T");
  CHECK(t.columns.back() == "status");
  for (const auto& row : t.rows) {
    CHECK(row.back() == "ok");
    for (const char* metric : {"MSE", "MAE"}) {
      const double a = num(row[t.column(std::string("A ") + metric)]);
      const double b = num(row[t.column(std::string("B ") + metric)]);
      const double c = num(row[t.column(std::string("C ") + metric)]);
      CHECK(std::isfinite(a));
      CHECK(num(row[t.column(std::string("LT Sum(Loss) ") + metric)]) == doctest::Approx(a + b).epsilon(1e-5));
      CHECK(num(row[t.column(std::string("ST Sum(Loss) ") + metric)]) == doctest::Approx(c).epsilon(1e-5));
    }
  }
  for (const auto& c : out.cells) {
    const auto rec = json::parse(cell_record(c, e.cfg));
    CHECK(rec.at("ok") == true);
    CHECK(rec.at("mask").get<std::string>().size() == 4);
    CHECK(rec.at("runs").size() == 1);
    CHECK(rec.contains("config"));
  }

  SUBCASE("reports") {
    const auto csv = render(t, ReportFormat::Csv);
    CHECK(parse_csv_table(csv) == t);
    const auto md = render(t, ReportFormat::Markdown);
    CHECK(std::count(md.begin(), md.end(), '\n') == static_cast<long>(t.rows.size() + 2));
    const auto plot = render(t, ReportFormat::PlotData);
    CHECK(plot.rfind("# ", 0) == 0);
    CHECK(plot.find("status") == std::string::npos);
    const auto dir = temp_dir("reports");
    emit_report(t, ReportFormat::Csv, (dir / "t.csv").string());
    CHECK(read_csv_table((dir / "t.csv").string()) == t);
    CHECK(code_of([&] { emit_report(ResultTable{}, ReportFormat::Csv, (dir / "empty.csv").string()); }) ==
          ErrorCode::InvalidArgument);
    CHECK_FALSE(fs::exists(dir / "empty.csv"));
    CHECK(code_of([&] { emit_report(t, ReportFormat::Csv, (dir / "no/such/dir.csv").string()); }) ==
          ErrorCode::IoFailure);
    fs::remove_all(dir);
  }
}

TEST_CASE("csv parsing edge cases") {
  const auto t = parse_csv_table("a,\"b,c\"\r\n1,\"say \"\"hi\"\"\"\r\n");
  CHECK(t.columns == std::vector<std::string>{"a", "b,c"});
  CHECK(t.rows.at(0).at(1) == "say \"hi\"");
  CHECK(code_of([] { parse_csv_table("a,b\n1\n"); }) == ErrorCode::FormatError);
  CHECK(code_of([] { parse_csv_table("a,b\n1,\"x\n"); }) == ErrorCode::FormatError);
  ResultTable q{{"k", "v|w"}, {{"x|y", "1"}}};
  CHECK(render(q, ReportFormat::Markdown).find("x\\|y") != std::string::npos);
  CHECK(code_of([] { parse_report_format("xml"); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([&] { q.column("nope"); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("alignment and encoder sweeps") {
  auto j = base_config();
  j["datasets"].erase(2);
  Experiment e(config(j));
  const auto al = run_alignment_ablation(e);
  CHECK(al.table.rows.size() == 4);
  const auto en = run_encoder_ablation(e);
  CHECK(en.table.rows.size() == 3);
  for (const auto* t : {&al.table, &en.table}) {
    for (const auto& row : t->rows) CHECK(row.back() == "ok");
  }
}

TEST_CASE("zero-shot transfer") {
  auto j = base_config();
  j["datasets"][2]["task"] = {{"input_len", 48}, {"horizon", 6}};
  Experiment e(config(j));
  const auto out = run_zero_shot(e, "A", {"A", "B", "C"});
  REQUIRE(out.rows.size() == 3);
  CHECK(out.rows[0].metrics.mse == out.in_domain.mse);
  CHECK(out.rows[0].metrics.mae == out.in_domain.mae);
  CHECK(out.rows[1].hash_before == out.rows[1].hash_after);
  CHECK(out.table.rows[1][out.table.column("params_unchanged")] == "yes");
  CHECK(out.table.rows[1][out.table.column("status")] == "ok");
  CHECK(out.table.rows[2][out.table.column("status")].rfind("failed", 0) == 0);

  const auto mc = model_config_for(e.cfg, e.dataset("A"), CellSpec{"A"}, e.tokenizer->vocab_size());
  CHECK(code_of([&] { zero_shot_eval(build_model(mc), e.dataset("C"), e.cfg, prompt::PromptMask::all()); }) ==
        ErrorCode::ShapeMismatch);
}

TEST_CASE("determinism across runs and worker counts") {
  auto j = base_config();
  j["n_runs"] = 2;
  Experiment e1(config(j));
  j["parallelism"] = 3;
  Experiment e2(config(j));
  std::vector<CellSpec> cells;
  for (const char* ds : {"A", "B", "C"}) {
    for (const char* m : {"0000", "1011"}) {
      CellSpec c;
      c.dataset = ds;
      c.mask = prompt::PromptMask::parse(m);
      c.seed = 11;
      cells.push_back(c);
    }
  }
  const auto a = run_cells(e1.all(), e1.cfg, cells, e1.tokenizer->vocab_size());
  const auto b = run_cells(e2.all(), e2.cfg, cells, e2.tokenizer->vocab_size());
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].ok);
    CHECK(a[i].spec.dataset == b[i].spec.dataset);
    CHECK(a[i].report.seeds == b[i].report.seeds);
    CHECK(a[i].report.seeds.size() == 2);
    CHECK(a[i].report.mean.mse == b[i].report.mean.mse);
    CHECK(a[i].report.mean.mae == b[i].report.mean.mae);
    CHECK(a[i].first_run_epoch_loss == b[i].first_run_epoch_loss);
  }
}

TEST_CASE("failed cells are reported, not thrown") {
  Experiment e(config());
  auto broken = e.dataset("A");
  broken.train[0].input[3] = NAN;
  CellSpec c;
  c.dataset = "A";
  const auto r = run_cell(broken, e.cfg, c, e.tokenizer->vocab_size());
  CHECK_FALSE(r.ok);
  CHECK(r.error.find("loss") != std::string::npos);
  const auto t = ablation_table("prompts", {"x"}, {"A"}, {"LT"}, {{&r}});
  CHECK(t.rows[0][1] == "nan");
  CHECK(t.rows[0].back().rfind("failed", 0) == 0);
}

TEST_CASE("attention rendering") {
  model::AttentionExport ex;
  ex.rows = {0, 4};
  ag::Mat m = ag::Mat::Constant(2, 5, 0.2);
  ex.per_layer = {m, m};
  ex.groups = {{0, 1}};
  ex.grouped = {m};
  const auto s = render_attention(ex);
  CHECK(s.find("# layer 0") != std::string::npos);
  CHECK(s.find("# layers 0-1") != std::string::npos);
  CHECK(s.find("Global") != std::string::npos);
  CHECK(s.find("0.200000") != std::string::npos);
}
