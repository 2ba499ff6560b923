#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "doctest.h"
#include "map4ts/error.hpp"
#include "map4ts/train.hpp"

using namespace map4ts;
using namespace map4ts::train;
using model::Model;
using model::ModelConfig;

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

ModelConfig toy(model::EncoderMode e = model::EncoderMode::Single) {
  ModelConfig c;
  c.backbone.d_model = 8;
  c.backbone.n_layers = 1;
  c.backbone.n_heads = 2;
  c.backbone.align_heads = 2;
  c.backbone.context_limit = 24;
  c.backbone.vocab_size = 30;
  c.input_len = 12;
  c.horizon = 4;
  c.prototype_count = 6;
  c.encoder = e;
  c.seed = 3;
  return c;
}

// Targets continue a damped sine of random phase; prompts vary with the phase bucket.
std::vector<Sample> samples(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 6.28);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.window_start = i;
    const double ph = u(rng);
    for (std::size_t t = 0; t < 16; ++t) (t < 12 ? s.input : s.target).push_back(std::sin(ph + 0.5 * t));
    s.norm = {0.5, 2.0};
    const int bucket = static_cast<int>(ph);
    for (std::size_t a = 0; a < 4; ++a) {
      s.text[a] = "aspect " + std::to_string(a) + " bucket " + std::to_string(bucket);
      s.tokens[a] = {static_cast<int>(a + 1), bucket + 5, 20};
    }
    out.push_back(std::move(s));
  }
  return out;
}

TrainConfig fast(double lr = 0.01, std::size_t epochs = 3) {
  TrainConfig c;
  c.lr = lr;
  c.epochs = epochs;
  c.batch_size = 4;
  c.weight_decay = 0.0;
  c.clip_norm = 0.0;
  return c;
}

}  // namespace

TEST_CASE("AdamW matches a scalar reference") {
  ag::ParameterStore store;
  store.add("w", ag::Mat::Constant(1, 3, 0.5), true);
  store.add("frozen", ag::Mat::Constant(1, 1, 2.0), false);
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.01;
  AdamW opt(cfg);
  const double grads[3][3] = {{0.3, -1.0, 0.0}, {0.1, 2.0, -0.5}, {-0.2, 0.4, 1e-3}};
  double p[3] = {0.5, 0.5, 0.5}, m[3] = {}, v[3] = {};
  for (int step = 1; step <= 3; ++step) {
    for (int k = 0; k < 3; ++k) {
      store.grad(0)(0, k) = grads[step - 1][k];
      const double g = grads[step - 1][k];
      m[k] = 0.9 * m[k] + 0.1 * g;
      v[k] = 0.999 * v[k] + 0.001 * g * g;
      const double mh = m[k] / (1 - std::pow(0.9, step)), vh = v[k] / (1 - std::pow(0.999, step));
      p[k] -= 0.1 * (mh / (std::sqrt(vh) + 1e-8) + 0.01 * p[k]);
    }
    store.grad(1)(0, 0) = 5.0;
    opt.step(store);
  }
  for (int k = 0; k < 3; ++k) CHECK(store.value(0)(0, k) == doctest::Approx(p[k]).epsilon(1e-12));
  CHECK(store.value(1)(0, 0) == 2.0);
  CHECK(opt.steps() == 3);
}

TEST_CASE("gradient clipping") {
  ag::ParameterStore store;
  store.add("a", ag::Mat::Zero(1, 2), true);
  store.add("b", ag::Mat::Zero(1, 1), true);
  store.add("c", ag::Mat::Zero(1, 1), false);
  store.grad(0) << 3, 0;
  store.grad(1) << 4;
  store.grad(2) << 100;
  CHECK(grad_norm(store) == doctest::Approx(5.0));
  CHECK(clip_grad_norm(store, 10.0) == doctest::Approx(5.0));
  CHECK(store.grad(0)(0, 0) == 3.0);
  CHECK(clip_grad_norm(store, 1.0) == doctest::Approx(5.0));
  CHECK(grad_norm(store) == doctest::Approx(1.0));
  CHECK(store.grad(1)(0, 0) == doctest::Approx(0.8));
  CHECK(store.grad(2)(0, 0) == 100.0);
}

TEST_CASE("zero learning rate leaves every parameter bitwise unchanged") {
  Model m(toy());
  m.apply_lora(2, 4.0);
  const auto before = m.params().hash();
  const auto res = train_run(m, samples(10, 1), prompt::PromptMask::all(), fast(0.0, 2));
  CHECK(m.params().hash() == before);
  CHECK(res.steps == 6);
  CHECK(res.step_loss.size() == 6);
  CHECK(res.epoch_loss.size() == 2);
}

TEST_CASE("training lowers the loss and leaves the base model frozen") {
  Model m(toy());
  m.apply_lora(2, 4.0);
  const auto s = samples(32, 2);
  const auto base = m.params().hash_where([](const std::string& n) {
    return n.rfind("backbone.", 0) == 0 && n.find("lora") == std::string::npos;
  });
  const auto lora = m.params().hash_where([](const std::string& n) { return n.find("lora") != std::string::npos; });
  const double before = evaluate(m, s, prompt::PromptMask::all()).mse;
  const auto res = train_run(m, s, prompt::PromptMask::all(), fast(0.01, 15));
  const double after = evaluate(m, s, prompt::PromptMask::all()).mse;
  CHECK(after < 0.5 * before);
  CHECK(res.epoch_loss.back() < res.epoch_loss.front());
  CHECK(m.params().hash_where([](const std::string& n) {
    return n.rfind("backbone.", 0) == 0 && n.find("lora") == std::string::npos;
  }) == base);
  CHECK(m.params().hash_where([](const std::string& n) { return n.find("lora") != std::string::npos; }) != lora);
}

TEST_CASE("frozen dual text encoder is untouched by training") {
  for (auto e : {model::EncoderMode::DualFrozen, model::EncoderMode::DualTrainable}) {
    auto cfg = toy(e);
    cfg.train_backbone = true;
    Model m(cfg);
    m.apply_lora(2, 4.0);
    const auto before = m.text_encoder_hash();
    train_run(m, samples(12, 3), prompt::PromptMask::all(), fast(0.01, 2));
    if (e == model::EncoderMode::DualFrozen) {
      CHECK(m.text_encoder_hash() == before);
    } else {
      CHECK(m.text_encoder_hash() != before);
    }
  }
}

TEST_CASE("cached prompt states equal fresh encodes") {
  Model m(toy());
  const auto s = samples(8, 4);
  std::map<std::string, ag::Mat> cache;
  const auto mask = prompt::PromptMask::parse("1011");
  for (int pass = 0; pass < 2; ++pass) {
    for (const auto& x : s) {
      ag::Tape t1, t2;
      PromptEncoder cached(m, &cache), fresh(m);
      const auto a = cached.rows(t1, x, mask);
      const auto b = fresh.rows(t2, x, mask);
      for (std::size_t k = 0; k < 4; ++k) {
        REQUIRE(a[k].has_value() == mask.on[k]);
        if (a[k]) CHECK((a[k]->value().array() == b[k]->value().array()).all());
      }
    }
  }
  std::set<std::string> texts;
  for (const auto& x : s) {
    for (std::size_t k : {0, 2, 3}) texts.insert(x.text[k]);
  }
  CHECK(cache.size() == texts.size());
  ag::Tape t1, t2;
  PromptEncoder enc(m);
  enc.rows(t1, s[0], mask);
  CHECK(code_of([&] { enc.rows(t2, s[0], mask); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("training is deterministic under a fixed seed") {
  Model a(toy());
  Model b = a;
  auto cfg = fast(0.01, 2);
  cfg.shuffle = true;
  const auto s = samples(8, 4);
  train_run(a, s, prompt::PromptMask::parse("1011"), cfg);
  train_run(b, s, prompt::PromptMask::parse("1011"), cfg);
  CHECK(a.params().hash() == b.params().hash());
}

TEST_CASE("non-finite loss is reported") {
  Model m(toy());
  auto s = samples(8, 5);
  s[5].target[1] = NAN;
  bool named = false;
  try {
    train_run(m, s, prompt::PromptMask::none(), fast());
  } catch (const Error& e) {
    named = e.code() == ErrorCode::NonFiniteLoss && std::string(e.what()).find("batch 1") != std::string::npos;
  }
  CHECK(named);
  CHECK(code_of([&] { train_run(m, {}, prompt::PromptMask::none(), fast()); }) == ErrorCode::TooFewWindows);
  auto bad = fast();
  bad.batch_size = 0;
  CHECK(code_of([&] { train_run(m, samples(2, 1), prompt::PromptMask::none(), bad); }) == ErrorCode::InvalidConfig);
}

TEST_CASE("metrics") {
  const std::vector<std::vector<double>> p = {{1, 2}, {3, 4}}, y = {{1, 0}, {0, 4}};
  const auto r = score(p, y);
  CHECK(r.count == 4);
  CHECK(r.mse == doctest::Approx((0 + 4 + 9 + 0) / 4.0));
  CHECK(r.mae == doctest::Approx((0 + 2 + 3 + 0) / 4.0));
  CHECK(code_of([&] { score(p, {{1, 2}}); }) == ErrorCode::LengthMismatch);

  Model m(toy());
  const auto s = samples(6, 6);
  const auto norm = evaluate(m, s, prompt::PromptMask::all());
  const auto denorm = evaluate(m, s, prompt::PromptMask::all(), true);
  // Every sample shares std 2, so data-unit errors scale by 2 and 4.
  CHECK(denorm.mae == doctest::Approx(2 * norm.mae));
  CHECK(denorm.mse == doctest::Approx(4 * norm.mse));
  Model same = m;
  CHECK(evaluate(same, s, prompt::PromptMask::all()).mse == norm.mse);
}

TEST_CASE("seed derivation and repeated runs") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t base : {0ull, 1ull, 42ull}) {
    for (std::size_t r = 0; r < 50; ++r) seen.insert(derive_seed(base, r));
  }
  CHECK(seen.size() == 150);
  CHECK(derive_seed(7, 2) == derive_seed(7, 2));

  std::vector<std::uint64_t> got;
  const auto rep = repeat_runs(
      [&](std::uint64_t seed) {
        got.push_back(seed);
        return Metrics{static_cast<double>(got.size()), 10.0 - got.size(), 1};
      },
      9, 3);
  CHECK(rep.seeds == got);
  CHECK(got[0] == derive_seed(9, 0));
  CHECK(rep.mean.mse == doctest::Approx(2.0));
  CHECK(rep.best.mse == 1.0);
  CHECK(rep.best.mae == 7.0);
  const auto one = repeat_runs([](std::uint64_t) { return Metrics{1, 1, 1}; }, 9, 1);
  CHECK(one.seeds == std::vector<std::uint64_t>{9});
  CHECK(code_of([] { aggregate({}); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("trace csv") {
  const auto path = (std::filesystem::temp_directory_path() / "map4ts_trace.csv").string();
  write_trace_csv({{"r1", "AR1", 48, "1111", "cross-attention", 1, "train_mse", 0.25},
                   {"r1", "AR1", 48, "1111", "cross-attention", 2, "train_mse", 0.125}},
                  path);
  std::ifstream in(path);
  std::string header, a, b;
  std::getline(in, header);
  std::getline(in, a);
  std::getline(in, b);
  CHECK(header == "run_id,dataset,horizon,mask,variant,step,metric,value");
  CHECK(a == "r1,AR1,48,1111,cross-attention,1,train_mse,0.25");
  CHECK(b == "r1,AR1,48,1111,cross-attention,2,train_mse,0.125");
  std::filesystem::remove(path);
  CHECK(code_of([] { write_trace_csv({}, "/nonexistent/dir/x.csv"); }) == ErrorCode::IoFailure);
}
