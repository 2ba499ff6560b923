#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "gradcheck.hpp"
#include "map4ts/error.hpp"
#include "map4ts/model.hpp"

using namespace map4ts;
using namespace map4ts::model;

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

ModelConfig toy(AlignVariant v = AlignVariant::CrossAttention, EncoderMode e = EncoderMode::Single) {
  ModelConfig c;
  c.backbone.d_model = 8;
  c.backbone.n_layers = 1;
  c.backbone.n_heads = 2;
  c.backbone.align_heads = 2;
  c.backbone.context_limit = 24;
  c.backbone.vocab_size = 30;
  c.backbone.lora_rank = 2;
  c.input_len = 12;
  c.horizon = 4;
  c.prototype_count = 6;
  c.variant = v;
  c.encoder = e;
  c.seed = 5;
  return c;
}

std::vector<double> series(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<double> x(n);
  for (auto& v : x) v = g(rng);
  return x;
}

Mat mat(std::size_t r, std::size_t c, std::uint64_t seed, double s = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, s);
  Mat m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

const std::array<std::vector<int>, 4> kIds = {std::vector<int>{1, 2, 3}, {4, 5}, {6, 7, 8, 9}, {10}};

PromptRows encode_all(Tape& t, const Model& m, const prompt::PromptMask& mask) {
  PromptRows rows;
  for (std::size_t i = 0; i < 4; ++i) {
    if (mask.on[i]) rows[i] = m.encode_prompt(t, prompt::kAspects[i], kIds[i]);
  }
  return rows;
}

Var loss_for(Tape& t, const Model& m, const prompt::PromptMask& mask) {
  const auto x = series(m.config().input_len, 17);
  const Mat y = mat(1, m.config().horizon, 18);
  return ag::mse(m.predict(t, x, encode_all(t, m, mask)), y);
}

// Row-wise softmax reference for one head.
Mat softmax_rows(const Mat& s) {
  Mat p = s;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double mx = s.row(i).maxCoeff();
    double z = 0;
    for (Eigen::Index j = 0; j < s.cols(); ++j) z += (p(i, j) = std::exp(s(i, j) - mx));
    p.row(i) /= z;
  }
  return p;
}

}  // namespace

TEST_CASE("series embedding is an affine map of the window") {
  Model m(toy());
  const auto& s = m.params();
  const auto x = series(12, 1);
  Tape t;
  const Mat got = m.embed_series(t, x).value();
  Mat xin = Eigen::Map<const Mat>(x.data(), 1, 12);
  const Mat want = xin * s.value(s.index("ts_embed.w")) + s.value(s.index("ts_embed.b"));
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(code_of([&] { m.embed_series(t, series(11, 1)); }) == ErrorCode::LengthMismatch);
}

TEST_CASE("mhca matches a direct computation") {
  Model m(toy());
  const auto& s = m.params();
  auto P = [&](const char* n) { return s.value(s.index(n)); };
  const Mat q = mat(3, 8, 2), kv = mat(1, 8, 3);
  const Mat kv2 = mat(5, 8, 4);
  for (const Mat* k : {&kv, &kv2}) {
    Tape t;
    const Mat got = m.mhca(t, t.constant(q), t.constant(*k)).value();
    const Mat Q = (q * P("mhca.q.w")).rowwise() + P("mhca.q.b").row(0);
    const Mat K = (*k * P("mhca.k.w")).rowwise() + P("mhca.k.b").row(0);
    const Mat V = (*k * P("mhca.v.w")).rowwise() + P("mhca.v.b").row(0);
    Mat o(3, 8);
    for (int h = 0; h < 2; ++h) {
      const Mat sc = Q.middleCols(h * 4, 4) * K.middleCols(h * 4, 4).transpose() / 2.0;
      o.middleCols(h * 4, 4) = softmax_rows(sc) * V.middleCols(h * 4, 4);
    }
    const Mat want = (o * P("mhca.o.w")).rowwise() + P("mhca.o.b").row(0);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
  }
  Tape t;
  CHECK(code_of([&] { m.mhca(t, t.constant(mat(1, 7, 1)), t.constant(kv)); }) == ErrorCode::DimMismatch);
}

TEST_CASE("prompt embedding is read at the appended EOS position") {
  Model m(toy());
  Tape t;
  const std::vector<int> ids = {3, 4, 5};
  const Mat got = m.eos_hidden(t, ids).value();
  std::vector<int> seq = ids;
  seq.push_back(29);
  const auto& bb = m.text_encoder();
  const Mat h = bb.run(t, m.params(), bb.token_embed(t, m.params(), seq), true).value();
  CHECK(got.rows() == 1);
  CHECK((got - h.row(3)).cwiseAbs().maxCoeff() == 0.0);
  const Mat other = m.eos_hidden(t, {3, 4, 6}).value();
  CHECK((other - got).cwiseAbs().maxCoeff() > 1e-9);
  CHECK_NOTHROW(m.eos_hidden(t, std::vector<int>(23, 1)));
  CHECK(code_of([&] { m.eos_hidden(t, std::vector<int>(24, 1)); }) == ErrorCode::PromptTooLong);
}

TEST_CASE("gradients of every alignment variant") {
  for (auto v : kAlignVariants) {
    for (const char* bits : {"1111", "1010", "0001"}) {
      const std::string vname = to_string(v);
      CAPTURE(vname);
      const std::string mask_bits = bits;
      CAPTURE(mask_bits);
      auto cfg = toy(v);
      cfg.train_backbone = true;
      Model m(cfg);
      m.apply_lora(2, 4.0);
      // Move LoRA A off zero so its path carries gradient through B as well.
      m.params().value(m.params().index("backbone.lora_A")) = mat(30, 2, 9, 0.1);
      const auto mask = prompt::PromptMask::parse(bits);
      const double err = testing::max_param_grad_error(
          m.params(), [&](Tape& t) { return loss_for(t, m, mask); }, 1e-5, 7);
      CHECK(err < 1e-5);
    }
  }
}

TEST_CASE("gradients with the WTE baseline and dual encoders") {
  {
    auto cfg = toy();
    cfg.wte_baseline = true;
    Model m(cfg);
    m.apply_lora(2, 4.0);
    const double err = testing::max_param_grad_error(
        m.params(), [&](Tape& t) { return loss_for(t, m, prompt::PromptMask::none()); }, 1e-5, 3);
    CHECK(err < 1e-5);
  }
  for (auto e : {EncoderMode::DualFrozen, EncoderMode::DualTrainable}) {
    auto cfg = toy(AlignVariant::ConvMaxJointCross, e);
    cfg.train_backbone = true;
    Model m(cfg);
    const double err = testing::max_param_grad_error(
        m.params(), [&](Tape& t) { return loss_for(t, m, prompt::PromptMask::all()); }, 1e-5, 5);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("alignment input gradients through the raw op graph") {
  Model m(toy(AlignVariant::ConvMaxJoint));
  for (auto v : kAlignVariants) {
    std::vector<Mat> in = {mat(1, 8, 31), mat(1, 8, 32), mat(1, 8, 33), mat(1, 8, 34)};
    auto build = [&](Tape& t, const std::vector<Var>& x) {
      PromptRows p = {x[0], std::nullopt, x[1], x[2]};
      return ag::mse(m.align(t, p, x[3], v), mat(1, 8, 35));
    };
    CHECK(testing::max_grad_error(in, {0, 1, 2, 3}, build, 1e-5) < 1e-6);
  }
  Tape t;
  CHECK(code_of([&] { m.align(t, PromptRows{}, t.constant(mat(1, 8, 1))); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("zero-initialised LoRA leaves outputs bitwise unchanged") {
  for (auto e : {EncoderMode::Single, EncoderMode::DualFrozen}) {
    Model a(toy(AlignVariant::CrossAttention, e));
    Model b = a;
    b.apply_lora(2, 4.0);
    CHECK(b.backbone().has_lora());
    Tape ta, tb;
    const Mat pa = a.predict(ta, series(12, 3), encode_all(ta, a, prompt::PromptMask::all())).value();
    const Mat pb = b.predict(tb, series(12, 3), encode_all(tb, b, prompt::PromptMask::all())).value();
    CHECK((pa.array() == pb.array()).all());
    const auto& s = b.params();
    CHECK(s.value(s.index("backbone.lora_A")).isZero(0));
    CHECK(s.trainable(s.index("backbone.lora_A")));
    CHECK_FALSE(s.trainable(s.index("backbone.wte")));
  }
  Model m(toy());
  CHECK(code_of([&] { m.apply_lora(9, 1.0); }) == ErrorCode::RankTooLarge);
  CHECK(code_of([&] { m.apply_lora(0, 1.0); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("encoder modes") {
  Model single(toy());
  CHECK(single.shares_text_encoder());
  CHECK(&single.text_encoder() == &single.backbone());
  for (std::size_t i = 0; i < single.params().size(); ++i) {
    CHECK(single.params().name(i).rfind("text.", 0) != 0);
  }
  for (auto e : {EncoderMode::DualFrozen, EncoderMode::DualTrainable}) {
    auto cfg = toy(AlignVariant::CrossAttention, e);
    cfg.train_backbone = true;
    Model m(cfg);
    m.apply_lora(2, 4.0);
    const auto& s = m.params();
    std::size_t copies = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto& n = s.name(i);
      if (n.rfind("text.", 0) != 0) continue;
      ++copies;
      CHECK((s.value(i).array() == s.value(s.index("backbone." + n.substr(5))).array()).all());
    }
    CHECK(copies > 0);
    CHECK(m.text_encoder_frozen() == (e == EncoderMode::DualFrozen));
    // The single and dual encoders embed prompts identically at initialisation.
    Model one(toy());
    one.apply_lora(2, 4.0);
    Tape t1, t2;
    const Mat a = one.eos_hidden(t1, {1, 2, 3}).value();
    const Mat b = m.eos_hidden(t2, {1, 2, 3}).value();
    CHECK((a.array() == b.array()).all());
  }
}

TEST_CASE("No-Prompt bypasses alignment") {
  Model m(toy());
  const auto x = series(12, 4);
  Tape t;
  const Mat direct = m.forecast(t, m.embed_series(t, x), std::nullopt).value();
  const Mat pred = m.predict(t, x, PromptRows{}).value();
  CHECK((direct.array() == pred.array()).all());

  m.params().zero_grad();
  Tape g;
  Var loss = ag::mse(m.predict(g, x, PromptRows{}), mat(1, 4, 1));
  g.backward(loss);
  g.accumulate(m.params());
  for (const char* name : {"mhca.q.w", "proj.global.w", "align.fuse.w", "align.conv.w0"}) {
    CHECK(m.params().grad(m.params().index(name)).isZero(0));
  }
  CHECK_FALSE(m.params().grad(m.params().index("head.w")).isZero(0));
}

TEST_CASE("attention probe rows are distributions over active slots") {
  auto cfg = toy();
  cfg.backbone.n_layers = 3;
  Model m(cfg);
  std::size_t rows = 0;
  for (const auto& mask : prompt::PromptMask::power_set()) {
    Tape t;
    RunContext ctx;
    ctx.record_attention = true;
    m.attention_probe(t, encode_all(t, m, mask), m.embed_series(t, series(12, 6)), ctx);
    const auto ex = export_attention(ctx);
    CHECK(ex.rows.size() == mask.count() + 1);
    CHECK(ex.per_layer.size() == 3);
    CHECK(ex.groups.size() == 3);
    for (const auto& layer : ex.per_head) {
      for (const Mat& h : layer) {
        for (Eigen::Index r = 0; r < h.rows(); ++r, ++rows) {
          CHECK(std::abs(h.row(r).sum() - 1.0) < 1e-12);
          for (std::size_t k = 0; k < 4; ++k) {
            if (!mask.on[k]) CHECK(h(r, static_cast<Eigen::Index>(k)) == 0.0);
          }
        }
      }
    }
  }
  CHECK(rows > 100);
  RunContext off;
  Tape t;
  CHECK(code_of([&] { m.attention_probe(t, PromptRows{}, m.embed_series(t, series(12, 6)), off); }) ==
        ErrorCode::RecordingDisabled);
  CHECK(code_of([&] { export_attention(off); }) == ErrorCode::RecordingDisabled);
}

TEST_CASE("checkpoint round trip") {
  auto cfg = toy(AlignVariant::ConvMaxPromptCross, EncoderMode::DualTrainable);
  cfg.wte_baseline = false;
  Model m(cfg);
  m.apply_lora(2, 4.0);
  // Values stored as single precision.
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    auto& v = m.params().value(i);
    for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] = static_cast<float>(v.data()[k]);
  }
  std::stringstream ss;
  m.save(ss);
  const Model back = Model::load(ss);
  CHECK(back.params().hash() == m.params().hash());
  CHECK(back.config().to_json() == m.config().to_json());
  CHECK(back.backbone().has_lora());
  Tape ta, tb;
  const Mat a = m.predict(ta, series(12, 8), encode_all(ta, m, prompt::PromptMask::all())).value();
  const Mat b = back.predict(tb, series(12, 8), encode_all(tb, back, prompt::PromptMask::all())).value();
  CHECK((a.array() == b.array()).all());

  std::stringstream bad("XXXXjunk");
  CHECK(code_of([&] { Model::load(bad); }) == ErrorCode::FormatError);
  std::string bytes = ss.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS(Model::load(truncated));
}

TEST_CASE("config validation and json") {
  auto cfg = toy();
  const auto back = ModelConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  cfg.backbone.n_heads = 3;
  CHECK(code_of([&] { cfg.validate(); }) == ErrorCode::InvalidConfig);
  CHECK(code_of([] { parse_align_variant("nope"); }) == ErrorCode::UnknownVariant);
  for (auto v : kAlignVariants) CHECK(parse_align_variant(to_string(v)) == v);
  for (auto e : {EncoderMode::Single, EncoderMode::DualFrozen, EncoderMode::DualTrainable}) {
    CHECK(parse_encoder_mode(to_string(e)) == e);
  }
}
