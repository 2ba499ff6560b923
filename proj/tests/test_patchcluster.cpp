#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "map4ts/patchcluster.hpp"

using namespace map4ts;
using namespace map4ts::patch;

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

std::vector<double> zn(const std::vector<double>& w) {
  double m = 0, s = 0;
  for (double v : w) m += v;
  m /= w.size();
  for (double v : w) s += (v - m) * (v - m);
  s = std::sqrt(s / w.size());
  std::vector<double> out;
  for (double v : w) out.push_back(s > 0 ? (v - m) / s : 0.0);
  return out;
}

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<double> x(n);
  for (std::size_t t = 0; t < n; ++t) x[t] = std::sin(t * 0.26) + 0.5 * g(rng);
  return x;
}

}  // namespace

TEST_CASE("registry matches the patch configuration table") {
  struct Row {
    const char* dataset;
    const char* scale;
    std::size_t patch, window, points;
  };
  const Row rows[] = {
      {"ETTh1", "Daily", 24, 7, 168},          {"ETTh1", "Weekly", 168, 2, 336},
      {"ETTh1", "Monthly", 720, 1, 720},       {"ETTh2", "Daily", 24, 7, 168},
      {"ETTh2", "Weekly", 168, 2, 336},        {"ETTh2", "Monthly", 720, 1, 720},
      {"Electricity", "Daily", 24, 7, 168},    {"Electricity", "Weekly", 168, 2, 336},
      {"Electricity", "Monthly", 720, 1, 720}, {"Traffic", "Daily", 24, 7, 168},
      {"Traffic", "Weekly", 168, 2, 336},      {"Traffic", "Monthly", 720, 1, 720},
      {"Environment", "Weekly", 7, 12, 84},    {"Environment", "Monthly", 30, 6, 180},
      {"Environment", "Yearly", 365, 1, 365},  {"Climate", "Weekly", 1, 12, 12},
      {"Climate", "Monthly", 4, 6, 24},        {"Climate", "Yearly", 52, 1, 52},
      {"Health", "Weekly", 12, 1, 12},         {"Health", "Monthly", 4, 6, 24},
      {"Health", "Yearly", 52, 1, 52},         {"Agriculture", "Monthly", 1, 6, 6},
      {"Agriculture", "Yearly", 12, 1, 12},
  };
  std::size_t total = 0;
  for (const auto& name : table_datasets()) total += table_configs(name).size();
  CHECK(total == std::size(rows));
  CHECK(table_datasets().size() == 8);
  for (const auto& r : rows) {
    CAPTURE(r.dataset);
    CAPTURE(r.scale);
    const auto cfgs = table_configs(r.dataset);
    auto it = std::find_if(cfgs.begin(), cfgs.end(), [&](const PatchConfig& c) { return c.scale_name == r.scale; });
    REQUIRE(it != cfgs.end());
    CHECK(it->patch_size == r.patch);
    CHECK(it->window_size == r.window);
    CHECK(it->data_points == r.points);
    CHECK(it->data_points == it->patch_size * it->window_size);
  }
  CHECK(code_of([] { table_configs("Weather"); }) == ErrorCode::UnknownDataset);
}

TEST_CASE("segmentation counts against enumeration") {
  const auto cfg = PatchConfig::make("Daily", 24, 7);
  std::vector<double> x(1000);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(i);
  const auto s = segment(x, cfg, 24);
  std::vector<std::size_t> expect;
  for (std::size_t st = 0; st + 168 <= 1000; st += 24) expect.push_back(st);
  CHECK(s.starts == expect);
  CHECK(s.windows.size() == (1000 - 168) / 24 + 1);
  for (std::size_t i = 0; i < s.windows.size(); ++i) {
    CHECK(s.windows[i].size() == 168);
    CHECK(s.windows[i].front() == static_cast<double>(s.starts[i]));
  }
  CHECK(segment(std::vector<double>(168, 1.0), cfg, 24).windows.size() == 1);
  CHECK(code_of([&] { segment(std::vector<double>(100, 1.0), cfg, 24); }) == ErrorCode::SeriesTooShort);
}

TEST_CASE("k=1 centroid is the mean of normalized windows") {
  std::vector<std::vector<double>> w;
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  for (int i = 0; i < 30; ++i) {
    std::vector<double> v(12);
    for (auto& e : v) e = g(rng) * 3 + 1;
    w.push_back(v);
  }
  const auto sc = kmeans_fit(w, {1, 7, 100});
  std::vector<double> mean(12, 0.0);
  for (const auto& v : w) {
    const auto z = zn(v);
    for (std::size_t i = 0; i < 12; ++i) mean[i] += z[i] / w.size();
  }
  for (std::size_t i = 0; i < 12; ++i) CHECK(sc.centroids[0][i] == doctest::Approx(mean[i]).epsilon(1e-12));
}

TEST_CASE("separated shapes are recovered exactly") {
  std::vector<std::vector<double>> w;
  std::vector<int> label;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 0.05);
  for (int i = 0; i < 40; ++i) {
    std::vector<double> v(16);
    const int c = i % 2;
    for (std::size_t t = 0; t < 16; ++t) v[t] = (c ? std::sin(t * 0.8) : static_cast<double>(t)) + g(rng);
    w.push_back(v);
    label.push_back(c);
  }
  const auto sc = kmeans_fit(w, {2, 3, 100});
  for (std::size_t i = 0; i < w.size(); ++i) {
    CHECK((sc.assignment[i] == sc.assignment[0]) == (label[i] == label[0]));
  }
  for (std::size_t i = 1; i < sc.inertia_trace.size(); ++i) {
    CHECK(sc.inertia_trace[i] <= sc.inertia_trace[i - 1] + 1e-12);
  }
}

TEST_CASE("fit determinism and inertia properties") {
  std::mt19937_64 rng(9);
  for (int it = 0; it < 30; ++it) {
    const auto x = noise(600 + rng() % 400, rng());
    const auto seg = segment(x, PatchConfig::make("Daily", 12, 4), 12);
    const std::size_t k = 1 + rng() % 6;
    const auto a = kmeans_fit(seg.windows, {k, 11, 100});
    const auto b = kmeans_fit(seg.windows, {k, 11, 100});
    CHECK(a.centroids == b.centroids);
    CHECK(a.assignment == b.assignment);
    for (std::size_t i = 1; i < a.inertia_trace.size(); ++i) {
      CHECK(a.inertia_trace[i] <= a.inertia_trace[i - 1] + 1e-9);
    }
  }
  // k equal to the number of distinct windows gives zero inertia.
  std::vector<std::vector<double>> w = {{1, 2, 3}, {3, 2, 1}, {1, 3, 2}, {1, 2, 3}, {3, 2, 1}};
  const auto sc = kmeans_fit(w, {3, 1, 100});
  CHECK(sc.inertia_trace.back() < 1e-18);
  CHECK(code_of([&] { kmeans_fit(w, {6, 1, 100}); }) == ErrorCode::TooFewWindows);
}

TEST_CASE("representatives match a brute-force argmin") {
  std::mt19937_64 rng(13);
  for (int it = 0; it < 20; ++it) {
    const auto x = noise(2000, rng());
    const auto cfg = PatchConfig::make("Daily", 24, 2);
    auto idx = build_cluster_index(x, {cfg}, {5, rng(), 100});
    const auto& sc = idx.scales[0];
    for (std::size_t j = 0; j < sc.k; ++j) {
      double best = INFINITY;
      std::size_t arg = 0;
      std::vector<std::pair<double, std::size_t>> members;
      for (std::size_t i = 0; i < sc.windows.size(); ++i) {
        if (sc.assignment[i] != j) continue;
        double d = 0;
        for (std::size_t t = 0; t < sc.windows[i].size(); ++t) d += std::pow(sc.windows[i][t] - sc.centroids[j][t], 2);
        members.emplace_back(d, i);
        if (d < best) {
          best = d;
          arg = i;
        }
      }
      if (members.empty()) continue;
      CHECK(sc.representative[j] == arg);
      CHECK(sc.nearest[j].size() == std::min<std::size_t>(5, members.size()));
      CHECK(sc.nearest[j].front() == arg);
    }
  }
}

TEST_CASE("representative tie rule and singleton clusters") {
  ScaleClusters sc;
  sc.k = 2;
  sc.centroids = {{0, 0}, {5, 5}};
  sc.windows = {{1, 0}, {0, 1}, {5, 5}};
  sc.window_starts = {10, 4, 0};
  sc.assignment = {0, 0, 1};
  select_representatives(sc);
  CHECK(sc.representative[0] == 1);  // equidistant; start 4 beats start 10
  CHECK(sc.representative[1] == 2);
  CHECK(sc.nearest[1].size() == 1);
}

TEST_CASE("nearest cluster lookup") {
  const auto x = noise(3000, 21);
  const auto cfg = PatchConfig::make("Daily", 24, 2);
  const auto idx = build_cluster_index(x, {cfg}, {5, 3, 100});
  const auto& sc = idx.scale("Daily");
  for (std::size_t j = 0; j < sc.k; ++j) {
    CHECK(nearest_cluster(sc.centroids[j], idx, "Daily") == j);
  }
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  for (int it = 0; it < 200; ++it) {
    std::vector<double> q(48);
    for (auto& v : q) v = g(rng);
    const auto z = zn(q);
    std::size_t arg = 0;
    double best = INFINITY;
    for (std::size_t j = 0; j < sc.k; ++j) {
      double d = 0;
      for (std::size_t t = 0; t < 48; ++t) d += std::pow(z[t] - sc.centroids[j][t], 2);
      if (d < best) {
        best = d;
        arg = j;
      }
    }
    const auto got = nearest_cluster(q, idx, "Daily");
    CHECK(got == arg);
    std::vector<double> affine;
    for (double v : q) affine.push_back(3.5 * v - 20.0);
    CHECK(nearest_cluster(affine, idx, "Daily") == got);
  }
  CHECK(code_of([&] { nearest_cluster(std::vector<double>(10, 1.0), idx, "Daily"); }) == ErrorCode::LengthMismatch);
  CHECK(code_of([&] { nearest_cluster(std::vector<double>(48, 1.0), idx, "Weekly"); }) == ErrorCode::UnknownScale);
}

TEST_CASE("index serialization round trip") {
  const auto x = noise(3000, 8);
  auto idx = build_cluster_index(x, table_configs("Climate"), {4, 2, 50});
  for (auto& s : idx.scales) {
    s.descriptions.clear();
    for (std::size_t j = 0; j < s.k; ++j) s.descriptions.push_back("cluster " + std::to_string(j) + " ü");
  }
  std::stringstream ss;
  save_index(idx, ss);
  const auto back = load_index(ss);
  REQUIRE(back.scales.size() == idx.scales.size());
  CHECK(back.metric == idx.metric);
  for (std::size_t i = 0; i < idx.scales.size(); ++i) {
    CHECK(back.scales[i].config == idx.scales[i].config);
    CHECK(back.scales[i].centroids == idx.scales[i].centroids);
    // Loaded indexes carry series offsets instead of window numbers.
    for (std::size_t j = 0; j < idx.scales[i].k; ++j) {
      CHECK(back.scales[i].representative[j] == idx.scales[i].window_starts[idx.scales[i].representative[j]]);
    }
    CHECK(back.scales[i].descriptions == idx.scales[i].descriptions);
  }
  std::stringstream junk("not an index");
  CHECK(code_of([&] { load_index(junk); }) == ErrorCode::FormatError);
}
