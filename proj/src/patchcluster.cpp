#include "map4ts/patchcluster.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "map4ts/binio.hpp"

namespace map4ts::patch {

namespace {

constexpr char kIndexMagic[5] = "M4CI";
constexpr std::uint32_t kIndexVersion = 1;

struct TableRow {
  const char* dataset;
  const char* scale;
  std::size_t patch;
  std::size_t window;
};

// Local-domain segmentation registry, one row per (dataset, timescale).
constexpr TableRow kTable[] = {
    {"ETTh1", "Daily", 24, 7},        {"ETTh1", "Weekly", 168, 2},
    {"ETTh1", "Monthly", 720, 1},     {"ETTh2", "Daily", 24, 7},
    {"ETTh2", "Weekly", 168, 2},      {"ETTh2", "Monthly", 720, 1},
    {"Electricity", "Daily", 24, 7},  {"Electricity", "Weekly", 168, 2},
    {"Electricity", "Monthly", 720, 1}, {"Traffic", "Daily", 24, 7},
    {"Traffic", "Weekly", 168, 2},    {"Traffic", "Monthly", 720, 1},
    {"Environment", "Weekly", 7, 12}, {"Environment", "Monthly", 30, 6},
    {"Environment", "Yearly", 365, 1}, {"Climate", "Weekly", 1, 12},
    {"Climate", "Monthly", 4, 6},     {"Climate", "Yearly", 52, 1},
    {"Health", "Weekly", 12, 1},      {"Health", "Monthly", 4, 6},
    {"Health", "Yearly", 52, 1},      {"Agriculture", "Monthly", 1, 6},
    {"Agriculture", "Yearly", 12, 1},
};

std::vector<double> znorm(std::span<const double> w) {
  return core::instance_normalize(w).values;
}

}  // namespace

PatchConfig PatchConfig::make(std::string scale, std::size_t patch_size, std::size_t window_size) {
  if (patch_size < 1 || window_size < 1) {
    throw Error(ErrorCode::InvalidArgument, "patch and window sizes must be positive");
  }
  return PatchConfig{std::move(scale), patch_size, window_size, patch_size * window_size};
}

bool operator==(const PatchConfig& a, const PatchConfig& b) {
  return a.scale_name == b.scale_name && a.patch_size == b.patch_size &&
         a.window_size == b.window_size && a.data_points == b.data_points;
}

std::vector<PatchConfig> table_configs(const std::string& dataset) {
  std::vector<PatchConfig> out;
  for (const auto& row : kTable) {
    if (dataset == row.dataset) out.push_back(PatchConfig::make(row.scale, row.patch, row.window));
  }
  if (out.empty()) throw Error(ErrorCode::UnknownDataset, "no patch table entry for " + dataset);
  return out;
}

std::vector<std::string> table_datasets() {
  std::vector<std::string> out;
  for (const auto& row : kTable) {
    if (std::find(out.begin(), out.end(), row.dataset) == out.end()) out.emplace_back(row.dataset);
  }
  return out;
}

Segments segment(std::span<const double> series, const PatchConfig& cfg, std::size_t stride) {
  if (stride < 1) throw Error(ErrorCode::InvalidArgument, "stride must be positive");
  if (series.size() < cfg.data_points) {
    throw Error(ErrorCode::SeriesTooShort, "series of " + std::to_string(series.size()) +
                                               " points shorter than " +
                                               std::to_string(cfg.data_points));
  }
  Segments s;
  for (std::size_t start = 0; start + cfg.data_points <= series.size(); start += stride) {
    s.starts.push_back(start);
    s.windows.emplace_back(series.begin() + static_cast<std::ptrdiff_t>(start),
                           series.begin() + static_cast<std::ptrdiff_t>(start + cfg.data_points));
  }
  return s;
}

const ScaleClusters& ClusterIndex::scale(const std::string& name) const {
  for (const auto& s : scales) {
    if (s.config.scale_name == name) return s;
  }
  throw Error(ErrorCode::UnknownScale, "no clusters for scale '" + name + "'");
}

bool ClusterIndex::has_scale(const std::string& name) const {
  return std::any_of(scales.begin(), scales.end(),
                     [&](const ScaleClusters& s) { return s.config.scale_name == name; });
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

namespace {

std::size_t argmin_centroid(std::span<const double> x, const std::vector<std::vector<double>>& c,
                            double* best_out = nullptr) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < c.size(); ++j) {
    const double d = squared_distance(x, c[j]);
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  if (best_out) *best_out = best_d;
  return best;
}

// Assigns every point; empty clusters take the currently farthest point.
double assign(ScaleClusters& sc) {
  const auto& X = sc.windows;
  std::vector<double> dist(X.size());
  for (std::size_t i = 0; i < X.size(); ++i) sc.assignment[i] = argmin_centroid(X[i], sc.centroids, &dist[i]);
  for (std::size_t j = 0; j < sc.k; ++j) {
    const bool empty = std::none_of(sc.assignment.begin(), sc.assignment.end(),
                                    [j](std::size_t a) { return a == j; });
    if (!empty) continue;
    std::size_t far = 0;
    for (std::size_t i = 1; i < X.size(); ++i) {
      if (dist[i] > dist[far]) far = i;
    }
    sc.centroids[j] = X[far];
    sc.assignment[far] = j;
    dist[far] = 0.0;
  }
  return std::accumulate(dist.begin(), dist.end(), 0.0);
}

}  // namespace

ScaleClusters kmeans_fit(const std::vector<std::vector<double>>& windows, const KMeansOptions& opts) {
  if (opts.k < 1) throw Error(ErrorCode::InvalidArgument, "k must be >= 1");
  if (windows.size() < opts.k) {
    throw Error(ErrorCode::TooFewWindows, std::to_string(windows.size()) + " windows for k=" +
                                              std::to_string(opts.k));
  }
  const std::size_t dim = windows.front().size();
  ScaleClusters sc;
  sc.k = opts.k;
  sc.windows.reserve(windows.size());
  for (const auto& w : windows) {
    if (w.size() != dim) throw Error(ErrorCode::LengthMismatch, "windows differ in length");
    sc.windows.push_back(znorm(w));
  }
  const auto& X = sc.windows;
  const std::size_t n = X.size();

  // k-means++ seeding.
  std::mt19937_64 rng(opts.seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  sc.centroids.push_back(X[pick(rng)]);
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(X[i], sc.centroids[0]);
  while (sc.centroids.size() < opts.k) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t chosen = 0;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      const double target = u(rng);
      double acc = 0.0;
      chosen = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc > target && d2[i] > 0.0) {
          chosen = i;
          break;
        }
      }
      while (d2[chosen] == 0.0 && chosen > 0) --chosen;
    }
    sc.centroids.push_back(X[chosen]);
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(X[i], sc.centroids.back()));
    }
  }

  sc.assignment.assign(n, 0);
  double inertia = assign(sc);
  sc.inertia_trace.push_back(inertia);
  for (std::size_t it = 0; it < opts.max_iter; ++it) {
    std::vector<std::vector<double>> sums(opts.k, std::vector<double>(dim, 0.0));
    std::vector<std::size_t> counts(opts.k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto& s = sums[sc.assignment[i]];
      for (std::size_t d = 0; d < dim; ++d) s[d] += X[i][d];
      ++counts[sc.assignment[i]];
    }
    for (std::size_t j = 0; j < opts.k; ++j) {
      if (counts[j] == 0) continue;
      for (std::size_t d = 0; d < dim; ++d) sc.centroids[j][d] = sums[j][d] / static_cast<double>(counts[j]);
    }
    const auto before = sc.assignment;
    inertia = assign(sc);
    sc.inertia_trace.push_back(inertia);
    sc.iterations = it + 1;
    if (sc.assignment == before) break;
  }
  select_representatives(sc);
  return sc;
}

void select_representatives(ScaleClusters& sc, std::size_t n_nearest) {
  sc.representative.assign(sc.k, 0);
  sc.nearest.assign(sc.k, {});
  for (std::size_t j = 0; j < sc.k; ++j) {
    std::vector<std::pair<double, std::size_t>> members;
    for (std::size_t i = 0; i < sc.windows.size(); ++i) {
      if (sc.assignment[i] == j) members.emplace_back(squared_distance(sc.windows[i], sc.centroids[j]), i);
    }
    // Ties fall back to the window with the lowest start offset.
    std::sort(members.begin(), members.end(), [&](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first < b.first;
      const std::size_t sa = sc.window_starts.empty() ? a.second : sc.window_starts[a.second];
      const std::size_t sb = sc.window_starts.empty() ? b.second : sc.window_starts[b.second];
      return sa < sb;
    });
    if (members.empty()) continue;
    sc.representative[j] = members.front().second;
    for (std::size_t m = 0; m < members.size() && m < n_nearest; ++m) {
      sc.nearest[j].push_back(members[m].second);
    }
  }
}

ClusterIndex select_representatives(ClusterIndex idx, std::size_t n_nearest) {
  for (auto& s : idx.scales) select_representatives(s, n_nearest);
  return idx;
}

std::size_t nearest_cluster(std::span<const double> window, const ScaleClusters& sc) {
  if (window.size() != sc.config.data_points) {
    throw Error(ErrorCode::LengthMismatch, "query of " + std::to_string(window.size()) +
                                               " points for scale " + sc.config.scale_name +
                                               " expecting " +
                                               std::to_string(sc.config.data_points));
  }
  const auto q = znorm(window);
  return argmin_centroid(q, sc.centroids);
}

std::size_t nearest_cluster(std::span<const double> window, const ClusterIndex& idx,
                            const std::string& scale) {
  return nearest_cluster(window, idx.scale(scale));
}

ClusterIndex build_cluster_index(std::span<const double> train_region,
                                 const std::vector<PatchConfig>& configs,
                                 const KMeansOptions& opts) {
  ClusterIndex idx;
  for (const auto& cfg : configs) {
    auto seg = segment(train_region, cfg, cfg.patch_size);
    KMeansOptions o = opts;
    o.k = std::min(opts.k, seg.windows.size());
    auto sc = kmeans_fit(seg.windows, o);
    sc.config = cfg;
    sc.window_starts = std::move(seg.starts);
    select_representatives(sc);
    idx.scales.push_back(std::move(sc));
  }
  return idx;
}

void save_index(const ClusterIndex& idx, std::ostream& out) {
  using namespace binio;
  out.write(kIndexMagic, 4);
  write_pod<std::uint32_t>(out, kIndexVersion);
  write_string(out, idx.metric);
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(idx.scales.size()));
  for (const auto& s : idx.scales) {
    write_string(out, s.config.scale_name);
    write_pod<std::uint64_t>(out, s.config.patch_size);
    write_pod<std::uint64_t>(out, s.config.window_size);
    write_pod<std::uint64_t>(out, s.config.data_points);
    write_pod<std::uint64_t>(out, s.k);
    for (const auto& c : s.centroids) {
      for (double v : c) write_pod<double>(out, v);
    }
    for (std::size_t j = 0; j < s.k; ++j) {
      const std::size_t r = s.representative.at(j);
      write_pod<std::uint64_t>(out, s.window_starts.empty() ? r : s.window_starts[r]);
    }
    for (std::size_t j = 0; j < s.k; ++j) {
      const auto& near = s.nearest.at(j);
      write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(near.size()));
      for (std::size_t m : near) write_pod<std::uint64_t>(out, s.window_starts.empty() ? m : s.window_starts[m]);
    }
    for (std::size_t j = 0; j < s.k; ++j) {
      write_string(out, j < s.descriptions.size() ? s.descriptions[j] : std::string());
    }
  }
  if (!out) throw Error(ErrorCode::IoFailure, "failed writing cluster index");
}

void save_index(const ClusterIndex& idx, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path);
  save_index(idx, out);
}

ClusterIndex load_index(std::istream& in) {
  using namespace binio;
  expect_magic(in, kIndexMagic);
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kIndexVersion) throw Error(ErrorCode::FormatError, "unsupported index version");
  ClusterIndex idx;
  idx.metric = read_string(in);
  const auto n_scales = read_pod<std::uint32_t>(in);
  for (std::uint32_t si = 0; si < n_scales; ++si) {
    ScaleClusters s;
    s.config.scale_name = read_string(in);
    s.config.patch_size = read_pod<std::uint64_t>(in);
    s.config.window_size = read_pod<std::uint64_t>(in);
    s.config.data_points = read_pod<std::uint64_t>(in);
    s.k = read_pod<std::uint64_t>(in);
    if (s.k > (1u << 20) || s.config.data_points > (1u << 24)) {
      throw Error(ErrorCode::FormatError, "index dimensions out of range");
    }
    s.centroids.assign(s.k, std::vector<double>(s.config.data_points));
    for (auto& c : s.centroids) {
      for (double& v : c) v = read_pod<double>(in);
    }
    // After loading, member references are series offsets.
    s.representative.resize(s.k);
    for (auto& r : s.representative) r = read_pod<std::uint64_t>(in);
    s.nearest.resize(s.k);
    for (auto& near : s.nearest) {
      const auto cnt = read_pod<std::uint32_t>(in);
      for (std::uint32_t m = 0; m < cnt; ++m) near.push_back(read_pod<std::uint64_t>(in));
    }
    s.descriptions.resize(s.k);
    for (auto& d : s.descriptions) d = read_string(in);
    idx.scales.push_back(std::move(s));
  }
  return idx;
}

ClusterIndex load_index(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path);
  return load_index(in);
}

}  // namespace map4ts::patch
