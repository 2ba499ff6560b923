#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "map4ts/core.hpp"

namespace map4ts::patch {

struct PatchConfig {
  std::string scale_name;
  std::size_t patch_size = 1;   // points per patch
  std::size_t window_size = 1;  // patches per window
  std::size_t data_points = 1;  // patch_size * window_size

  static PatchConfig make(std::string scale, std::size_t patch_size, std::size_t window_size);
};

bool operator==(const PatchConfig& a, const PatchConfig& b);

// Per-dataset multiscale configurations for the local-domain prompt.
std::vector<PatchConfig> table_configs(const std::string& dataset);
std::vector<std::string> table_datasets();

struct Segments {
  std::vector<std::size_t> starts;
  std::vector<std::vector<double>> windows;
};

// Windows of cfg.data_points points every `stride` points.
Segments segment(std::span<const double> series, const PatchConfig& cfg, std::size_t stride);

struct ScaleClusters {
  PatchConfig config;
  std::size_t k = 0;
  std::vector<std::vector<double>> centroids;
  // Training windows (z-normalized) and their series offsets. Not serialized.
  std::vector<std::vector<double>> windows;
  std::vector<std::size_t> window_starts;
  std::vector<std::size_t> assignment;
  std::vector<double> inertia_trace;
  std::size_t iterations = 0;
  // Per cluster: window indices (into `windows`).
  std::vector<std::size_t> representative;
  std::vector<std::vector<std::size_t>> nearest;
  std::vector<std::string> descriptions;
};

struct ClusterIndex {
  std::string metric = "euclidean-znorm";
  std::vector<ScaleClusters> scales;

  const ScaleClusters& scale(const std::string& name) const;
  bool has_scale(const std::string& name) const;
};

struct KMeansOptions {
  std::size_t k = 5;
  std::uint64_t seed = 1;
  std::size_t max_iter = 100;
};

double squared_distance(std::span<const double> a, std::span<const double> b);

// Lloyd iterations on z-normalized windows with k-means++ seeding.
ScaleClusters kmeans_fit(const std::vector<std::vector<double>>& windows, const KMeansOptions& opts);

// Fills representative and nearest (up to `n_nearest`) members per cluster.
void select_representatives(ScaleClusters& sc, std::size_t n_nearest = 5);
ClusterIndex select_representatives(ClusterIndex idx, std::size_t n_nearest = 5);

std::size_t nearest_cluster(std::span<const double> window, const ClusterIndex& idx,
                            const std::string& scale);
std::size_t nearest_cluster(std::span<const double> window, const ScaleClusters& sc);

// Segments, fits and selects representatives for every scale; descriptions
// are left empty for the prompt builder.
ClusterIndex build_cluster_index(std::span<const double> train_region,
                                 const std::vector<PatchConfig>& configs,
                                 const KMeansOptions& opts);

void save_index(const ClusterIndex& idx, std::ostream& out);
void save_index(const ClusterIndex& idx, const std::string& path);
ClusterIndex load_index(std::istream& in);
ClusterIndex load_index(const std::string& path);

}  // namespace map4ts::patch
