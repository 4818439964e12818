#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sae/model.hpp"
#include "sae/numerics.hpp"

namespace sae {

// ---------------------------------------------------------------------------
// Per-feature utilization.

struct FeatureStats {
  std::vector<double> utilization;      // fraction of samples with code > threshold
  std::vector<double> mean_activation;  // mean of those codes; 0 for dead features
  std::vector<bool> live;
  std::size_t samples = 0;
};

class FeatureStatsAccumulator {
 public:
  FeatureStatsAccumulator(std::size_t dict_size, double threshold);
  void add(const Matrix& codes);
  FeatureStats result() const;

 private:
  double threshold_;
  std::vector<std::size_t> count_;
  std::vector<double> sum_;
  std::size_t samples_ = 0;
};

FeatureStats feature_stats(const Matrix& codes, double threshold = 0.0);

// ---------------------------------------------------------------------------
// k-means.

struct KMeansResult {
  std::vector<std::size_t> assignments;
  Matrix centroids;
  double inertia = 0.0;
  std::vector<double> inertia_history;  // after each assignment step
  std::size_t iterations = 0;
};

// Lloyd iterations from k-means++ seeding. An empty cluster is reseeded with
// the point farthest from its current centroid.
KMeansResult kmeans(const Matrix& points, std::size_t k, Rng& rng, std::size_t max_iter = 300);

// ---------------------------------------------------------------------------
// Exact t-SNE.

struct TsneConfig {
  double perplexity = 30.0;
  std::size_t iterations = 1000;
  double early_exaggeration = 12.0;
  std::size_t exaggeration_iters = 250;
  double learning_rate = 200.0;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  std::size_t momentum_switch = 250;
  double perplexity_tolerance = 1e-5;
  std::uint64_t seed = 0;
};

struct Affinities {
  Matrix conditional;  // row i is P(j | i)
  std::vector<double> precision;  // 1 / (2 sigma_i^2)
  Matrix joint;        // symmetrized, sums to 1
};

// Per-point bandwidths by bisection on the conditional entropy so that
// exp(H(P_i)) matches the perplexity.
Affinities tsne_affinities(const Matrix& points, double perplexity, double tolerance = 1e-5);

struct Embedding2D {
  Matrix coords;  // n x 2
  double kl_after_exaggeration = 0.0;
  double final_kl = 0.0;
};

// Throws ConfigError for fewer than 4 points or perplexity >= (n - 1) / 3, and
// NumericalError when all points coincide.
Embedding2D tsne(const Matrix& points, const TsneConfig& cfg);

// KL(P || Q) of a 2-D layout against joint affinities.
double tsne_kl(const Matrix& joint, const Matrix& coords);

// ---------------------------------------------------------------------------
// Cosine similarity.

struct CosineMatrix {
  Matrix similarity;                  // over the kept rows
  std::vector<std::size_t> kept;      // original row indices
  std::vector<std::size_t> excluded;  // zero-norm rows
};

CosineMatrix cosine_matrix(const Matrix& vectors);

// ---------------------------------------------------------------------------
// Global latent report.

struct GlobalReportConfig {
  std::size_t clusters = 10;
  double threshold = 1e-6;
  TsneConfig tsne;
  std::size_t kmeans_iters = 300;
};

struct ClusterRow {
  std::size_t cluster = 0;
  std::size_t size = 0;
  double mean_utilization = 0.0;
};

struct GlobalReport {
  bool skipped = false;
  std::string diagnostic;
  std::vector<std::size_t> live_features;
  Embedding2D embedding;
  std::vector<std::size_t> cluster_of;  // per live feature
  std::vector<double> utilization;      // per live feature
  std::vector<double> mean_activation;  // per live feature
  std::vector<ClusterRow> clusters;
  double effective_perplexity = 0.0;
  double cluster_utilization_variance = 0.0;
};

// Embeds the unit-normalized decoder columns of live features and clusters the
// embedding. Skipped (with a diagnostic) when fewer than four features are live.
GlobalReport global_report(const SaeParams& params, const FeatureStats& stats,
                           const GlobalReportConfig& cfg);

// Writes clusters.csv, utilization.csv, mean_activation.csv, cluster_utilization.csv.
std::vector<std::filesystem::path> write_report_tables(const GlobalReport& report,
                                                       const std::filesystem::path& dir);

// Mean silhouette coefficient of `labels` over Euclidean distances.
double silhouette_score(const Matrix& points, const std::vector<std::size_t>& labels);

}  // namespace sae
