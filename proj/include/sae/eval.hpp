#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sae/data.hpp"
#include "sae/model.hpp"
#include "sae/numerics.hpp"

namespace sae {

// 1 - ||X - X̂||²_F / ||X - mean_row(X)||²_F, where mean_row is the mean
// activation vector broadcast to every row. Throws NumericalError for
// zero-variance X and ConfigError for fewer than two rows.
double explained_variance(const Matrix& x, const Matrix& xhat);

// Mean count of nonzero entries per row.
double mean_l0(const Matrix& codes);

struct CosineSummary {
  double mean = 0.0;
  std::size_t used_rows = 0;
  std::size_t excluded_rows = 0;  // zero norm in either matrix
};

CosineSummary mean_cosine_sim(const Matrix& x, const Matrix& xhat);

struct LiveFeatures {
  double live_frac = 0.0;
  std::vector<double> max_activation;  // per feature, 0 for never-selected features
  std::vector<bool> live;
};

// Running per-feature maxima over a stream of code chunks.
class LiveFeatureTracker {
 public:
  explicit LiveFeatureTracker(std::size_t dict_size);
  void add(const Matrix& codes);
  LiveFeatures result(double threshold) const;

 private:
  std::vector<double> max_;
  bool any_ = false;
};

// A feature is live iff its maximum code over the stream exceeds threshold.
LiveFeatures live_features(const Matrix& codes, double threshold);

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::size_t> counts;
};

// Uniform bins over [0, max] of the per-feature maxima of live features.
Histogram max_activation_histogram(const LiveFeatures& live, std::size_t bins = 50);
std::string histogram_csv(const Histogram& h);

struct RecoveryResult {
  double mmcs = 0.0;                   // mean over true atoms of the best cosine
  std::vector<double> best_cos;        // per true atom
  std::vector<std::size_t> best_match; // learned column index per true atom
  double greedy_mean = 0.0;            // one-to-one greedy matching
  std::vector<std::pair<std::size_t, std::size_t>> greedy_pairs;  // (true, learned)
};

// Signed cosine similarity between true atoms and learned decoder columns.
RecoveryResult dictionary_recovery(const Matrix& w_dec, const Matrix& true_dictionary);

struct MetricsRecord {
  std::size_t rows = 0;
  double recon_mse = 0.0;
  double fve = 0.0;
  double l0_mean = 0.0;
  double live_frac = 0.0;
  double cos_sim = 0.0;
  double kl = 0.0;
  double l1 = 0.0;
  LiveFeatures live;
  Histogram histogram;
};

// Deterministic evaluation over rows [begin, end) of the store, in chunks.
// The vSAE uses z = mu.
MetricsRecord evaluate_model(const SaeParams& params, const ModelConfig& cfg,
                             const ActivationStore& data, std::size_t begin, std::size_t end,
                             double dead_threshold, std::size_t chunk = 4096);

// Codes for rows [begin, end) of the store.
Matrix encode_rows(const SaeParams& params, const ModelConfig& cfg, const ActivationStore& data,
                   std::size_t begin, std::size_t end, std::size_t chunk = 4096);

}  // namespace sae
