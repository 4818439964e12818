#pragma once

// Linear probes on latent codes and the probe-ablation benchmarks built on
// them: spurious-correlation removal (SCR-lite) and targeted probe
// perturbation (TPP-lite). Both are desk-scale analogues driven by synthetic
// data whose attributes are tied to known ground-truth features.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sae/data.hpp"
#include "sae/numerics.hpp"

namespace sae {

struct ProbeOptions {
  double l2_reg = 1e-3;
  std::size_t iterations = 400;
};

// Multinomial logistic regression over code space.
struct LinearProbe {
  Matrix weights;  // m x C
  Matrix bias;     // 1 x C
  double train_accuracy = 0.0;

  std::size_t classes() const { return weights.cols(); }
};

// Full-batch accelerated gradient descent from zero weights with a step size
// fixed by a Lipschitz bound, so the result depends only on the inputs.
// Throws ConfigError when fewer than two classes are present.
LinearProbe train_probe(const Matrix& codes, std::span<const int> labels,
                        const ProbeOptions& options = {});

std::vector<int> probe_predict(const LinearProbe& probe, const Matrix& codes);
double probe_accuracy(const LinearProbe& probe, const Matrix& codes, std::span<const int> labels);

// Zeroes the given latent columns.
Matrix ablate_latents(const Matrix& codes, std::span<const std::size_t> latents);

// Latents ordered by decreasing score; ties go to the lower index. Only
// latents with score > 0 are returned.
std::vector<std::size_t> rank_latents(std::span<const double> scores);

// ---------------------------------------------------------------------------
// Labeled synthetic data.

struct LabeledSet {
  Matrix x;            // n x d activations
  Matrix true_codes;   // n x n_true ground-truth coefficients (the oracle codes)
  std::vector<int> labels;     // main attribute (SCR) or class id (TPP)
  std::vector<int> spurious;   // SCR only
};

struct ScrDesign {
  std::size_t main_feature = 5;      // fires w.p. main_signal when main = 1, 1 - main_signal otherwise
  std::size_t spurious_feature = 7;  // fires iff spurious = 1
  double main_signal = 0.75;
};

// `correlation` is P(spurious == main); 0.5 gives a balanced set.
LabeledSet make_scr_set(const SyntheticSpec& spec, const GroundTruth& truth, const ScrDesign& design,
                        std::size_t n, double correlation, std::uint64_t seed);

// Class c turns on feature `class_features[c]` and turns off the other class features.
LabeledSet make_tpp_set(const SyntheticSpec& spec, const GroundTruth& truth,
                        std::span<const std::size_t> class_features, std::size_t n,
                        std::uint64_t seed);

// ---------------------------------------------------------------------------
// SCR-lite.

struct ScrInputs {
  Matrix train_codes;  // biased split
  std::vector<int> train_main;
  std::vector<int> train_spurious;
  Matrix balanced_codes;  // used for the skyline probe
  std::vector<int> balanced_main;
  Matrix test_codes;  // balanced evaluation split
  std::vector<int> test_main;
};

struct ScrResult {
  std::vector<std::size_t> thresholds;
  std::vector<std::size_t> ablated;  // after capping at the live-latent count
  std::vector<double> accuracy;      // main-probe accuracy on the balanced test split
  std::vector<double> normalized;    // (acc - baseline) / (skyline - baseline)
  double baseline_accuracy = 0.0;
  double skyline_accuracy = 0.0;
  std::vector<std::string> warnings;
};

// For each threshold t: ablate the top-t latents by spurious-probe
// attribution (|weight| x |mean activation|), retrain the main probe on the
// biased split and score it on the balanced test split.
ScrResult scr_lite(const ScrInputs& in, std::span<const std::size_t> thresholds,
                   const ProbeOptions& options = {});

// ---------------------------------------------------------------------------
// TPP-lite.

struct TppInputs {
  Matrix train_codes;
  std::vector<int> train_labels;
  Matrix test_codes;
  std::vector<int> test_labels;
};

struct TppResult {
  std::vector<std::size_t> thresholds;
  std::vector<double> intended_drop;    // averaged over classes
  std::vector<double> unintended_drop;  // averaged over classes
  std::vector<double> selectivity;      // intended - unintended
  std::vector<std::string> warnings;
};

// One-vs-rest probes per class. For class c and threshold t the top-t latents
// with positive attribution toward c (weight x mean activation) are ablated
// on the test split; the probes are not retrained.
TppResult tpp_lite(const TppInputs& in, std::span<const std::size_t> thresholds,
                   const ProbeOptions& options = {});

// Per-class drops for one explicit ablation set (exposed for tests).
struct TppDrops {
  double intended = 0.0;
  double unintended = 0.0;
};
TppDrops tpp_drops_for_set(const std::vector<LinearProbe>& probes, const TppInputs& in,
                           std::size_t target_class, std::span<const std::size_t> ablated);

}  // namespace sae
