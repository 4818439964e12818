#pragma once

// TopK sparse autoencoder and its variational variant.
//
// Both architectures share the parameter layout
//   w_enc  m x d     b_enc  1 x m
//   w_dec  d x m     b_dec  1 x d
// with batches stored one sample per row. The SAE path is
//   f = ReLU(x W_encᵀ + b_enc),  codes = TopK(f)
// and the vSAE path is
//   mu = (x - b_dec) W_encᵀ + b_enc,  z = mu + eps,  codes = TopK(z)
// with unit posterior variance. Both decode as codes W_decᵀ + b_dec.

#include <array>
#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "sae/numerics.hpp"

namespace sae {

enum class Architecture { SaeTopK, VsaeTopK };

std::string_view to_string(Architecture arch);
Architecture parse_architecture(std::string_view name);

struct SaeParams {
  static constexpr std::size_t kWEnc = 0;
  static constexpr std::size_t kBEnc = 1;
  static constexpr std::size_t kWDec = 2;
  static constexpr std::size_t kBDec = 3;
  static constexpr std::array<std::string_view, 4> kNames = {"w_enc", "b_enc", "w_dec", "b_dec"};

  std::array<Matrix, 4> tensors;

  static SaeParams zeros(std::size_t input_dim, std::size_t dict_size);

  Matrix& w_enc() { return tensors[kWEnc]; }
  Matrix& b_enc() { return tensors[kBEnc]; }
  Matrix& w_dec() { return tensors[kWDec]; }
  Matrix& b_dec() { return tensors[kBDec]; }
  const Matrix& w_enc() const { return tensors[kWEnc]; }
  const Matrix& b_enc() const { return tensors[kBEnc]; }
  const Matrix& w_dec() const { return tensors[kWDec]; }
  const Matrix& b_dec() const { return tensors[kBDec]; }

  std::size_t input_dim() const { return w_dec().rows(); }
  std::size_t dict_size() const { return w_dec().cols(); }

  // Throws DimensionError unless the four tensors agree on (d, m).
  void check_shapes() const;

  bool operator==(const SaeParams&) const = default;
};

// Gradients share the parameter layout.
using SaeGrads = SaeParams;

struct ModelConfig {
  Architecture arch = Architecture::SaeTopK;
  std::size_t k = 16;
  double l1_coeff = 0.0;  // SAE only
  double kl_coeff = 0.0;  // vSAE only; the annealed value when training
};

// Per-row TopK selection. Indices are stored row-major, k per row, ascending
// within each row.
struct TopKResult {
  Matrix codes;
  std::size_t k = 0;
  std::vector<std::size_t> indices;

  std::span<const std::size_t> row_indices(std::size_t r) const {
    return {indices.data() + r * k, k};
  }
};

struct ForwardTrace {
  Architecture arch = Architecture::SaeTopK;
  Matrix x;
  Matrix preact;  // ReLU output f (SAE) or sampled z (vSAE)
  Matrix mu;      // vSAE only
  Matrix eps;     // vSAE only; zeros when evaluated without sampling
  TopKResult topk;
  Matrix xhat;

  const Matrix& codes() const { return topk.codes; }
};

struct LossBreakdown {
  double total = 0.0;
  double recon_mse = 0.0;  // squared L2 error summed over dims, averaged over rows
  double sparsity_l1 = 0.0;
  double kl = 0.0;
  double beta_effective = 0.0;
};

struct ForwardResult {
  ForwardTrace trace;
  LossBreakdown loss;
};

Matrix sae_encode(const Matrix& x, const SaeParams& params);
Matrix vsae_encode_mean(const Matrix& x, const SaeParams& params);
Matrix reparameterize(const Matrix& mu, const Matrix& eps);

// Keeps the k largest values (signed, not magnitude) in each row. Ties go to
// the lower index. Throws ConfigError unless 1 <= k <= cols.
TopKResult topk_select(const Matrix& v, std::size_t k);

Matrix decode(const Matrix& codes, const SaeParams& params);

// Batch mean of 0.5 * sum_i mu_i^2, the KL to N(0, I) at unit variance.
double kl_divergence(const Matrix& mu);

// Full pass. `noise` supplies eps for the vSAE; nullptr evaluates z = mu.
ForwardResult forward(const Matrix& x, const SaeParams& params, const ModelConfig& cfg,
                      const Matrix* noise = nullptr);

// Training-mode pass: the vSAE draws eps ~ N(0, I) from rng.
ForwardResult forward_sampled(const Matrix& x, const SaeParams& params, const ModelConfig& cfg,
                              Rng& rng);

// Gradient of the loss w.r.t. the encoder pre-activation: mu for the vSAE,
// the pre-ReLU input for the SAE.
Matrix latent_gradient(const ForwardTrace& trace, const SaeParams& params,
                       const ModelConfig& cfg);

// Analytic gradients of forward(...).loss.total for all four tensors.
SaeGrads backward(const ForwardTrace& trace, const SaeParams& params, const ModelConfig& cfg);

// Deterministic codes for analysis: ReLU+TopK for the SAE, TopK(mu) for the vSAE.
Matrix encode_codes(const Matrix& x, const SaeParams& params, const ModelConfig& cfg);

}  // namespace sae
