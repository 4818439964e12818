#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sae/numerics.hpp"

namespace sae {

// Parameters of the synthetic superposition generator. Feature j fires with
// probability feature_sparsity * decay^j and, when it fires, contributes
// a_j * dictionary column j with a_j ~ Uniform(0.5, 1.5).
struct SyntheticSpec {
  std::size_t input_dim = 64;
  std::size_t n_true_features = 128;
  double feature_sparsity = 0.05;
  double decay = 0.99;
  double noise_std = 0.01;
  std::uint64_t seed = 0;

  // Throws ConfigError naming the offending field and its bound.
  void validate() const;

  std::string to_json() const;
  static SyntheticSpec from_json(const std::string& text);
};

struct GroundTruth {
  Matrix dictionary;  // d x n_true, unit-norm columns
  std::vector<double> activation_prob;

  std::size_t input_dim() const { return dictionary.rows(); }
  std::size_t n_features() const { return dictionary.cols(); }
};

// Dictionary and firing probabilities; depends only on (input_dim,
// n_true_features, feature_sparsity, decay, seed).
GroundTruth make_ground_truth(const SyntheticSpec& spec);

// Rows of single-precision activations.
class ActivationStore {
 public:
  ActivationStore() = default;
  ActivationStore(std::size_t dim, std::vector<float> payload);
  static ActivationStore from_matrix(const Matrix& rows);

  std::size_t dim() const { return dim_; }
  std::size_t count() const { return dim_ == 0 ? 0 : payload_.size() / dim_; }
  std::span<const float> payload() const { return payload_; }
  std::span<const float> row(std::size_t i) const { return {payload_.data() + i * dim_, dim_}; }

  Matrix rows(std::size_t begin, std::size_t n) const;
  Matrix gather(std::span<const std::size_t> indices) const;

  bool operator==(const ActivationStore&) const = default;

 private:
  std::size_t dim_ = 0;
  std::vector<float> payload_;
};

// Sparse ground-truth coefficients of one sample.
struct SparseCode {
  std::vector<std::size_t> features;
  std::vector<double> amplitudes;
};

// Clamp values for SyntheticGenerator::draw_code.
enum class Clamp : std::int8_t { Free = 0, On = 1, Off = -1 };

class SyntheticGenerator {
 public:
  SyntheticGenerator(const SyntheticSpec& spec, const GroundTruth& truth, std::uint64_t stream_seed);

  // Background activity per the firing probabilities; `clamps`, when given,
  // has one entry per true feature and forces features on or off.
  SparseCode draw_code(std::span<const Clamp> clamps = {});
  // dictionary * coefficients + observation noise.
  std::vector<double> render(const SparseCode& code);

  const GroundTruth& truth() const { return truth_; }

 private:
  SyntheticSpec spec_;
  const GroundTruth& truth_;
  Rng rng_;
};

// Noise-free superposition sum_j coefficients[j] * dictionary column j.
std::vector<double> compose_sample(const GroundTruth& truth, std::span<const double> coefficients);

struct SyntheticData {
  GroundTruth truth;
  ActivationStore store;
};

SyntheticData generate_synthetic(const SyntheticSpec& spec, std::size_t n_samples);

// "SAEA" activation files: magic, u32 version = 1, u32 dtype = 1 (f32),
// u32 d, u64 n, then n*d little-endian f32 values row-major.
void write_activations(const ActivationStore& store, const std::filesystem::path& path);
ActivationStore read_activations(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_activations(const ActivationStore& store);
ActivationStore decode_activations(const std::vector<std::uint8_t>& bytes);

// Ground-truth dictionaries use the named-section container with magic "SAEG".
void write_ground_truth(const GroundTruth& truth, const SyntheticSpec& spec,
                        const std::filesystem::path& path);
struct GroundTruthFile {
  GroundTruth truth;
  SyntheticSpec spec;
};
GroundTruthFile read_ground_truth(const std::filesystem::path& path);

struct ShuffleBufferState {
  std::vector<std::size_t> slots;
  std::size_t live = 0;
  std::size_t cursor = 0;
  std::uint64_t epoch = 0;
  std::string rng;
};

// Reservoir-style shuffling over the row range [begin, end). The buffer holds
// up to `capacity` rows; each batch draws rows from it without replacement and
// the vacated slots are refilled in source order. When the source is
// exhausted the buffer drains, so every row is emitted exactly once per
// epoch; the final batch of an epoch may be short.
class ShuffleBuffer {
 public:
  ShuffleBuffer(std::size_t begin, std::size_t end, std::size_t capacity, std::size_t batch,
                std::uint64_t seed);

  std::vector<std::size_t> next_indices();
  Matrix next_batch(const ActivationStore& store) { return store.gather(next_indices()); }

  std::uint64_t epoch() const { return epoch_; }
  // Row indices currently held (used for data-dependent initialisation).
  std::vector<std::size_t> contents() const;

  ShuffleBufferState state() const;
  void restore(const ShuffleBufferState& state);

 private:
  void refill_all();

  std::size_t begin_;
  std::size_t end_;
  std::size_t capacity_;
  std::size_t batch_;
  std::vector<std::size_t> slots_;
  std::size_t live_ = 0;
  std::size_t cursor_;
  std::uint64_t epoch_ = 0;
  Rng rng_;
};

}  // namespace sae
