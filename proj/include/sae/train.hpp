#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sae/data.hpp"
#include "sae/eval.hpp"
#include "sae/model.hpp"
#include "sae/numerics.hpp"

namespace sae {

enum class AnnealKind { Constant, LinearWarmup };

struct AnnealSchedule {
  AnnealKind kind = AnnealKind::LinearWarmup;
  double warmup_fraction = 0.2;
};

// KL coefficient in effect at `step` of `steps`. Linear warmup ramps from 0
// and reaches `beta` at warmup_fraction * steps; a zero fraction is constant.
double anneal_beta(std::size_t step, const AnnealSchedule& schedule, double beta, std::size_t steps);

struct TrainConfig {
  Architecture arch = Architecture::SaeTopK;
  std::size_t input_dim = 64;
  std::size_t dict_size = 256;
  std::size_t k = 16;
  double l1_coeff = 0.0;
  double kl_coeff = 0.0;  // final value of the annealed coefficient
  AnnealSchedule anneal;
  std::size_t steps = 20000;
  std::size_t batch = 128;
  std::size_t buffer_capacity = 4096;
  AdamConfig adam;
  std::uint64_t seed = 0;
  bool decoder_norm = true;
  std::size_t eval_every = 1000;
  double dead_threshold = 1e-6;
  double holdout_fraction = 0.05;

  void validate() const;
  ModelConfig model(double beta_effective) const;

  // Canonical JSON (fixed key order). from_json rejects unknown keys and
  // falls back to the defaults above for missing ones.
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

// One held-out evaluation during training.
struct TrainLogRow {
  std::size_t step = 0;
  double loss = 0.0;
  double recon_mse = 0.0;
  double kl = 0.0;
  double l1 = 0.0;
  double beta_eff = 0.0;
  double l0_mean = 0.0;
  double fve = 0.0;
  double live_frac = 0.0;
  double cos_sim = 0.0;
};

inline constexpr const char* kMetricsCsvHeader =
    "step,loss,recon_mse,kl,l1,beta_eff,l0_mean,fve,live_frac,cos_sim";

std::string format_log_row(const TrainLogRow& row);
std::string metrics_csv(const std::vector<TrainLogRow>& rows);

// Data-dependent initialisation: b_dec is the mean of `first_buffer`, decoder
// columns are random unit vectors and the encoder is W_decᵀ / sqrt(d).
SaeParams init_params(const TrainConfig& cfg, const Matrix& first_buffer, Rng& rng);

struct Checkpoint {
  TrainConfig config;
  SaeParams params;
  AdamState adam;
  std::size_t step = 0;
  std::string noise_rng;
  ShuffleBufferState buffer;
  std::vector<TrainLogRow> log;
  std::vector<double> step_losses;
};

// "SAEP" files: the named-section container of tensor_file.hpp.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct TrainResult {
  SaeParams params;
  std::vector<TrainLogRow> log;
  std::vector<double> step_losses;  // training-batch total loss, one per step
};

// Resumable training loop. The last holdout_fraction of the store rows is
// held out for evaluation and never enters the shuffle buffer.
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const ActivationStore& data);
  Trainer(const Checkpoint& ckpt, const ActivationStore& data);

  // Runs until `step` updates have been applied (capped at cfg.steps).
  void run_until(std::size_t step);
  void run() { run_until(cfg_.steps); }

  std::size_t step() const { return step_; }
  bool done() const { return step_ >= cfg_.steps; }
  const TrainConfig& config() const { return cfg_; }
  const SaeParams& params() const { return params_; }
  const std::vector<TrainLogRow>& log() const { return log_; }
  const std::vector<double>& step_losses() const { return step_losses_; }

  Checkpoint checkpoint() const;
  TrainResult result() const { return {params_, log_, step_losses_}; }

  std::size_t train_rows() const { return train_end_; }

 private:
  void train_step();
  TrainLogRow evaluate_holdout() const;

  TrainConfig cfg_;
  const ActivationStore& data_;
  std::size_t train_end_;
  SaeParams params_;
  AdamState adam_;
  ShuffleBuffer buffer_;
  Rng noise_rng_;
  std::size_t step_ = 0;
  std::vector<TrainLogRow> log_;
  std::vector<double> step_losses_;
};

TrainResult train(const TrainConfig& cfg, const ActivationStore& data);

// Holdout split used by Trainer: rows [first, count) are evaluation rows.
std::size_t holdout_begin(std::size_t count, double holdout_fraction);

}  // namespace sae
