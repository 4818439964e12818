#include "sae/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <sstream>

#include "sae/errors.hpp"
#include "sae/tensor_file.hpp"

namespace sae {

namespace {

constexpr std::uint64_t kBufferStream = 10;
constexpr std::uint64_t kInitStream = 11;
constexpr std::uint64_t kNoiseStream = 12;

std::string_view anneal_name(AnnealKind kind) {
  return kind == AnnealKind::Constant ? "constant" : "linear_warmup";
}

AnnealKind parse_anneal(const std::string& name) {
  if (name == "constant") return AnnealKind::Constant;
  if (name == "linear_warmup") return AnnealKind::LinearWarmup;
  throw ConfigError("anneal: unknown schedule '" + name + "' (expected constant or linear_warmup)");
}

}  // namespace

double anneal_beta(std::size_t step, const AnnealSchedule& schedule, double beta, std::size_t steps) {
  if (schedule.kind == AnnealKind::Constant || schedule.warmup_fraction <= 0.0) return beta;
  const double ramp = schedule.warmup_fraction * static_cast<double>(steps);
  const double progress = std::min(static_cast<double>(std::min(step, steps)), ramp) / ramp;
  return beta * progress;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (input_dim < 1) fail("input_dim must be >= 1");
  if (dict_size < 1) fail("dict_size must be >= 1");
  if (k < 1 || k > dict_size) {
    fail("k must lie in [1, dict_size=" + std::to_string(dict_size) + "], got " + std::to_string(k));
  }
  if (!(l1_coeff >= 0.0)) fail("l1_coeff must be >= 0");
  if (!(kl_coeff >= 0.0)) fail("kl_coeff must be >= 0");
  if (!(anneal.warmup_fraction >= 0.0 && anneal.warmup_fraction <= 1.0)) {
    fail("warmup_fraction must lie in [0, 1]");
  }
  if (steps < 1) fail("steps must be >= 1");
  if (batch < 1) fail("batch must be >= 1");
  if (buffer_capacity < batch) fail("buffer_capacity must be >= batch");
  if (!(adam.lr >= 0.0)) fail("lr must be >= 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) fail("adam_beta1 must lie in [0, 1)");
  if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) fail("adam_beta2 must lie in [0, 1)");
  if (!(adam.eps > 0.0)) fail("adam_eps must be > 0");
  if (eval_every < 1) fail("eval_every must be >= 1");
  if (!(dead_threshold >= 0.0)) fail("dead_threshold must be >= 0");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) fail("holdout_fraction must lie in (0, 1)");
}

ModelConfig TrainConfig::model(double beta_effective) const {
  return {arch, k, l1_coeff, beta_effective};
}

std::string TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["arch"] = std::string(to_string(arch));
  j["input_dim"] = input_dim;
  j["dict_size"] = dict_size;
  j["k"] = k;
  j["l1_coeff"] = l1_coeff;
  j["kl_coeff"] = kl_coeff;
  j["anneal"] = std::string(anneal_name(anneal.kind));
  j["warmup_fraction"] = anneal.warmup_fraction;
  j["steps"] = steps;
  j["batch"] = batch;
  j["buffer_capacity"] = buffer_capacity;
  j["lr"] = adam.lr;
  j["adam_beta1"] = adam.beta1;
  j["adam_beta2"] = adam.beta2;
  j["adam_eps"] = adam.eps;
  j["seed"] = seed;
  j["decoder_norm"] = decoder_norm;
  j["eval_every"] = eval_every;
  j["dead_threshold"] = dead_threshold;
  j["holdout_fraction"] = holdout_fraction;
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");

  TrainConfig cfg;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "arch") cfg.arch = parse_architecture(value.get<std::string>());
      else if (key == "input_dim") cfg.input_dim = value.get<std::size_t>();
      else if (key == "dict_size") cfg.dict_size = value.get<std::size_t>();
      else if (key == "k") cfg.k = value.get<std::size_t>();
      else if (key == "l1_coeff") cfg.l1_coeff = value.get<double>();
      else if (key == "kl_coeff") cfg.kl_coeff = value.get<double>();
      else if (key == "anneal") cfg.anneal.kind = parse_anneal(value.get<std::string>());
      else if (key == "warmup_fraction") cfg.anneal.warmup_fraction = value.get<double>();
      else if (key == "steps") cfg.steps = value.get<std::size_t>();
      else if (key == "batch") cfg.batch = value.get<std::size_t>();
      else if (key == "buffer_capacity") cfg.buffer_capacity = value.get<std::size_t>();
      else if (key == "lr") cfg.adam.lr = value.get<double>();
      else if (key == "adam_beta1") cfg.adam.beta1 = value.get<double>();
      else if (key == "adam_beta2") cfg.adam.beta2 = value.get<double>();
      else if (key == "adam_eps") cfg.adam.eps = value.get<double>();
      else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
      else if (key == "decoder_norm") cfg.decoder_norm = value.get<bool>();
      else if (key == "eval_every") cfg.eval_every = value.get<std::size_t>();
      else if (key == "dead_threshold") cfg.dead_threshold = value.get<double>();
      else if (key == "holdout_fraction") cfg.holdout_fraction = value.get<double>();
      else throw ConfigError("unknown config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

std::string format_log_row(const TrainLogRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g",
                r.step, r.loss, r.recon_mse, r.kl, r.l1, r.beta_eff, r.l0_mean, r.fve,
                r.live_frac, r.cos_sim);
  return buf;
}

std::string metrics_csv(const std::vector<TrainLogRow>& rows) {
  std::string out = std::string(kMetricsCsvHeader) + "\n";
  for (const auto& r : rows) out += format_log_row(r) + "\n";
  return out;
}

SaeParams init_params(const TrainConfig& cfg, const Matrix& first_buffer, Rng& rng) {
  if (first_buffer.rows() == 0) throw ConfigError("init_params: empty initial buffer");
  if (first_buffer.cols() != cfg.input_dim) {
    throw DimensionError("init_params: buffer has d=" + std::to_string(first_buffer.cols()) +
                         ", config input_dim=" + std::to_string(cfg.input_dim));
  }
  SaeParams p = SaeParams::zeros(cfg.input_dim, cfg.dict_size);
  p.b_dec() = column_mean(first_buffer);
  p.w_dec() = gaussian_sample(rng, cfg.input_dim, cfg.dict_size);
  normalize_columns(p.w_dec());
  p.w_enc() = transpose(p.w_dec());
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.input_dim));
  for (double& v : p.w_enc().values()) v *= scale;
  return p;
}

std::size_t holdout_begin(std::size_t count, double holdout_fraction) {
  const auto held = static_cast<std::size_t>(std::ceil(holdout_fraction * static_cast<double>(count)));
  return count - std::min(held, count);
}

namespace {

std::size_t checked_train_end(const TrainConfig& cfg, const ActivationStore& data) {
  cfg.validate();
  if (data.dim() != cfg.input_dim) {
    throw DimensionError("training data has d=" + std::to_string(data.dim()) +
                         " but config input_dim=" + std::to_string(cfg.input_dim));
  }
  const std::size_t end = holdout_begin(data.count(), cfg.holdout_fraction);
  if (end < 1 || data.count() - end < 2) {
    throw ConfigError("dataset of " + std::to_string(data.count()) +
                      " rows is too small for a train/holdout split");
  }
  return end;
}

}  // namespace

Trainer::Trainer(const TrainConfig& cfg, const ActivationStore& data)
    : cfg_(cfg),
      data_(data),
      train_end_(checked_train_end(cfg, data)),
      buffer_(0, train_end_, cfg.buffer_capacity, cfg.batch, derive_seed(cfg.seed, kBufferStream)),
      noise_rng_(derive_seed(cfg.seed, kNoiseStream)) {
  Rng init_rng(derive_seed(cfg.seed, kInitStream));
  params_ = init_params(cfg_, data_.gather(buffer_.contents()), init_rng);
  adam_ = AdamState::zeros_like(params_.tensors);
}

Trainer::Trainer(const Checkpoint& ckpt, const ActivationStore& data)
    : cfg_(ckpt.config),
      data_(data),
      train_end_(checked_train_end(ckpt.config, data)),
      params_(ckpt.params),
      adam_(ckpt.adam),
      buffer_(0, train_end_, ckpt.config.buffer_capacity, ckpt.config.batch,
              derive_seed(ckpt.config.seed, kBufferStream)),
      noise_rng_(Rng::deserialize(ckpt.noise_rng)),
      step_(ckpt.step),
      log_(ckpt.log),
      step_losses_(ckpt.step_losses) {
  buffer_.restore(ckpt.buffer);
  params_.check_shapes();
  if (params_.input_dim() != cfg_.input_dim || params_.dict_size() != cfg_.dict_size) {
    throw FormatError(FormatErrorKind::DimMismatch, "checkpoint tensors disagree with its config");
  }
}

void Trainer::run_until(std::size_t step) {
  const std::size_t target = std::min(step, cfg_.steps);
  while (step_ < target) train_step();
}

void Trainer::train_step() {
  const std::size_t step = step_ + 1;
  const double beta = anneal_beta(step, cfg_.anneal, cfg_.kl_coeff, cfg_.steps);
  const ModelConfig model = cfg_.model(beta);
  const Matrix x = buffer_.next_batch(data_);
  const ForwardResult fr = forward_sampled(x, params_, model, noise_rng_);
  const LossBreakdown& loss = fr.loss;
  if (!std::isfinite(loss.total)) {
    std::ostringstream os;
    os << "non-finite loss at step " << step << ": total=" << loss.total
       << " recon_mse=" << loss.recon_mse << " l1=" << loss.sparsity_l1 << " kl=" << loss.kl;
    const char* culprit = !std::isfinite(loss.recon_mse) ? "recon_mse"
                          : !std::isfinite(loss.kl)      ? "kl"
                                                         : "l1";
    os << " (first non-finite component: " << culprit << ")";
    throw NumericalError(os.str());
  }
  const SaeGrads grads = backward(fr.trace, params_, model);
  adam_step(params_.tensors, grads.tensors, adam_, cfg_.adam);
  if (cfg_.decoder_norm) normalize_columns(params_.w_dec());

  step_ = step;
  step_losses_.push_back(loss.total);
  if (step_ % cfg_.eval_every == 0 || step_ == cfg_.steps) log_.push_back(evaluate_holdout());
}

TrainLogRow Trainer::evaluate_holdout() const {
  const double beta = anneal_beta(step_, cfg_.anneal, cfg_.kl_coeff, cfg_.steps);
  const ModelConfig model = cfg_.model(beta);
  const MetricsRecord rec =
      evaluate_model(params_, model, data_, train_end_, data_.count(), cfg_.dead_threshold);
  TrainLogRow row;
  row.step = step_;
  row.recon_mse = rec.recon_mse;
  row.kl = rec.kl;
  row.l1 = rec.l1;
  row.beta_eff = cfg_.arch == Architecture::VsaeTopK ? beta : 0.0;
  row.loss = cfg_.arch == Architecture::VsaeTopK ? rec.recon_mse + beta * rec.kl
                                                 : rec.recon_mse + cfg_.l1_coeff * rec.l1;
  row.l0_mean = rec.l0_mean;
  row.fve = rec.fve;
  row.live_frac = rec.live_frac;
  row.cos_sim = rec.cos_sim;
  if (!std::isfinite(row.loss)) {
    throw NumericalError("non-finite held-out loss at step " + std::to_string(step_));
  }
  return row;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.config = cfg_;
  c.params = params_;
  c.adam = adam_;
  c.step = step_;
  c.noise_rng = noise_rng_.serialize();
  c.buffer = buffer_.state();
  c.log = log_;
  c.step_losses = step_losses_;
  return c;
}

TrainResult train(const TrainConfig& cfg, const ActivationStore& data) {
  Trainer trainer(cfg, data);
  trainer.run();
  return trainer.result();
}

namespace {

constexpr std::size_t kLogColumns = 10;

Matrix log_to_matrix(const std::vector<TrainLogRow>& log) {
  Matrix m(log.size(), kLogColumns);
  for (std::size_t i = 0; i < log.size(); ++i) {
    const auto& r = log[i];
    const double vals[kLogColumns] = {static_cast<double>(r.step), r.loss, r.recon_mse, r.kl,
                                      r.l1, r.beta_eff, r.l0_mean, r.fve, r.live_frac, r.cos_sim};
    std::copy(std::begin(vals), std::end(vals), m.row(i).begin());
  }
  return m;
}

std::vector<TrainLogRow> matrix_to_log(const Matrix& m) {
  if (m.rows() > 0 && m.cols() != kLogColumns) {
    throw FormatError(FormatErrorKind::BadSection, "section 'log': expected 10 columns");
  }
  std::vector<TrainLogRow> log(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto& r = log[i];
    r.step = static_cast<std::size_t>(m(i, 0));
    r.loss = m(i, 1);
    r.recon_mse = m(i, 2);
    r.kl = m(i, 3);
    r.l1 = m(i, 4);
    r.beta_eff = m(i, 5);
    r.l0_mean = m(i, 6);
    r.fve = m(i, 7);
    r.live_frac = m(i, 8);
    r.cos_sim = m(i, 9);
  }
  return log;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  TensorFile file("SAEP");
  file.put_text("config", ckpt.config.to_json());
  file.put_u64s("step", {ckpt.step});
  for (std::size_t t = 0; t < 4; ++t) {
    const std::string name(SaeParams::kNames[t]);
    file.put_matrix(name, ckpt.params.tensors[t]);
  }
  for (std::size_t t = 0; t < ckpt.adam.m.size(); ++t) {
    const std::string name(SaeParams::kNames[t]);
    file.put_matrix("adam.m." + name, ckpt.adam.m[t]);
    file.put_matrix("adam.v." + name, ckpt.adam.v[t]);
  }
  file.put_u64s("adam.t", {ckpt.adam.t});
  file.put_text("rng.noise", ckpt.noise_rng);
  std::vector<std::uint64_t> slots(ckpt.buffer.slots.begin(), ckpt.buffer.slots.end());
  file.put_u64s("buffer.slots", slots);
  file.put_u64s("buffer.meta", {ckpt.buffer.live, ckpt.buffer.cursor, ckpt.buffer.epoch});
  file.put_text("buffer.rng", ckpt.buffer.rng);
  file.put_matrix("log", log_to_matrix(ckpt.log));
  file.put_matrix("step_losses", Matrix(1, ckpt.step_losses.size(), ckpt.step_losses));
  file.write(path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const TensorFile file = TensorFile::read("SAEP", path);
  Checkpoint c;
  try {
    c.config = TrainConfig::from_json(file.get_text("config"));
  } catch (const ConfigError& e) {
    throw FormatError(FormatErrorKind::BadSection, std::string("section 'config': ") + e.what());
  }
  const auto step = file.get_u64s("step");
  if (step.size() != 1) throw FormatError(FormatErrorKind::BadSection, "section 'step'");
  c.step = step[0];
  for (std::size_t t = 0; t < 4; ++t) {
    c.params.tensors[t] = file.get_matrix(SaeParams::kNames[t]);
  }
  const SaeParams expected = SaeParams::zeros(c.config.input_dim, c.config.dict_size);
  for (std::size_t t = 0; t < 4; ++t) {
    const std::string name(SaeParams::kNames[t]);
    const auto check = [&](const Matrix& m, const std::string& section) {
      if (m.rows() != expected.tensors[t].rows() || m.cols() != expected.tensors[t].cols()) {
        throw FormatError(FormatErrorKind::DimMismatch,
                          "section '" + section + "' has shape " + std::to_string(m.rows()) + "x" +
                              std::to_string(m.cols()) + ", config implies " +
                              std::to_string(expected.tensors[t].rows()) + "x" +
                              std::to_string(expected.tensors[t].cols()));
      }
    };
    check(c.params.tensors[t], name);
    c.adam.m.push_back(file.get_matrix("adam.m." + name));
    c.adam.v.push_back(file.get_matrix("adam.v." + name));
    check(c.adam.m.back(), "adam.m." + name);
    check(c.adam.v.back(), "adam.v." + name);
  }
  const auto t = file.get_u64s("adam.t");
  if (t.size() != 1) throw FormatError(FormatErrorKind::BadSection, "section 'adam.t'");
  c.adam.t = t[0];
  c.noise_rng = file.get_text("rng.noise");
  const auto slots = file.get_u64s("buffer.slots");
  c.buffer.slots.assign(slots.begin(), slots.end());
  const auto meta = file.get_u64s("buffer.meta");
  if (meta.size() != 3) throw FormatError(FormatErrorKind::BadSection, "section 'buffer.meta'");
  c.buffer.live = meta[0];
  c.buffer.cursor = meta[1];
  c.buffer.epoch = meta[2];
  c.buffer.rng = file.get_text("buffer.rng");
  c.log = matrix_to_log(file.get_matrix("log"));
  const Matrix losses = file.get_matrix("step_losses");
  c.step_losses.assign(losses.values().begin(), losses.values().end());
  return c;
}

}  // namespace sae
