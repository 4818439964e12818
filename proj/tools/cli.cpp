#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <vector>

#include "sae/analysis.hpp"
#include "sae/bench.hpp"
#include "sae/data.hpp"
#include "sae/errors.hpp"
#include "sae/eval.hpp"
#include "sae/tensor_file.hpp"
#include "sae/train.hpp"

namespace sae::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
};

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json load_config(const Common& common) {
  if (common.config.empty()) return json::object();
  std::ifstream in(common.config);
  if (!in) throw ConfigError("cannot open config file " + common.config);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + common.config + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config " + common.config + ": top level must be an object");
  return j;
}

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& context) {
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(context + ": unknown config key '" + key + "'");
  }
}

template <class T>
T get_or(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

std::string require_path(const json& j, const std::string& key, const std::string& flag) {
  const auto path = get_or<std::string>(j, key, "");
  if (path.empty()) throw ConfigError("missing '" + key + "' (config key or " + flag + ")");
  return path;
}

// Seed precedence: --seed, then the config's "seed", then 0.
std::uint64_t resolve_seed(const Common& common, json& cfg) {
  const std::uint64_t seed = common.seed ? *common.seed : get_or<std::uint64_t>(cfg, "seed", 0);
  cfg["seed"] = seed;
  return seed;
}

std::string run_id_for(const std::string& command, const json& canonical) {
  return fnv1a_hex(command + "\n" + canonical.dump());
}

fs::path make_run_dir(const Common& common, const std::string& run_id) {
  const fs::path dir = fs::path(common.out) / run_id;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw FormatError(FormatErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(FormatErrorKind::Io, "cannot write " + path.string());
  out << text;
  if (!out) throw FormatError(FormatErrorKind::Io, "write failed for " + path.string());
}

json manifest(const std::string& command, const std::string& run_id, std::uint64_t seed,
              const json& config, const std::vector<std::string>& artifacts, const std::string& started) {
  json m;
  m["run_id"] = run_id;
  m["command"] = command;
  m["seed"] = seed;
  m["config"] = config;
  m["artifacts"] = artifacts;
  m["started_at"] = started;
  m["finished_at"] = utc_now();
  return m;
}

void emit_manifest(const fs::path& dir, const json& m) {
  const std::string text = m.dump(2) + "\n";
  write_text(dir / "manifest.json", text);
  std::cout << text;
}

// ---------------------------------------------------------------------------
// gen-data

struct GenFlags {
  std::optional<std::size_t> input_dim, n_true_features, samples;
  std::optional<double> feature_sparsity, decay, noise_std;
};

int cmd_gen_data(const Common& common, const GenFlags& flags) {
  const std::string started = utc_now();
  json cfg = load_config(common);
  reject_unknown(cfg, {"input_dim", "n_true_features", "feature_sparsity", "decay", "noise_std", "seed",
                       "samples"},
                 "gen-data");
  if (flags.input_dim) cfg["input_dim"] = *flags.input_dim;
  if (flags.n_true_features) cfg["n_true_features"] = *flags.n_true_features;
  if (flags.feature_sparsity) cfg["feature_sparsity"] = *flags.feature_sparsity;
  if (flags.decay) cfg["decay"] = *flags.decay;
  if (flags.noise_std) cfg["noise_std"] = *flags.noise_std;
  if (flags.samples) cfg["samples"] = *flags.samples;
  const std::uint64_t seed = resolve_seed(common, cfg);

  const SyntheticSpec defaults;
  SyntheticSpec spec;
  spec.input_dim = get_or(cfg, "input_dim", defaults.input_dim);
  spec.n_true_features = get_or(cfg, "n_true_features", defaults.n_true_features);
  spec.feature_sparsity = get_or(cfg, "feature_sparsity", defaults.feature_sparsity);
  spec.decay = get_or(cfg, "decay", defaults.decay);
  spec.noise_std = get_or(cfg, "noise_std", defaults.noise_std);
  spec.seed = seed;
  const auto samples = get_or<std::size_t>(cfg, "samples", 100000);
  spec.validate();
  if (samples < 1) throw ConfigError("samples must be >= 1");

  json canonical = json::parse(spec.to_json());
  canonical["samples"] = samples;
  const std::string run_id = run_id_for("gen-data", canonical);
  const fs::path dir = make_run_dir(common, run_id);

  const SyntheticData data = generate_synthetic(spec, samples);
  write_activations(data.store, dir / "activations.saea");
  write_ground_truth(data.truth, spec, dir / "ground_truth.saeg");
  emit_manifest(dir, manifest("gen-data", run_id, seed, canonical,
                              {"activations.saea", "ground_truth.saeg"}, started));
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainFlags {
  std::string data, resume;
  std::optional<std::string> arch;
  std::optional<std::size_t> steps, k, dict_size, batch, checkpoint_every;
  std::optional<double> kl_coeff, l1_coeff, lr;
};

std::vector<json> expand_sweep(const json& base, const json& sweep) {
  std::vector<json> runs{base};
  if (sweep.is_null()) return runs;
  if (!sweep.is_object()) throw ConfigError("'sweep' must be an object of key -> list");
  for (const auto& [key, values] : sweep.items()) {
    if (!values.is_array() || values.empty()) {
      throw ConfigError("sweep key '" + key + "' must map to a non-empty list");
    }
    std::vector<json> next;
    for (const auto& run : runs) {
      for (const auto& v : values) {
        json r = run;
        r[key] = v;
        next.push_back(std::move(r));
      }
    }
    runs = std::move(next);
  }
  return runs;
}

void train_one(const Common& common, const TrainConfig& tc, const std::string& data_path,
               const ActivationStore& store, std::size_t checkpoint_every, const std::string& resume) {
  const std::string started = utc_now();
  json canonical;
  canonical["train"] = json::parse(tc.to_json());
  canonical["data"] = data_path;
  const std::string run_id = run_id_for("train", canonical);
  const fs::path dir = make_run_dir(common, run_id);

  std::optional<Trainer> trainer;
  if (!resume.empty()) {
    const Checkpoint ckpt = load_checkpoint(resume);
    if (ckpt.config.to_json() != tc.to_json()) {
      throw ConfigError("resume: checkpoint " + resume + " was written with a different config");
    }
    trainer.emplace(ckpt, store);
    std::cerr << "resuming " << run_id << " at step " << trainer->step() << "\n";
  } else {
    trainer.emplace(tc, store);
  }

  std::size_t reported = trainer->log().size();
  while (!trainer->done()) {
    std::size_t target = tc.steps;
    if (checkpoint_every > 0) target = std::min(tc.steps, (trainer->step() / checkpoint_every + 1) * checkpoint_every);
    if (tc.eval_every > 0) target = std::min(target, (trainer->step() / tc.eval_every + 1) * tc.eval_every);
    trainer->run_until(target);
    for (; reported < trainer->log().size(); ++reported) {
      const auto& row = trainer->log()[reported];
      std::cerr << "[" << run_id << "] step " << row.step << " loss " << row.loss << " fve " << row.fve
                << " live " << row.live_frac << "\n";
    }
    if (checkpoint_every > 0 && trainer->step() % checkpoint_every == 0) {
      save_checkpoint(trainer->checkpoint(), dir / "checkpoint.saep");
    }
  }
  save_checkpoint(trainer->checkpoint(), dir / "checkpoint.saep");
  write_text(dir / "metrics.csv", metrics_csv(trainer->log()));
  emit_manifest(dir, manifest("train", run_id, tc.seed, canonical, {"checkpoint.saep", "metrics.csv"}, started));
}

int cmd_train(const Common& common, const TrainFlags& flags) {
  json cfg = load_config(common);
  if (!flags.data.empty()) cfg["data"] = flags.data;
  if (!flags.resume.empty()) cfg["resume"] = flags.resume;
  if (flags.arch) cfg["arch"] = *flags.arch;
  if (flags.steps) cfg["steps"] = *flags.steps;
  if (flags.k) cfg["k"] = *flags.k;
  if (flags.dict_size) cfg["dict_size"] = *flags.dict_size;
  if (flags.batch) cfg["batch"] = *flags.batch;
  if (flags.checkpoint_every) cfg["checkpoint_every"] = *flags.checkpoint_every;
  if (flags.kl_coeff) cfg["kl_coeff"] = *flags.kl_coeff;
  if (flags.l1_coeff) cfg["l1_coeff"] = *flags.l1_coeff;
  if (flags.lr) cfg["lr"] = *flags.lr;
  resolve_seed(common, cfg);

  const std::string data_path = require_path(cfg, "data", "--data");
  const auto checkpoint_every = get_or<std::size_t>(cfg, "checkpoint_every", 0);
  const auto resume = get_or<std::string>(cfg, "resume", "");
  const json sweep = cfg.contains("sweep") ? cfg["sweep"] : json();
  json base = cfg;
  for (const char* key : {"data", "checkpoint_every", "resume", "sweep"}) base.erase(key);

  // Validate every run's config before touching the data.
  std::vector<TrainConfig> runs;
  for (const json& r : expand_sweep(base, sweep)) {
    try {
      json full = r;
      if (!full.contains("input_dim")) full["input_dim"] = 1;  // replaced by the data width below
      runs.push_back(TrainConfig::from_json(full.dump()));
    } catch (const json::exception& e) {
      throw ConfigError(std::string("train config: ") + e.what());
    }
  }
  if (!resume.empty() && runs.size() > 1) throw ConfigError("resume cannot be combined with a sweep");

  const ActivationStore store = read_activations(data_path);
  for (std::size_t i = 0; i < runs.size(); ++i) {
    TrainConfig& tc = runs[i];
    if (!base.contains("input_dim")) tc.input_dim = store.dim();
    if (tc.input_dim != store.dim()) {
      throw DimensionError("config input_dim=" + std::to_string(tc.input_dim) + " but data " + data_path +
                           " has d=" + std::to_string(store.dim()));
    }
    tc.validate();
    train_one(common, tc, data_path, store, checkpoint_every, resume);
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalFlags {
  std::string checkpoint, data, ground_truth, split;
};

std::pair<std::size_t, std::size_t> split_range(const std::string& split, const ActivationStore& store,
                                                const TrainConfig& tc) {
  if (split == "all") return {0, store.count()};
  if (split == "holdout") return {holdout_begin(store.count(), tc.holdout_fraction), store.count()};
  throw ConfigError("split must be 'holdout' or 'all', got '" + split + "'");
}

void check_dims(const TrainConfig& tc, std::size_t data_dim, const std::string& what) {
  if (tc.input_dim != data_dim) {
    throw DimensionError("checkpoint input_dim=" + std::to_string(tc.input_dim) + " but " + what +
                         " has d=" + std::to_string(data_dim));
  }
}

int cmd_eval(const Common& common, const EvalFlags& flags) {
  const std::string started = utc_now();
  json cfg = load_config(common);
  reject_unknown(cfg, {"checkpoint", "data", "ground_truth", "split", "dead_threshold", "bins", "seed"}, "eval");
  if (!flags.checkpoint.empty()) cfg["checkpoint"] = flags.checkpoint;
  if (!flags.data.empty()) cfg["data"] = flags.data;
  if (!flags.ground_truth.empty()) cfg["ground_truth"] = flags.ground_truth;
  if (!flags.split.empty()) cfg["split"] = flags.split;
  const std::uint64_t seed = resolve_seed(common, cfg);

  const std::string ckpt_path = require_path(cfg, "checkpoint", "--checkpoint");
  const std::string data_path = require_path(cfg, "data", "--data");
  const auto gt_path = get_or<std::string>(cfg, "ground_truth", "");
  const auto split = get_or<std::string>(cfg, "split", "holdout");
  const auto bins = get_or<std::size_t>(cfg, "bins", 50);
  if (bins < 1) throw ConfigError("bins must be >= 1");

  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const TrainConfig& tc = ckpt.config;
  const double threshold = get_or(cfg, "dead_threshold", tc.dead_threshold);
  if (threshold < 0.0) throw ConfigError("dead_threshold must be >= 0");
  const ActivationStore store = read_activations(data_path);
  check_dims(tc, store.dim(), "data " + data_path);
  std::optional<GroundTruthFile> gt;
  if (!gt_path.empty()) {
    gt = read_ground_truth(gt_path);
    check_dims(tc, gt->truth.input_dim(), "ground truth " + gt_path);
  }
  const auto [begin, end] = split_range(split, store, tc);

  const std::string run_id = run_id_for("eval", cfg);
  const fs::path dir = make_run_dir(common, run_id);
  const MetricsRecord rec = evaluate_model(ckpt.params, tc.model(tc.kl_coeff), store, begin, end, threshold);
  const Histogram hist = max_activation_histogram(rec.live, bins);

  json m;
  m["run_id"] = run_id;
  m["arch"] = std::string(to_string(tc.arch));
  m["k"] = tc.k;
  m["dict_size"] = tc.dict_size;
  m["split"] = split;
  m["rows"] = rec.rows;
  m["recon_mse"] = rec.recon_mse;
  m["fve"] = rec.fve;
  m["l0_mean"] = rec.l0_mean;
  m["live_frac"] = rec.live_frac;
  m["cos_sim"] = rec.cos_sim;
  m["kl"] = rec.kl;
  m["l1"] = rec.l1;
  m["dead_threshold"] = threshold;
  if (gt) {
    const RecoveryResult r = dictionary_recovery(ckpt.params.w_dec(), gt->truth.dictionary);
    m["mmcs"] = r.mmcs;
    m["greedy_mmcs"] = r.greedy_mean;
  }
  write_text(dir / "metrics.json", m.dump(2) + "\n");
  write_text(dir / "histogram.csv", histogram_csv(hist));
  emit_manifest(dir, manifest("eval", run_id, seed, cfg, {"metrics.json", "histogram.csv"}, started));
  return kOk;
}

// ---------------------------------------------------------------------------
// bench

struct BenchFlags {
  std::vector<std::string> checkpoints;
  std::string ground_truth;
  std::vector<std::size_t> thresholds;
  bool oracle = false;
};

json scr_json(const ScrResult& r) {
  json j;
  j["ablated"] = r.ablated;
  j["accuracy"] = r.accuracy;
  j["normalized"] = r.normalized;
  j["baseline_accuracy"] = r.baseline_accuracy;
  j["skyline_accuracy"] = r.skyline_accuracy;
  j["warnings"] = r.warnings;
  return j;
}

json tpp_json(const TppResult& r) {
  json j;
  j["intended_drop"] = r.intended_drop;
  j["unintended_drop"] = r.unintended_drop;
  j["selectivity"] = r.selectivity;
  j["warnings"] = r.warnings;
  return j;
}

int cmd_bench(const Common& common, const BenchFlags& flags) {
  const std::string started = utc_now();
  json cfg = load_config(common);
  reject_unknown(cfg, {"checkpoints", "ground_truth", "thresholds", "oracle", "n_train", "n_test",
                       "correlation", "scr_main_feature", "scr_spurious_feature", "tpp_class_features",
                       "probe_l2", "probe_iterations", "seed"},
                 "bench");
  if (!flags.checkpoints.empty()) cfg["checkpoints"] = flags.checkpoints;
  if (!flags.ground_truth.empty()) cfg["ground_truth"] = flags.ground_truth;
  if (!flags.thresholds.empty()) cfg["thresholds"] = flags.thresholds;
  if (flags.oracle) cfg["oracle"] = true;
  const std::uint64_t seed = resolve_seed(common, cfg);

  const auto ckpt_paths = get_or<std::vector<std::string>>(cfg, "checkpoints", {});
  const bool oracle = get_or(cfg, "oracle", false);
  if (ckpt_paths.empty() && !oracle) throw ConfigError("bench needs --checkpoint (repeatable) or --oracle");
  const std::string gt_path = require_path(cfg, "ground_truth", "--ground-truth");
  const auto thresholds =
      get_or<std::vector<std::size_t>>(cfg, "thresholds", {2, 5, 10, 20, 50, 100, 500});
  const auto n_train = get_or<std::size_t>(cfg, "n_train", 4000);
  const auto n_test = get_or<std::size_t>(cfg, "n_test", 2000);
  const double correlation = get_or(cfg, "correlation", 0.95);
  ScrDesign design;
  design.main_feature = get_or(cfg, "scr_main_feature", design.main_feature);
  design.spurious_feature = get_or(cfg, "scr_spurious_feature", design.spurious_feature);
  const auto classes = get_or<std::vector<std::size_t>>(cfg, "tpp_class_features", {0, 1, 2, 3});
  ProbeOptions probe;
  probe.l2_reg = get_or(cfg, "probe_l2", probe.l2_reg);
  probe.iterations = get_or(cfg, "probe_iterations", probe.iterations);
  if (thresholds.empty()) throw ConfigError("thresholds must be non-empty");

  const GroundTruthFile gt = read_ground_truth(gt_path);
  struct Model {
    std::string id, label;
    std::optional<Checkpoint> ckpt;
  };
  std::vector<Model> models;
  for (const auto& path : ckpt_paths) {
    Model m{"", path, load_checkpoint(path)};
    check_dims(m.ckpt->config, gt.truth.input_dim(), "ground truth " + gt_path);
    const auto bytes = read_file_bytes(path);
    m.id = fnv1a_hex(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
    models.push_back(std::move(m));
  }
  if (oracle) models.push_back({"oracle", "ground-truth codes", std::nullopt});

  const LabeledSet scr_train = make_scr_set(gt.spec, gt.truth, design, n_train, correlation, derive_seed(seed, 1));
  const LabeledSet scr_bal = make_scr_set(gt.spec, gt.truth, design, n_train, 0.5, derive_seed(seed, 2));
  const LabeledSet scr_test = make_scr_set(gt.spec, gt.truth, design, n_test, 0.5, derive_seed(seed, 3));
  const LabeledSet tpp_train = make_tpp_set(gt.spec, gt.truth, classes, n_train, derive_seed(seed, 4));
  const LabeledSet tpp_test = make_tpp_set(gt.spec, gt.truth, classes, n_test, derive_seed(seed, 5));

  json config_for_hash = cfg;
  config_for_hash.erase("seed");
  json out;
  const std::string run_id = run_id_for("bench", cfg);
  out["run_id"] = run_id;
  out["config_hash"] = fnv1a_hex(config_for_hash.dump());
  out["thresholds"] = thresholds;
  out["models"] = json::array();
  for (const Model& m : models) {
    const auto codes = [&](const LabeledSet& set) {
      if (!m.ckpt) return set.true_codes;
      return encode_codes(set.x, m.ckpt->params, m.ckpt->config.model(m.ckpt->config.kl_coeff));
    };
    ScrInputs scr{codes(scr_train), scr_train.labels, scr_train.spurious, codes(scr_bal), scr_bal.labels,
                  codes(scr_test), scr_test.labels};
    TppInputs tpp{codes(tpp_train), tpp_train.labels, codes(tpp_test), tpp_test.labels};
    json entry;
    entry["id"] = m.id;
    entry["source"] = m.label;
    if (m.ckpt) entry["arch"] = std::string(to_string(m.ckpt->config.arch));
    entry["scr"] = scr_json(scr_lite(scr, thresholds, probe));
    entry["tpp"] = tpp_json(tpp_lite(tpp, thresholds, probe));
    out["models"].push_back(entry);
  }
  const fs::path dir = make_run_dir(common, run_id);
  write_text(dir / "bench.json", out.dump(2) + "\n");
  emit_manifest(dir, manifest("bench", run_id, seed, cfg, {"bench.json"}, started));
  return kOk;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeFlags {
  std::string checkpoint, data, split;
  std::optional<std::size_t> clusters, iterations;
  std::optional<double> perplexity;
};

int cmd_analyze(const Common& common, const AnalyzeFlags& flags) {
  const std::string started = utc_now();
  json cfg = load_config(common);
  reject_unknown(cfg, {"checkpoint", "data", "split", "clusters", "perplexity", "iterations", "threshold",
                       "seed"},
                 "analyze");
  if (!flags.checkpoint.empty()) cfg["checkpoint"] = flags.checkpoint;
  if (!flags.data.empty()) cfg["data"] = flags.data;
  if (!flags.split.empty()) cfg["split"] = flags.split;
  if (flags.clusters) cfg["clusters"] = *flags.clusters;
  if (flags.iterations) cfg["iterations"] = *flags.iterations;
  if (flags.perplexity) cfg["perplexity"] = *flags.perplexity;
  const std::uint64_t seed = resolve_seed(common, cfg);

  GlobalReportConfig rc;
  rc.clusters = get_or(cfg, "clusters", rc.clusters);
  rc.threshold = get_or(cfg, "threshold", rc.threshold);
  rc.tsne.perplexity = get_or(cfg, "perplexity", rc.tsne.perplexity);
  rc.tsne.iterations = get_or(cfg, "iterations", rc.tsne.iterations);
  rc.tsne.seed = seed;
  if (rc.clusters < 1) throw ConfigError("clusters must be >= 1");
  if (rc.tsne.perplexity < 1.0) throw ConfigError("perplexity must be >= 1");
  if (rc.threshold < 0.0) throw ConfigError("threshold must be >= 0");
  const std::string ckpt_path = require_path(cfg, "checkpoint", "--checkpoint");
  const std::string data_path = require_path(cfg, "data", "--data");
  const auto split = get_or<std::string>(cfg, "split", "all");

  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const TrainConfig& tc = ckpt.config;
  const ActivationStore store = read_activations(data_path);
  check_dims(tc, store.dim(), "data " + data_path);
  const auto [begin, end] = split_range(split, store, tc);

  FeatureStatsAccumulator acc(tc.dict_size, rc.threshold);
  const std::size_t chunk = 4096;
  for (std::size_t b = begin; b < end; b += chunk) {
    acc.add(encode_rows(ckpt.params, tc.model(tc.kl_coeff), store, b, std::min(end, b + chunk)));
  }
  const GlobalReport report = global_report(ckpt.params, acc.result(), rc);

  const std::string run_id = run_id_for("analyze", cfg);
  const fs::path dir = make_run_dir(common, run_id);
  std::vector<std::string> artifacts;
  for (const auto& p : write_report_tables(report, dir)) artifacts.push_back(p.filename().string());

  // The summary doubles as the run manifest, so a report is four tables plus one JSON.
  json s = manifest("analyze", run_id, seed, cfg, artifacts, started);
  s["status"] = report.skipped ? "skipped" : "ok";
  s["live_features"] = report.live_features.size();
  if (report.skipped) {
    s["diagnostic"] = report.diagnostic;
    std::cerr << "analyze: skipped: " << report.diagnostic << "\n";
  } else {
    std::vector<std::size_t> sizes;
    for (const auto& c : report.clusters) sizes.push_back(c.size);
    s["cluster_sizes"] = sizes;
    s["effective_perplexity"] = report.effective_perplexity;
    s["kl_after_exaggeration"] = report.embedding.kl_after_exaggeration;
    s["final_kl"] = report.embedding.final_kl;
    s["cluster_utilization_variance"] = report.cluster_utilization_variance;
  }
  const std::string text = s.dump(2) + "\n";
  write_text(dir / "summary.json", text);
  std::cout << text;
  return kOk;
}

void add_common(CLI::App* sub, Common& common) {
  sub->add_option("--config", common.config, "JSON config file");
  sub->add_option("--seed", common.seed, "Seed (overrides the config)");
  sub->add_option("--out", common.out, "Output root; each run writes <out>/<run id>/")->capture_default_str();
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Sparse and variational sparse autoencoder toolkit"};
  app.require_subcommand(1);

  Common common;
  GenFlags gen;
  TrainFlags train;
  EvalFlags eval;
  BenchFlags bench;
  AnalyzeFlags analyze;

  auto* g = app.add_subcommand("gen-data", "Generate synthetic superposition activations");
  add_common(g, common);
  g->add_option("--input-dim", gen.input_dim);
  g->add_option("--n-true-features", gen.n_true_features);
  g->add_option("--feature-sparsity", gen.feature_sparsity);
  g->add_option("--decay", gen.decay);
  g->add_option("--noise-std", gen.noise_std);
  g->add_option("--samples", gen.samples);

  auto* t = app.add_subcommand("train", "Train one model or a sweep");
  add_common(t, common);
  t->add_option("--data", train.data, "Activation file (.saea)");
  t->add_option("--resume", train.resume, "Checkpoint to resume from");
  t->add_option("--arch", train.arch, "sae_topk or vsae_topk");
  t->add_option("--steps", train.steps);
  t->add_option("--k", train.k);
  t->add_option("--dict-size", train.dict_size);
  t->add_option("--batch", train.batch);
  t->add_option("--kl-coeff", train.kl_coeff);
  t->add_option("--l1-coeff", train.l1_coeff);
  t->add_option("--lr", train.lr);
  t->add_option("--checkpoint-every", train.checkpoint_every);

  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(e, common);
  e->add_option("--checkpoint", eval.checkpoint);
  e->add_option("--data", eval.data);
  e->add_option("--ground-truth", eval.ground_truth);
  e->add_option("--split", eval.split, "holdout (default) or all");

  auto* b = app.add_subcommand("bench", "SCR-lite and TPP-lite probe ablation");
  add_common(b, common);
  b->add_option("--checkpoint", bench.checkpoints, "Checkpoint (repeat for a pair)");
  b->add_option("--ground-truth", bench.ground_truth);
  b->add_option("--thresholds", bench.thresholds)->delimiter(',');
  b->add_flag("--oracle", bench.oracle, "Also score ground-truth codes");

  auto* a = app.add_subcommand("analyze", "t-SNE and clustering of live features");
  add_common(a, common);
  a->add_option("--checkpoint", analyze.checkpoint);
  a->add_option("--data", analyze.data);
  a->add_option("--split", analyze.split, "all (default) or holdout");
  a->add_option("--clusters", analyze.clusters, "k-means clusters (default 10)");
  a->add_option("--perplexity", analyze.perplexity);
  a->add_option("--iterations", analyze.iterations);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (g->parsed()) return cmd_gen_data(common, gen);
    if (t->parsed()) return cmd_train(common, train);
    if (e->parsed()) return cmd_eval(common, eval);
    if (b->parsed()) return cmd_bench(common, bench);
    if (a->parsed()) return cmd_analyze(common, analyze);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kUsage;
  } catch (const FormatError& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return kData;
  } catch (const DimensionError& err) {
    std::cerr << "dimension error: " << err.what() << "\n";
    return kData;
  } catch (const NumericalError& err) {
    std::cerr << "numerical abort: " << err.what() << "\n";
    return kNumerical;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kData;
  }
  return kUsage;
}

}  // namespace sae::cli
