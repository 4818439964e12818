#include "sae/bench.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sae/errors.hpp"

namespace sae {

namespace {

// Row-wise nonzero entries; codes are mostly TopK-sparse.
struct SparseRows {
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> cols;
  std::vector<double> vals;

  explicit SparseRows(const Matrix& x) {
    offsets.reserve(x.rows() + 1);
    offsets.push_back(0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const auto r = x.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) {
        if (r[j] != 0.0) {
          cols.push_back(j);
          vals.push_back(r[j]);
        }
      }
      offsets.push_back(cols.size());
    }
  }
};

std::size_t class_count(std::span<const int> labels) {
  int max_label = -1;
  for (int l : labels) {
    if (l < 0) throw ConfigError("probe labels must be non-negative");
    max_label = std::max(max_label, l);
  }
  return static_cast<std::size_t>(max_label + 1);
}

// logits = x W + b for one sparse row.
void row_logits(const SparseRows& xs, std::size_t i, const Matrix& w, const Matrix& b,
                std::vector<double>& out) {
  const std::size_t c = w.cols();
  for (std::size_t k = 0; k < c; ++k) out[k] = b(0, k);
  for (std::size_t e = xs.offsets[i]; e < xs.offsets[i + 1]; ++e) {
    const auto wr = w.row(xs.cols[e]);
    for (std::size_t k = 0; k < c; ++k) out[k] += xs.vals[e] * wr[k];
  }
}

std::size_t argmax(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < v.size(); ++k)
    if (v[k] > v[best]) best = k;
  return best;
}

std::vector<int> one_vs_rest(std::span<const int> labels, int target) {
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = labels[i] == target ? 1 : 0;
  return out;
}

std::vector<double> column_means(const Matrix& codes) {
  const Matrix mean = column_mean(codes);
  return {mean.values().begin(), mean.values().end()};
}

std::vector<bool> live_columns(const Matrix& codes) {
  std::vector<bool> live(codes.cols(), false);
  for (std::size_t i = 0; i < codes.rows(); ++i) {
    const auto r = codes.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) live[j] = live[j] || r[j] != 0.0;
  }
  return live;
}

}  // namespace

LinearProbe train_probe(const Matrix& codes, std::span<const int> labels,
                        const ProbeOptions& options) {
  if (codes.rows() != labels.size()) throw DimensionError("train_probe: label count mismatch");
  const std::size_t n_classes = class_count(labels);
  std::vector<bool> seen(n_classes, false);
  for (int l : labels) seen[static_cast<std::size_t>(l)] = true;
  if (std::count(seen.begin(), seen.end(), true) < 2) {
    throw ConfigError("train_probe: need at least two classes present");
  }

  const std::size_t n = codes.rows();
  const std::size_t m = codes.cols();
  const SparseRows xs(codes);
  double mean_sq = 0.0;
  for (double v : xs.vals) mean_sq += v * v;
  mean_sq /= static_cast<double>(n);
  const double lipschitz = 0.5 * (mean_sq + 1.0) + options.l2_reg;
  const double step = 1.0 / lipschitz;
  const double inv_n = 1.0 / static_cast<double>(n);

  LinearProbe probe{Matrix(m, n_classes), Matrix(1, n_classes), 0.0};
  Matrix w_prev = probe.weights, b_prev = probe.bias;
  Matrix w_look = probe.weights, b_look = probe.bias;
  Matrix gw(m, n_classes), gb(1, n_classes);
  std::vector<double> logits(n_classes);

  for (std::size_t it = 0; it < options.iterations; ++it) {
    gw.fill(0.0);
    gb.fill(0.0);
    for (std::size_t i = 0; i < n; ++i) {
      row_logits(xs, i, w_look, b_look, logits);
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (double& l : logits) z += (l = std::exp(l - mx));
      for (std::size_t k = 0; k < n_classes; ++k) {
        const double g = (logits[k] / z - (static_cast<std::size_t>(labels[i]) == k ? 1.0 : 0.0)) * inv_n;
        logits[k] = g;
        gb(0, k) += g;
      }
      for (std::size_t e = xs.offsets[i]; e < xs.offsets[i + 1]; ++e) {
        auto gr = gw.row(xs.cols[e]);
        for (std::size_t k = 0; k < n_classes; ++k) gr[k] += xs.vals[e] * logits[k];
      }
    }
    // Nesterov: step from the look-ahead point, then extrapolate.
    const double momentum = static_cast<double>(it) / static_cast<double>(it + 3);
    for (std::size_t e = 0; e < gw.size(); ++e) {
      const double next = w_look.values()[e] - step * (gw.values()[e] + options.l2_reg * w_look.values()[e]);
      w_look.values()[e] = next + momentum * (next - w_prev.values()[e]);
      w_prev.values()[e] = next;
    }
    for (std::size_t k = 0; k < n_classes; ++k) {
      const double next = b_look(0, k) - step * gb(0, k);
      b_look(0, k) = next + momentum * (next - b_prev(0, k));
      b_prev(0, k) = next;
    }
  }
  probe.weights = w_prev;
  probe.bias = b_prev;
  probe.train_accuracy = probe_accuracy(probe, codes, labels);
  return probe;
}

std::vector<int> probe_predict(const LinearProbe& probe, const Matrix& codes) {
  if (codes.cols() != probe.weights.rows()) throw DimensionError("probe_predict: width mismatch");
  const SparseRows xs(codes);
  std::vector<double> logits(probe.classes());
  std::vector<int> out(codes.rows());
  for (std::size_t i = 0; i < codes.rows(); ++i) {
    row_logits(xs, i, probe.weights, probe.bias, logits);
    out[i] = static_cast<int>(argmax(logits));
  }
  return out;
}

double probe_accuracy(const LinearProbe& probe, const Matrix& codes, std::span<const int> labels) {
  if (codes.rows() != labels.size() || labels.empty()) {
    throw DimensionError("probe_accuracy: label count mismatch");
  }
  const auto pred = probe_predict(probe, codes);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

Matrix ablate_latents(const Matrix& codes, std::span<const std::size_t> latents) {
  Matrix out = codes;
  for (std::size_t j : latents) {
    if (j >= codes.cols()) throw DimensionError("ablate_latents: latent index out of range");
    for (std::size_t i = 0; i < out.rows(); ++i) out(i, j) = 0.0;
  }
  return out;
}

std::vector<std::size_t> rank_latents(std::span<const double> scores) {
  std::vector<std::size_t> order;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (scores[j] > 0.0) order.push_back(j);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

namespace {

LabeledSet start_set(std::size_t n, const GroundTruth& truth) {
  LabeledSet set;
  set.x = Matrix(n, truth.input_dim());
  set.true_codes = Matrix(n, truth.n_features());
  set.labels.resize(n);
  return set;
}

void store_sample(LabeledSet& set, std::size_t i, SyntheticGenerator& gen, const SparseCode& code) {
  const auto x = gen.render(code);
  std::copy(x.begin(), x.end(), set.x.row(i).begin());
  for (std::size_t s = 0; s < code.features.size(); ++s)
    set.true_codes(i, code.features[s]) = code.amplitudes[s];
}

}  // namespace

LabeledSet make_scr_set(const SyntheticSpec& spec, const GroundTruth& truth, const ScrDesign& design,
                        std::size_t n, double correlation, std::uint64_t seed) {
  if (design.main_feature >= truth.n_features() || design.spurious_feature >= truth.n_features() ||
      design.main_feature == design.spurious_feature) {
    throw ConfigError("make_scr_set: attribute features must be distinct true features");
  }
  if (!(correlation >= 0.0 && correlation <= 1.0)) throw ConfigError("correlation must lie in [0, 1]");
  Rng label_rng(derive_seed(seed, 21));
  SyntheticGenerator gen(spec, truth, derive_seed(seed, 22));
  LabeledSet set = start_set(n, truth);
  set.spurious.resize(n);
  std::vector<Clamp> clamps(truth.n_features(), Clamp::Free);
  for (std::size_t i = 0; i < n; ++i) {
    const int main = label_rng.bernoulli(0.5) ? 1 : 0;
    const int spur = label_rng.bernoulli(correlation) ? main : 1 - main;
    const double p_main = main == 1 ? design.main_signal : 1.0 - design.main_signal;
    clamps[design.main_feature] = label_rng.bernoulli(p_main) ? Clamp::On : Clamp::Off;
    clamps[design.spurious_feature] = spur == 1 ? Clamp::On : Clamp::Off;
    store_sample(set, i, gen, gen.draw_code(clamps));
    set.labels[i] = main;
    set.spurious[i] = spur;
  }
  return set;
}

LabeledSet make_tpp_set(const SyntheticSpec& spec, const GroundTruth& truth,
                        std::span<const std::size_t> class_features, std::size_t n,
                        std::uint64_t seed) {
  if (class_features.size() < 3) throw ConfigError("make_tpp_set: need at least three classes");
  for (std::size_t f : class_features)
    if (f >= truth.n_features()) throw ConfigError("make_tpp_set: class feature out of range");
  Rng label_rng(derive_seed(seed, 31));
  SyntheticGenerator gen(spec, truth, derive_seed(seed, 32));
  LabeledSet set = start_set(n, truth);
  std::vector<Clamp> clamps(truth.n_features(), Clamp::Free);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::size_t>(label_rng.below(class_features.size()));
    for (std::size_t k = 0; k < class_features.size(); ++k)
      clamps[class_features[k]] = k == c ? Clamp::On : Clamp::Off;
    store_sample(set, i, gen, gen.draw_code(clamps));
    set.labels[i] = static_cast<int>(c);
  }
  return set;
}

ScrResult scr_lite(const ScrInputs& in, std::span<const std::size_t> thresholds,
                   const ProbeOptions& options) {
  if (in.train_codes.cols() != in.test_codes.cols() ||
      in.train_codes.cols() != in.balanced_codes.cols()) {
    throw DimensionError("scr_lite: code widths differ between splits");
  }
  ScrResult out;
  const LinearProbe spurious_probe = train_probe(in.train_codes, in.train_spurious, options);
  if (spurious_probe.classes() != 2) throw ConfigError("scr_lite: spurious attribute must be binary");
  const auto means = column_means(in.train_codes);
  const auto live = live_columns(in.train_codes);
  std::vector<double> attribution(in.train_codes.cols(), 0.0);
  for (std::size_t j = 0; j < attribution.size(); ++j) {
    if (!live[j]) continue;
    attribution[j] = std::abs(spurious_probe.weights(j, 1) - spurious_probe.weights(j, 0)) *
                     std::abs(means[j]);
  }
  const auto ranking = rank_latents(attribution);

  const LinearProbe baseline = train_probe(in.train_codes, in.train_main, options);
  out.baseline_accuracy = probe_accuracy(baseline, in.test_codes, in.test_main);
  const LinearProbe skyline = train_probe(in.balanced_codes, in.balanced_main, options);
  out.skyline_accuracy = probe_accuracy(skyline, in.test_codes, in.test_main);
  const double span = out.skyline_accuracy - out.baseline_accuracy;

  for (std::size_t t : thresholds) {
    std::size_t count = t;
    if (t > ranking.size()) {
      count = ranking.size();
      out.warnings.push_back("threshold " + std::to_string(t) + " exceeds " +
                             std::to_string(ranking.size()) + " attributable live latents; capped");
    }
    double acc = out.baseline_accuracy;
    if (count > 0) {
      const std::span<const std::size_t> ablated(ranking.data(), count);
      const LinearProbe probe =
          train_probe(ablate_latents(in.train_codes, ablated), in.train_main, options);
      acc = probe_accuracy(probe, ablate_latents(in.test_codes, ablated), in.test_main);
    }
    out.thresholds.push_back(t);
    out.ablated.push_back(count);
    out.accuracy.push_back(acc);
    out.normalized.push_back(std::abs(span) > 1e-12 ? (acc - out.baseline_accuracy) / span : 0.0);
  }
  return out;
}

TppDrops tpp_drops_for_set(const std::vector<LinearProbe>& probes, const TppInputs& in,
                           std::size_t target_class, std::span<const std::size_t> ablated) {
  const Matrix codes = ablate_latents(in.test_codes, ablated);
  TppDrops drops;
  double other = 0.0;
  for (std::size_t c = 0; c < probes.size(); ++c) {
    const auto labels = one_vs_rest(in.test_labels, static_cast<int>(c));
    const double before = probe_accuracy(probes[c], in.test_codes, labels);
    const double after = ablated.empty() ? before : probe_accuracy(probes[c], codes, labels);
    if (c == target_class) drops.intended = before - after;
    else other += before - after;
  }
  drops.unintended = other / static_cast<double>(probes.size() - 1);
  return drops;
}

TppResult tpp_lite(const TppInputs& in, std::span<const std::size_t> thresholds,
                   const ProbeOptions& options) {
  const std::size_t n_classes = class_count(in.train_labels);
  if (n_classes < 3) throw ConfigError("tpp_lite: need at least three classes");
  if (in.train_codes.cols() != in.test_codes.cols()) {
    throw DimensionError("tpp_lite: code widths differ between splits");
  }
  std::vector<LinearProbe> probes;
  for (std::size_t c = 0; c < n_classes; ++c) {
    probes.push_back(train_probe(in.train_codes, one_vs_rest(in.train_labels, static_cast<int>(c)), options));
  }
  const auto means = column_means(in.train_codes);
  const auto live = live_columns(in.train_codes);
  std::vector<std::vector<std::size_t>> rankings;
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::vector<double> attribution(in.train_codes.cols(), 0.0);
    for (std::size_t j = 0; j < attribution.size(); ++j) {
      if (!live[j]) continue;
      attribution[j] = (probes[c].weights(j, 1) - probes[c].weights(j, 0)) * means[j];
    }
    rankings.push_back(rank_latents(attribution));
  }

  TppResult out;
  for (std::size_t t : thresholds) {
    double intended = 0.0, unintended = 0.0;
    for (std::size_t c = 0; c < n_classes; ++c) {
      const auto& ranking = rankings[c];
      std::size_t count = t;
      if (t > ranking.size()) {
        count = ranking.size();
        out.warnings.push_back("class " + std::to_string(c) + ": threshold " + std::to_string(t) +
                               " exceeds " + std::to_string(ranking.size()) +
                               " attributable live latents; capped");
      }
      const auto drops = tpp_drops_for_set(probes, in, c, {ranking.data(), count});
      intended += drops.intended;
      unintended += drops.unintended;
    }
    const double nc = static_cast<double>(n_classes);
    out.thresholds.push_back(t);
    out.intended_drop.push_back(intended / nc);
    out.unintended_drop.push_back(unintended / nc);
    out.selectivity.push_back((intended - unintended) / nc);
  }
  return out;
}

}  // namespace sae
