#include "sae/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <tuple>

#include "sae/errors.hpp"

namespace sae {

double explained_variance(const Matrix& x, const Matrix& xhat) {
  require_same_shape(x, xhat, "explained_variance");
  if (x.rows() < 2) throw ConfigError("explained_variance: need at least two rows");
  const Matrix mean = column_mean(x);
  double residual = 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t a = 0; a < x.cols(); ++a) {
      const double r = x(i, a) - xhat(i, a);
      const double c = x(i, a) - mean(0, a);
      residual += r * r;
      total += c * c;
    }
  }
  if (total == 0.0) throw NumericalError("explained_variance: input has zero variance");
  return 1.0 - residual / total;
}

double mean_l0(const Matrix& codes) {
  if (codes.rows() == 0) throw ConfigError("mean_l0: empty code matrix");
  std::size_t nonzero = 0;
  for (double v : codes.values()) nonzero += std::abs(v) > 0.0 ? 1 : 0;
  return static_cast<double>(nonzero) / static_cast<double>(codes.rows());
}

CosineSummary mean_cosine_sim(const Matrix& x, const Matrix& xhat) {
  require_same_shape(x, xhat, "mean_cosine_sim");
  CosineSummary out;
  double sum = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double dot = 0.0, nx = 0.0, ny = 0.0;
    for (std::size_t a = 0; a < x.cols(); ++a) {
      dot += x(i, a) * xhat(i, a);
      nx += x(i, a) * x(i, a);
      ny += xhat(i, a) * xhat(i, a);
    }
    if (nx == 0.0 || ny == 0.0) {
      ++out.excluded_rows;
      continue;
    }
    sum += dot / (std::sqrt(nx) * std::sqrt(ny));
    ++out.used_rows;
  }
  out.mean = out.used_rows > 0 ? sum / static_cast<double>(out.used_rows) : 0.0;
  return out;
}

LiveFeatureTracker::LiveFeatureTracker(std::size_t dict_size) : max_(dict_size, 0.0) {}

void LiveFeatureTracker::add(const Matrix& codes) {
  if (codes.cols() != max_.size()) throw DimensionError("LiveFeatureTracker: width mismatch");
  for (std::size_t i = 0; i < codes.rows(); ++i) {
    const auto r = codes.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) max_[j] = std::max(max_[j], r[j]);
  }
  any_ = any_ || codes.rows() > 0;
}

LiveFeatures LiveFeatureTracker::result(double threshold) const {
  if (threshold < 0.0) throw ConfigError("live_features: threshold must be >= 0");
  LiveFeatures out;
  out.max_activation = max_;
  out.live.resize(max_.size());
  std::size_t live = 0;
  for (std::size_t j = 0; j < max_.size(); ++j) {
    out.live[j] = max_[j] > threshold;
    live += out.live[j] ? 1 : 0;
  }
  out.live_frac = max_.empty() ? 0.0 : static_cast<double>(live) / static_cast<double>(max_.size());
  return out;
}

LiveFeatures live_features(const Matrix& codes, double threshold) {
  if (codes.rows() == 0) throw ConfigError("live_features: empty stream");
  LiveFeatureTracker tracker(codes.cols());
  tracker.add(codes);
  return tracker.result(threshold);
}

Histogram max_activation_histogram(const LiveFeatures& live, std::size_t bins) {
  if (bins == 0) throw ConfigError("histogram: bins must be >= 1");
  Histogram h;
  h.counts.assign(bins, 0);
  for (std::size_t j = 0; j < live.max_activation.size(); ++j)
    if (live.live[j]) h.hi = std::max(h.hi, live.max_activation[j]);
  if (h.hi <= 0.0) return h;
  const double width = h.hi / static_cast<double>(bins);
  for (std::size_t j = 0; j < live.max_activation.size(); ++j) {
    if (!live.live[j]) continue;
    auto b = static_cast<std::size_t>(live.max_activation[j] / width);
    h.counts[std::min(b, bins - 1)] += 1;
  }
  return h;
}

std::string histogram_csv(const Histogram& h) {
  std::ostringstream os;
  os.precision(17);
  os << "bin_lo,bin_hi,count\n";
  const double width = h.counts.empty() ? 0.0 : (h.hi - h.lo) / static_cast<double>(h.counts.size());
  for (std::size_t b = 0; b < h.counts.size(); ++b) {
    os << h.lo + width * static_cast<double>(b) << ',' << h.lo + width * static_cast<double>(b + 1)
       << ',' << h.counts[b] << '\n';
  }
  return os.str();
}

RecoveryResult dictionary_recovery(const Matrix& w_dec, const Matrix& true_dictionary) {
  if (w_dec.rows() != true_dictionary.rows()) {
    throw DimensionError("dictionary_recovery: learned d=" + std::to_string(w_dec.rows()) +
                         ", true d=" + std::to_string(true_dictionary.rows()));
  }
  Matrix learned = w_dec;
  Matrix truth = true_dictionary;
  normalize_columns(learned);
  normalize_columns(truth);
  const Matrix cos = matmul(transpose(truth), learned);  // n_true x m

  RecoveryResult out;
  const std::size_t n_true = cos.rows();
  const std::size_t m = cos.cols();
  out.best_cos.assign(n_true, -1.0);
  out.best_match.assign(n_true, 0);
  for (std::size_t t = 0; t < n_true; ++t) {
    for (std::size_t j = 0; j < m; ++j) {
      if (cos(t, j) > out.best_cos[t]) {
        out.best_cos[t] = cos(t, j);
        out.best_match[t] = j;
      }
    }
  }
  out.mmcs = n_true == 0 ? 0.0
                         : std::accumulate(out.best_cos.begin(), out.best_cos.end(), 0.0) /
                               static_cast<double>(n_true);

  std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;
  pairs.reserve(n_true * m);
  for (std::size_t t = 0; t < n_true; ++t)
    for (std::size_t j = 0; j < m; ++j) pairs.emplace_back(cos(t, j), t, j);
  std::sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) {
    if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
    return std::tie(std::get<1>(a), std::get<2>(a)) < std::tie(std::get<1>(b), std::get<2>(b));
  });
  std::vector<bool> true_used(n_true, false), learned_used(m, false);
  double greedy_sum = 0.0;
  for (const auto& [c, t, j] : pairs) {
    if (true_used[t] || learned_used[j]) continue;
    true_used[t] = learned_used[j] = true;
    out.greedy_pairs.emplace_back(t, j);
    greedy_sum += c;
    if (out.greedy_pairs.size() == std::min(n_true, m)) break;
  }
  out.greedy_mean = n_true == 0 ? 0.0 : greedy_sum / static_cast<double>(n_true);
  return out;
}

Matrix encode_rows(const SaeParams& params, const ModelConfig& cfg, const ActivationStore& data,
                   std::size_t begin, std::size_t end, std::size_t chunk) {
  Matrix out(end - begin, params.dict_size());
  for (std::size_t s = begin; s < end; s += chunk) {
    const std::size_t n = std::min(chunk, end - s);
    const Matrix codes = encode_codes(data.rows(s, n), params, cfg);
    std::copy(codes.values().begin(), codes.values().end(), out.row(s - begin).begin());
  }
  return out;
}

MetricsRecord evaluate_model(const SaeParams& params, const ModelConfig& cfg,
                             const ActivationStore& data, std::size_t begin, std::size_t end,
                             double dead_threshold, std::size_t chunk) {
  if (data.dim() != params.input_dim()) {
    throw DimensionError("evaluate_model: data d=" + std::to_string(data.dim()) + ", model d=" +
                         std::to_string(params.input_dim()));
  }
  if (end > data.count() || end < begin + 2) {
    throw ConfigError("evaluate_model: need at least two rows in range");
  }
  const std::size_t d = data.dim();
  const std::size_t total_rows = end - begin;

  std::vector<double> mean(d, 0.0);
  for (std::size_t i = begin; i < end; ++i) {
    const auto r = data.row(i);
    for (std::size_t a = 0; a < d; ++a) mean[a] += r[a];
  }
  for (double& v : mean) v /= static_cast<double>(total_rows);

  MetricsRecord rec;
  rec.rows = total_rows;
  LiveFeatureTracker tracker(params.dict_size());
  double residual = 0.0, variance = 0.0, kl_sum = 0.0, l1_sum = 0.0, cos_sum = 0.0;
  std::size_t nonzero = 0, cos_rows = 0;
  for (std::size_t s = begin; s < end; s += chunk) {
    const std::size_t n = std::min(chunk, end - s);
    const Matrix x = data.rows(s, n);
    const ForwardResult fr = forward(x, params, cfg, nullptr);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t a = 0; a < d; ++a) {
        const double r = x(i, a) - fr.trace.xhat(i, a);
        const double c = x(i, a) - mean[a];
        residual += r * r;
        variance += c * c;
      }
    }
    kl_sum += fr.loss.kl * static_cast<double>(n);
    l1_sum += fr.loss.sparsity_l1 * static_cast<double>(n);
    for (double v : fr.trace.codes().values()) nonzero += std::abs(v) > 0.0 ? 1 : 0;
    const CosineSummary cs = mean_cosine_sim(x, fr.trace.xhat);
    cos_sum += cs.mean * static_cast<double>(cs.used_rows);
    cos_rows += cs.used_rows;
    tracker.add(fr.trace.codes());
  }
  const double nrows = static_cast<double>(total_rows);
  rec.recon_mse = residual / nrows;
  rec.fve = variance > 0.0 ? 1.0 - residual / variance : 0.0;
  rec.l0_mean = static_cast<double>(nonzero) / nrows;
  rec.kl = kl_sum / nrows;
  rec.l1 = l1_sum / nrows;
  rec.cos_sim = cos_rows > 0 ? cos_sum / static_cast<double>(cos_rows) : 0.0;
  rec.live = tracker.result(dead_threshold);
  rec.live_frac = rec.live.live_frac;
  rec.histogram = max_activation_histogram(rec.live);
  return rec;
}

}  // namespace sae
