#include "sae/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "sae/errors.hpp"

namespace sae {

FeatureStatsAccumulator::FeatureStatsAccumulator(std::size_t dict_size, double threshold)
    : threshold_(threshold), count_(dict_size, 0), sum_(dict_size, 0.0) {
  if (threshold < 0.0) throw ConfigError("feature_stats: threshold must be >= 0");
}

void FeatureStatsAccumulator::add(const Matrix& codes) {
  if (codes.cols() != count_.size()) throw DimensionError("feature_stats: width mismatch");
  for (std::size_t i = 0; i < codes.rows(); ++i) {
    const auto r = codes.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) {
      if (r[j] > threshold_) {
        ++count_[j];
        sum_[j] += r[j];
      }
    }
  }
  samples_ += codes.rows();
}

FeatureStats FeatureStatsAccumulator::result() const {
  if (samples_ == 0) throw ConfigError("feature_stats: empty stream");
  FeatureStats out;
  out.samples = samples_;
  const std::size_t m = count_.size();
  out.utilization.resize(m);
  out.mean_activation.resize(m);
  out.live.resize(m);
  for (std::size_t j = 0; j < m; ++j) {
    out.utilization[j] = static_cast<double>(count_[j]) / static_cast<double>(samples_);
    out.mean_activation[j] = count_[j] > 0 ? sum_[j] / static_cast<double>(count_[j]) : 0.0;
    out.live[j] = count_[j] > 0;
  }
  return out;
}

FeatureStats feature_stats(const Matrix& codes, double threshold) {
  FeatureStatsAccumulator acc(codes.cols(), threshold);
  acc.add(codes);
  return acc.result();
}

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

std::size_t nearest(std::span<const double> p, const Matrix& centroids, double* dist) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.rows(); ++c) {
    const double d = squared_distance(p, centroids.row(c));
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  if (dist != nullptr) *dist = best_d;
  return best;
}

Matrix kmeanspp_seeds(const Matrix& points, std::size_t k, Rng& rng) {
  const std::size_t n = points.rows();
  Matrix centers(k, points.cols());
  std::vector<bool> chosen(n, false);
  std::size_t first = static_cast<std::size_t>(rng.below(n));
  chosen[first] = true;
  std::copy(points.row(first).begin(), points.row(first).end(), centers.row(0).begin());
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(points.row(i), centers.row(0));

  for (std::size_t c = 1; c < k; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t pick = n;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double cum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        cum += d2[i];
        if (d2[i] > 0.0 && cum > target) {
          pick = i;
          break;
        }
      }
      if (pick == n) {  // rounding at the tail
        for (std::size_t i = n; i-- > 0;)
          if (d2[i] > 0.0) { pick = i; break; }
      }
    } else {
      // Every remaining point coincides with a center.
      for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i]) { pick = i; break; }
    }
    chosen[pick] = true;
    std::copy(points.row(pick).begin(), points.row(pick).end(), centers.row(c).begin());
    for (std::size_t i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], squared_distance(points.row(i), centers.row(c)));
  }
  return centers;
}

}  // namespace

KMeansResult kmeans(const Matrix& points, std::size_t k, Rng& rng, std::size_t max_iter) {
  const std::size_t n = points.rows();
  if (k < 1 || k > n) {
    throw ConfigError("kmeans: k=" + std::to_string(k) + " must lie in [1, n_points=" +
                      std::to_string(n) + "]");
  }
  KMeansResult out;
  out.centroids = kmeanspp_seeds(points, k, rng);
  out.assignments.resize(n);
  std::vector<double> dist(n);
  for (std::size_t i = 0; i < n; ++i) out.assignments[i] = nearest(points.row(i), out.centroids, &dist[i]);

  for (std::size_t it = 0; it < std::max<std::size_t>(max_iter, 1); ++it) {
    std::vector<std::size_t> sizes(k, 0);
    for (std::size_t a : out.assignments) ++sizes[a];
    for (std::size_t c = 0; c < k; ++c) {
      if (sizes[c] > 0) continue;
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (sizes[out.assignments[i]] < 2) continue;
        if (far == n || dist[i] > dist[far]) far = i;
      }
      if (far == n) break;
      --sizes[out.assignments[far]];
      out.assignments[far] = c;
      sizes[c] = 1;
      dist[far] = 0.0;
    }

    out.centroids.fill(0.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto dst = out.centroids.row(out.assignments[i]);
      const auto src = points.row(i);
      for (std::size_t a = 0; a < dst.size(); ++a) dst[a] += src[a];
    }
    for (std::size_t c = 0; c < k; ++c) {
      for (double& v : out.centroids.row(c)) v /= static_cast<double>(std::max<std::size_t>(sizes[c], 1));
    }

    bool changed = false;
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t a = nearest(points.row(i), out.centroids, &dist[i]);
      changed = changed || a != out.assignments[i];
      out.assignments[i] = a;
      inertia += dist[i];
    }
    out.inertia = inertia;
    out.inertia_history.push_back(inertia);
    out.iterations = it + 1;
    if (!changed) break;
  }
  return out;
}

Affinities tsne_affinities(const Matrix& points, double perplexity, double tolerance) {
  const std::size_t n = points.rows();
  if (n < 2) throw ConfigError("tsne_affinities: need at least two points");
  Matrix dist(n, n);
  double max_dist = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = squared_distance(points.row(i), points.row(j));
      dist(i, j) = dist(j, i) = d;
      max_dist = std::max(max_dist, d);
    }
  }
  if (max_dist == 0.0) throw NumericalError("tsne: all points coincide");

  Affinities out{Matrix(n, n), std::vector<double>(n, 1.0), Matrix(n, n)};
  std::vector<double> row(n);
  for (std::size_t i = 0; i < n; ++i) {
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) dmin = std::min(dmin, dist(i, j));

    double beta = 1.0;
    double lo = 0.0;
    double hi = std::numeric_limits<double>::infinity();
    // Entropy (nats) of the row at precision beta.
    const auto entropy = [&](double b) {
      double sum = 0.0, weighted = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) { row[j] = 0.0; continue; }
        const double shifted = dist(i, j) - dmin;
        row[j] = std::exp(-b * shifted);
        sum += row[j];
        weighted += shifted * row[j];
      }
      for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
      return std::log(sum) + b * weighted / sum;
    };
    for (int it = 0; it < 500; ++it) {
      const double perp = std::exp(entropy(beta));
      if (std::abs(perp - perplexity) < tolerance) break;
      if (perp > perplexity) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
    out.precision[i] = beta;
    std::copy(row.begin(), row.end(), out.conditional.row(i).begin());
  }

  const double denom = 2.0 * static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.joint(i, j) = (out.conditional(i, j) + out.conditional(j, i)) / denom;
  return out;
}

double tsne_kl(const Matrix& joint, const Matrix& coords) {
  const std::size_t n = coords.rows();
  Matrix num(n, n);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double q = 1.0 / (1.0 + squared_distance(coords.row(i), coords.row(j)));
      num(i, j) = num(j, i) = q;
      z += 2.0 * q;
    }
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double p = joint(i, j);
      if (i == j || p <= 0.0) continue;
      const double q = std::max(num(i, j) / z, 1e-300);
      kl += p * std::log(p / q);
    }
  }
  return std::max(kl, 0.0);
}

Embedding2D tsne(const Matrix& points, const TsneConfig& cfg) {
  const std::size_t n = points.rows();
  if (n < 4) throw ConfigError("tsne: need at least 4 points, got " + std::to_string(n));
  if (!(cfg.perplexity >= 1.0 && cfg.perplexity < static_cast<double>(n - 1) / 3.0)) {
    throw ConfigError("tsne: perplexity " + std::to_string(cfg.perplexity) +
                      " must lie in [1, (n - 1) / 3) for n=" + std::to_string(n));
  }
  const Affinities aff = tsne_affinities(points, cfg.perplexity, cfg.perplexity_tolerance);
  const Matrix& P = aff.joint;

  Rng rng(cfg.seed);
  Embedding2D out;
  Matrix& y = out.coords;
  y = gaussian_sample(rng, n, 2);
  for (double& v : y.values()) v *= 1e-2;
  Matrix update(n, 2), gains(n, 2, 1.0), grad(n, 2), num(n, n);

  bool kl_recorded = false;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    if (it == cfg.exaggeration_iters) {
      out.kl_after_exaggeration = tsne_kl(P, y);
      kl_recorded = true;
    }
    const double exaggeration = it < cfg.exaggeration_iters ? cfg.early_exaggeration : 1.0;
    const double momentum = it < cfg.momentum_switch ? cfg.initial_momentum : cfg.final_momentum;

    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double q = 1.0 / (1.0 + squared_distance(y.row(i), y.row(j)));
        num(i, j) = num(j, i) = q;
        z += 2.0 * q;
      }
    }
    grad.fill(0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const double coeff = 4.0 * (exaggeration * P(i, j) - num(i, j) / z) * num(i, j);
        grad(i, 0) += coeff * (y(i, 0) - y(j, 0));
        grad(i, 1) += coeff * (y(i, 1) - y(j, 1));
      }
    }
    for (std::size_t e = 0; e < y.size(); ++e) {
      double& g = gains.values()[e];
      const double gr = grad.values()[e];
      double& u = update.values()[e];
      g = (gr > 0.0) != (u > 0.0) ? g + 0.2 : g * 0.8;
      g = std::max(g, 0.01);
      u = momentum * u - cfg.learning_rate * g * gr;
      y.values()[e] += u;
    }
    const Matrix mean = column_mean(y);
    for (std::size_t i = 0; i < n; ++i) {
      y(i, 0) -= mean(0, 0);
      y(i, 1) -= mean(0, 1);
    }
  }
  if (!all_finite(y)) throw NumericalError("tsne: embedding diverged");
  out.final_kl = tsne_kl(P, y);
  if (!kl_recorded) out.kl_after_exaggeration = out.final_kl;
  return out;
}

CosineMatrix cosine_matrix(const Matrix& vectors) {
  CosineMatrix out;
  std::vector<double> norms;
  for (std::size_t i = 0; i < vectors.rows(); ++i) {
    double s = 0.0;
    for (double v : vectors.row(i)) s += v * v;
    if (s == 0.0) {
      out.excluded.push_back(i);
    } else {
      out.kept.push_back(i);
      norms.push_back(std::sqrt(s));
    }
  }
  const std::size_t n = out.kept.size();
  out.similarity = Matrix(n, n);
  for (std::size_t a = 0; a < n; ++a) {
    out.similarity(a, a) = 1.0;
    const auto va = vectors.row(out.kept[a]);
    for (std::size_t b = a + 1; b < n; ++b) {
      const auto vb = vectors.row(out.kept[b]);
      double dot = 0.0;
      for (std::size_t t = 0; t < va.size(); ++t) dot += va[t] * vb[t];
      const double c = std::clamp(dot / (norms[a] * norms[b]), -1.0, 1.0);
      out.similarity(a, b) = out.similarity(b, a) = c;
    }
  }
  return out;
}

GlobalReport global_report(const SaeParams& params, const FeatureStats& stats,
                           const GlobalReportConfig& cfg) {
  params.check_shapes();
  if (stats.live.size() != params.dict_size()) {
    throw DimensionError("global_report: statistics cover " + std::to_string(stats.live.size()) +
                         " features, model has " + std::to_string(params.dict_size()));
  }
  GlobalReport report;
  for (std::size_t j = 0; j < stats.live.size(); ++j)
    if (stats.live[j]) report.live_features.push_back(j);
  const std::size_t n = report.live_features.size();
  if (n < 4) {
    report.skipped = true;
    report.diagnostic = "only " + std::to_string(n) + " live features; need at least 4";
    return report;
  }

  const std::size_t d = params.input_dim();
  Matrix points(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t j = report.live_features[r];
    for (std::size_t a = 0; a < d; ++a) points(r, a) = params.w_dec()(a, j);
    report.utilization.push_back(stats.utilization[j]);
    report.mean_activation.push_back(stats.mean_activation[j]);
  }
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (double v : points.row(r)) s += v * v;
    if (s > 0.0) for (double& v : points.row(r)) v /= std::sqrt(s);
  }

  TsneConfig tcfg = cfg.tsne;
  const double cap = static_cast<double>(n - 1) / 3.0;
  tcfg.perplexity = std::max(1.0, std::min(tcfg.perplexity, std::nextafter(cap, 0.0)));
  if (tcfg.perplexity >= cap) {
    report.skipped = true;
    report.diagnostic = "too few live features (" + std::to_string(n) + ") for t-SNE";
    return report;
  }
  report.effective_perplexity = tcfg.perplexity;
  report.embedding = tsne(points, tcfg);

  Rng rng(derive_seed(cfg.tsne.seed, 41));
  const std::size_t k = std::min(cfg.clusters, n);
  const KMeansResult km = kmeans(report.embedding.coords, k, rng, cfg.kmeans_iters);
  report.cluster_of = km.assignments;

  report.clusters.resize(k);
  std::vector<double> util_sum(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) report.clusters[c].cluster = c;
  for (std::size_t r = 0; r < n; ++r) {
    ++report.clusters[km.assignments[r]].size;
    util_sum[km.assignments[r]] += report.utilization[r];
  }
  const double total_util = std::accumulate(util_sum.begin(), util_sum.end(), 0.0);
  double mean_share = 0.0;
  std::vector<double> shares(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    auto& row = report.clusters[c];
    row.mean_utilization = row.size > 0 ? util_sum[c] / static_cast<double>(row.size) : 0.0;
    shares[c] = total_util > 0.0 ? util_sum[c] / total_util : 0.0;
    mean_share += shares[c];
  }
  mean_share /= static_cast<double>(k);
  double var = 0.0;
  for (double s : shares) var += (s - mean_share) * (s - mean_share);
  report.cluster_utilization_variance = var / static_cast<double>(k);
  return report;
}

std::vector<std::filesystem::path> write_report_tables(const GlobalReport& report,
                                                       const std::filesystem::path& dir) {
  if (report.skipped) return {};
  std::filesystem::create_directories(dir);
  const auto open = [&](const char* name) {
    std::ofstream out(dir / name);
    if (!out) throw std::runtime_error(std::string("cannot write ") + (dir / name).string());
    out.precision(17);
    return out;
  };
  const auto& y = report.embedding.coords;
  const std::size_t n = report.live_features.size();
  {
    auto out = open("clusters.csv");
    out << "feature,x,y,cluster\n";
    for (std::size_t r = 0; r < n; ++r)
      out << report.live_features[r] << ',' << y(r, 0) << ',' << y(r, 1) << ',' << report.cluster_of[r] << '\n';
  }
  {
    auto out = open("utilization.csv");
    out << "feature,x,y,utilization\n";
    for (std::size_t r = 0; r < n; ++r)
      out << report.live_features[r] << ',' << y(r, 0) << ',' << y(r, 1) << ',' << report.utilization[r] << '\n';
  }
  {
    auto out = open("mean_activation.csv");
    out << "feature,x,y,mean_activation,utilization\n";
    for (std::size_t r = 0; r < n; ++r)
      out << report.live_features[r] << ',' << y(r, 0) << ',' << y(r, 1) << ','
          << report.mean_activation[r] << ',' << report.utilization[r] << '\n';
  }
  {
    auto out = open("cluster_utilization.csv");
    out << "cluster,size,mean_utilization\n";
    for (const auto& c : report.clusters)
      out << c.cluster << ',' << c.size << ',' << c.mean_utilization << '\n';
  }
  return {dir / "clusters.csv", dir / "utilization.csv", dir / "mean_activation.csv",
          dir / "cluster_utilization.csv"};
}

double silhouette_score(const Matrix& points, const std::vector<std::size_t>& labels) {
  const std::size_t n = points.rows();
  if (labels.size() != n) throw DimensionError("silhouette_score: label count mismatch");
  const std::size_t k = n == 0 ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::size_t> sizes(k, 0);
  for (std::size_t l : labels) ++sizes[l];
  double total = 0.0;
  std::vector<double> sum(k);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(sum.begin(), sum.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) sum[labels[j]] += std::sqrt(squared_distance(points.row(i), points.row(j)));
    }
    const std::size_t own = labels[i];
    if (sizes[own] < 2) continue;
    const double a = sum[own] / static_cast<double>(sizes[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c)
      if (c != own && sizes[c] > 0) b = std::min(b, sum[c] / static_cast<double>(sizes[c]));
    if (std::isinf(b)) continue;
    total += (b - a) / std::max(a, b);
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

}  // namespace sae
