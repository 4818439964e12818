#include "sae/numerics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <sstream>

#include "sae/errors.hpp"

namespace sae {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t n = rows.size();
  const std::size_t m = n == 0 ? 0 : rows.begin()->size();
  Matrix out(n, m);
  std::size_t r = 0;
  for (const auto& row : rows) {
    if (row.size() != m) throw DimensionError("ragged matrix literal");
    std::copy(row.begin(), row.end(), out.row(r).begin());
    ++r;
  }
  return out;
}

Matrix Matrix::identity(std::size_t n) {
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
  return out;
}

void Matrix::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(what) + ": shape " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
  }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                         std::to_string(b.rows()) + " differ");
  }
  const std::size_t n = a.rows();
  const std::size_t inner = a.cols();
  const std::size_t m = b.cols();
  Matrix out(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    double* dst = out.data() + i * m;
    const double* arow = a.data() + i * inner;
    for (std::size_t k = 0; k < inner; ++k) {
      const double s = arow[k];
      const double* brow = b.data() + k * m;
      for (std::size_t j = 0; j < m; ++j) dst[j] += s * brow[j];
    }
  }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_transposed: column counts " + std::to_string(a.cols()) +
                         " and " + std::to_string(b.cols()) + " differ");
  }
  return matmul(a, transpose(b));
}

void add_row_broadcast(Matrix& a, const Matrix& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw DimensionError("add_row_broadcast: bias must be 1x" + std::to_string(a.cols()));
  }
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias(0, j);
  }
}

Matrix column_mean(const Matrix& a) {
  Matrix out(1, a.cols());
  if (a.rows() == 0) return out;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) out(0, j) += r[j];
  }
  for (double& v : out.values()) v /= static_cast<double>(a.rows());
  return out;
}

double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  return std::sqrt(s);
}

double relative_frobenius_error(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "relative_frobenius_error");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.values()[i] - b.values()[i];
    diff += d * d;
  }
  const double ref = frobenius_norm(b);
  return ref > 0.0 ? std::sqrt(diff) / ref : std::sqrt(diff);
}

bool all_finite(const Matrix& a) {
  return std::all_of(a.values().begin(), a.values().end(),
                     [](double v) { return std::isfinite(v); });
}

std::vector<double> column_norms(const Matrix& a) {
  std::vector<double> sq(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) sq[j] += r[j] * r[j];
  }
  for (double& v : sq) v = std::sqrt(v);
  return sq;
}

void normalize_columns(Matrix& a) {
  const auto norms = column_norms(a);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < r.size(); ++j)
      if (norms[j] > 0.0) r[j] /= norms[j];
  }
}

Rng::Rng(std::uint64_t seed) : engine_(seed) {}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // 1 - U lies in (0, 1], so the log is finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw ConfigError("Rng::below: empty range");
  const std::uint64_t threshold = (0 - n) % n;
  for (;;) {
    const std::uint64_t x = engine_();
    if (x >= threshold) return x % n;
  }
}

std::string Rng::serialize() const {
  std::ostringstream os;
  os << engine_ << ' ' << (has_spare_ ? 1 : 0) << ' ' << std::bit_cast<std::uint64_t>(spare_);
  return os.str();
}

Rng Rng::deserialize(const std::string& state) {
  Rng rng;
  std::istringstream is(state);
  int spare_flag = 0;
  std::uint64_t spare_bits = 0;
  is >> rng.engine_ >> spare_flag >> spare_bits;
  if (!is) throw FormatError(FormatErrorKind::BadSection, "unreadable generator state");
  rng.has_spare_ = spare_flag != 0;
  rng.spare_ = std::bit_cast<double>(spare_bits);
  return rng;
}

bool Rng::operator==(const Rng& other) const {
  return engine_ == other.engine_ && has_spare_ == other.has_spare_ &&
         std::bit_cast<std::uint64_t>(spare_) == std::bit_cast<std::uint64_t>(other.spare_);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Matrix gaussian_sample(Rng& rng, std::size_t rows, std::size_t cols) {
  Matrix out(rows, cols);
  for (double& v : out.values()) v = rng.normal();
  return out;
}

AdamState AdamState::zeros_like(std::span<const Matrix> params) {
  AdamState state;
  for (const auto& p : params) {
    state.m.emplace_back(p.rows(), p.cols());
    state.v.emplace_back(p.rows(), p.cols());
  }
  return state;
}

void adam_step(std::span<Matrix> params, std::span<const Matrix> grads, AdamState& state,
               const AdamConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size() ||
      params.size() != state.v.size()) {
    throw DimensionError("adam_step: tensor counts differ");
  }
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 && cfg.beta2 >= 0.0 && cfg.beta2 < 1.0)) {
    throw ConfigError("adam_step: betas must lie in [0, 1)");
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    require_same_shape(params[p], grads[p], "adam_step gradient");
    require_same_shape(params[p], state.m[p], "adam_step first moment");
    require_same_shape(params[p], state.v[p], "adam_step second moment");
  }

  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double m_corr = 1.0 - std::pow(cfg.beta1, t);
  const double v_corr = 1.0 - std::pow(cfg.beta2, t);

  for (std::size_t p = 0; p < params.size(); ++p) {
    auto w = params[p].values();
    auto g = grads[p].values();
    auto m = state.m[p].values();
    auto v = state.v[p].values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / m_corr;
      const double v_hat = v[i] / v_corr;
      if (cfg.lr != 0.0) w[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

}  // namespace sae
