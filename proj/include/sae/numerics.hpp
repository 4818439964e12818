#pragma once

// Dense row-major matrices, a seedable Gaussian source and Adam.
//
// Everything here runs in double precision. Matrix products use an i-k-j loop
// order so the inner loop is a contiguous axpy; for each output entry the
// partial products are still accumulated in ascending k order, which keeps
// results bit-identical to the textbook triple loop.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace sae {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  // Literal construction for small fixtures: Matrix::from_rows({{1, 2}, {3, 4}}).
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  void fill(double value);

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// a · b
Matrix matmul(const Matrix& a, const Matrix& b);
// a · bᵀ
Matrix matmul_transposed(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

// Adds `bias` (one row, a.cols() columns) to every row of `a`.
void add_row_broadcast(Matrix& a, const Matrix& bias);
// Column-wise mean over rows, returned as a 1 x cols matrix.
Matrix column_mean(const Matrix& a);

double frobenius_norm(const Matrix& a);
// ||a - b||_F / ||b||_F, or the absolute difference norm when b is zero.
double relative_frobenius_error(const Matrix& a, const Matrix& b);
bool all_finite(const Matrix& a);

// Scales every column to unit L2 norm. Zero columns are left untouched.
void normalize_columns(Matrix& a);
std::vector<double> column_norms(const Matrix& a);

void require_same_shape(const Matrix& a, const Matrix& b, const char* what);

// Seedable random source.
//
// Uniform bits come from std::mt19937_64, whose output sequence is fixed by
// the C++ standard. Gaussians use the Box–Muller transform on 53-bit uniforms
// and cache the second variate; integer draws use rejection sampling. None of
// the <random> distribution classes are used because their algorithms are
// implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  // Uniform integer on [0, n); n must be positive.
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }

  // Text snapshot of the full generator state, including the cached variate.
  std::string serialize() const;
  static Rng deserialize(const std::string& state);

  bool operator==(const Rng& other) const;

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Deterministic 64-bit mixing of a seed with a stream tag, used to derive
// independent generators from one user-facing seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// i.i.d. N(0, 1) entries, filled row-major.
Matrix gaussian_sample(Rng& rng, std::size_t rows, std::size_t cols);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::uint64_t t = 0;

  static AdamState zeros_like(std::span<const Matrix> params);
};

// One bias-corrected Adam update over a set of tensors; increments state.t.
void adam_step(std::span<Matrix> params, std::span<const Matrix> grads, AdamState& state,
               const AdamConfig& cfg);

}  // namespace sae
