#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "sae/errors.hpp"
#include "sae/numerics.hpp"
#include "test_support.hpp"

using namespace sae;
using sae::testing::naive_matmul;
using sae::testing::random_matrix;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Matrix b = Matrix::from_rows({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(Matrix::identity(2), b), b);
}

TEST(Matmul, RowTimesColumn) {
  const Matrix c = matmul(Matrix::from_rows({{1, 2}}), Matrix::from_rows({{3}, {4}}));
  ASSERT_EQ(c.rows(), 1u);
  ASSERT_EQ(c.cols(), 1u);
  EXPECT_EQ(c(0, 0), 11.0);
}

TEST(Matmul, MatchesTripleLoopExactly) {
  Rng rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    const Matrix a = random_matrix(rng, 5, 7);
    const Matrix b = random_matrix(rng, 7, 3);
    EXPECT_EQ(matmul(a, b), naive_matmul(a, b));
  }
}

TEST(Matmul, TransposedVariantsAgree) {
  Rng rng(8);
  const Matrix a = random_matrix(rng, 6, 4);
  const Matrix b = random_matrix(rng, 5, 4);
  EXPECT_EQ(matmul_transposed(a, b), naive_matmul(a, transpose(b)));
  const Matrix t = transpose(b);
  for (std::size_t i = 0; i < b.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) EXPECT_EQ(t(j, i), b(i, j));
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), DimensionError);
  EXPECT_THROW(matmul_transposed(Matrix(2, 3), Matrix(2, 4)), DimensionError);
}

TEST(Matmul, AssociativeWithinTolerance) {
  Rng rng(9);
  for (int rep = 0; rep < 10; ++rep) {
    const Matrix a = random_matrix(rng, 4, 6), b = random_matrix(rng, 6, 5), c = random_matrix(rng, 5, 3);
    EXPECT_LT(relative_frobenius_error(matmul(matmul(a, b), c), matmul(a, matmul(b, c))), 1e-10);
  }
}

TEST(Matrix, ConstructorRejectsWrongPayload) {
  EXPECT_THROW(Matrix(2, 2, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(Matrix, BroadcastAndColumnMean) {
  Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  add_row_broadcast(a, Matrix::from_rows({{10, 20}}));
  EXPECT_EQ(a, Matrix::from_rows({{11, 22}, {13, 24}}));
  EXPECT_EQ(column_mean(a), Matrix::from_rows({{12, 23}}));
  EXPECT_THROW(add_row_broadcast(a, Matrix(1, 3)), DimensionError);
}

TEST(Matrix, NormalizeColumnsGivesUnitNorms) {
  Rng rng(10);
  Matrix a = random_matrix(rng, 8, 5, 3.0);
  normalize_columns(a);
  for (double n : column_norms(a)) EXPECT_NEAR(n, 1.0, 1e-12);
  Matrix z(3, 2);
  normalize_columns(z);
  EXPECT_EQ(z, Matrix(3, 2));
}

TEST(Matrix, FinitenessCheck) {
  Matrix a(2, 2, 1.0);
  EXPECT_TRUE(all_finite(a));
  a(1, 1) = std::nan("");
  EXPECT_FALSE(all_finite(a));
  a(1, 1) = INFINITY;
  EXPECT_FALSE(all_finite(a));
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
  Rng c(43);
  EXPECT_NE(Rng(42).next_u64(), c.next_u64());
}

TEST(Rng, SerializeRoundTripKeepsCachedVariate) {
  Rng a(5);
  a.normal();  // leaves a cached second variate
  Rng b = Rng::deserialize(a.serialize());
  EXPECT_TRUE(a == b);
  for (int i = 0; i < 11; ++i) ASSERT_EQ(a.normal(), b.normal());
  EXPECT_THROW(Rng::deserialize("garbage"), FormatError);
}

TEST(Rng, BelowIsInRangeAndCoversValues) {
  Rng rng(3);
  std::vector<int> seen(7, 0);
  for (int i = 0; i < 7000; ++i) {
    const auto v = rng.below(7);
    ASSERT_LT(v, 7u);
    ++seen[v];
  }
  for (int c : seen) EXPECT_GT(c, 800);
}

TEST(Rng, DerivedSeedsDiffer) {
  EXPECT_NE(derive_seed(1, 1), derive_seed(1, 2));
  EXPECT_NE(derive_seed(1, 1), derive_seed(2, 1));
  EXPECT_EQ(derive_seed(9, 4), derive_seed(9, 4));
}

TEST(GaussianSample, DeterministicAndAdvancing) {
  Rng a(11);
  const Matrix first = gaussian_sample(a, 3, 4);
  const Matrix second = gaussian_sample(a, 3, 4);
  EXPECT_NE(first, second);
  Rng b(11);
  EXPECT_EQ(gaussian_sample(b, 3, 4), first);
}

TEST(GaussianSample, MomentsOfLargeSample) {
  Rng rng(12);
  const Matrix s = gaussian_sample(rng, 1000, 100);
  double mean = 0.0;
  for (double v : s.values()) mean += v;
  mean /= static_cast<double>(s.size());
  double var = 0.0;
  for (double v : s.values()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(s.size() - 1);
  EXPECT_LT(std::abs(mean), 0.02);
  EXPECT_GE(var, 0.97);
  EXPECT_LE(var, 1.03);
}

namespace {

// Scalar Adam written directly from the update equations.
struct ScalarAdam {
  double m = 0.0, v = 0.0;
  int t = 0;
  double step(double p, double g, double lr, double b1, double b2, double eps) {
    ++t;
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    const double mhat = m / (1.0 - std::pow(b1, t));
    const double vhat = v / (1.0 - std::pow(b2, t));
    return p - lr * mhat / (std::sqrt(vhat) + eps);
  }
};

}  // namespace

TEST(Adam, ZeroGradientsLeaveParametersUnchanged) {
  Rng rng(1);
  std::vector<Matrix> params{random_matrix(rng, 3, 2), random_matrix(rng, 1, 4)};
  const auto before = params;
  std::vector<Matrix> grads{Matrix(3, 2), Matrix(1, 4)};
  AdamState state = AdamState::zeros_like(params);
  adam_step(params, grads, state, {});
  EXPECT_EQ(params, before);
  EXPECT_EQ(state.t, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<Matrix> params{Matrix(1, 1, 0.0)};
  std::vector<Matrix> grads{Matrix(1, 1, 1.0)};
  AdamState state = AdamState::zeros_like(params);
  AdamConfig cfg;
  cfg.lr = 0.1;
  adam_step(params, grads, state, cfg);
  EXPECT_NEAR(params[0](0, 0), -0.1, 1e-8);
}

TEST(Adam, MatchesScalarReference) {
  Rng rng(2);
  AdamConfig cfg;
  cfg.lr = 0.01;
  for (int rep = 0; rep < 50; ++rep) {
    const double p0 = rng.normal(), g1 = rng.normal(), g2 = rng.normal();
    std::vector<Matrix> params{Matrix(1, 1, p0)};
    AdamState state = AdamState::zeros_like(params);
    adam_step(params, std::vector<Matrix>{Matrix(1, 1, g1)}, state, cfg);
    adam_step(params, std::vector<Matrix>{Matrix(1, 1, g2)}, state, cfg);
    ScalarAdam ref;
    double p = ref.step(p0, g1, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    p = ref.step(p, g2, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    EXPECT_LT(std::abs(params[0](0, 0) - p) / std::abs(p), 1e-12);
    EXPECT_GE(state.v[0](0, 0), 0.0);
  }
}

TEST(Adam, ZeroLearningRateIsBitIdentical) {
  Rng rng(3);
  std::vector<Matrix> params{random_matrix(rng, 4, 4)};
  const auto before = params;
  AdamState state = AdamState::zeros_like(params);
  AdamConfig cfg;
  cfg.lr = 0.0;
  for (int i = 0; i < 3; ++i) adam_step(params, std::vector<Matrix>{random_matrix(rng, 4, 4)}, state, cfg);
  EXPECT_EQ(params, before);
  EXPECT_EQ(state.t, 3u);
}

TEST(Adam, ShapeMismatchThrows) {
  std::vector<Matrix> params{Matrix(2, 2)};
  AdamState state = AdamState::zeros_like(params);
  EXPECT_THROW(adam_step(params, std::vector<Matrix>{Matrix(2, 3)}, state, {}), DimensionError);
  EXPECT_THROW(adam_step(params, std::vector<Matrix>{Matrix(2, 2), Matrix(1, 1)}, state, {}), DimensionError);
}
