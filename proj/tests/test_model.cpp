#include <gtest/gtest.h>

#include <cmath>

#include "sae/errors.hpp"
#include "sae/model.hpp"
#include "test_support.hpp"

using namespace sae;
using sae::testing::random_matrix;
using sae::testing::random_params;
using sae::testing::reference_loss;

namespace {

SaeParams identity_params(std::size_t d) {
  SaeParams p = SaeParams::zeros(d, d);
  p.w_enc() = Matrix::identity(d);
  p.w_dec() = Matrix::identity(d);
  return p;
}

}  // namespace

TEST(SaeEncode, ReluClampsNegatives) {
  const Matrix f = sae_encode(Matrix::from_rows({{1, -2}}), identity_params(2));
  EXPECT_EQ(f, Matrix::from_rows({{1, 0}}));
}

TEST(SaeEncode, NegativeBiasSilencesZeroInput) {
  SaeParams p = SaeParams::zeros(3, 4);
  p.b_enc().fill(-5.0);
  EXPECT_EQ(sae_encode(Matrix(2, 3), p), Matrix(2, 4));
}

TEST(SaeEncode, MatchesScalarLoop) {
  Rng rng(1);
  const SaeParams p = random_params(rng, 6, 9);
  const Matrix x = random_matrix(rng, 4, 6);
  const Matrix f = sae_encode(x, p);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 9; ++j) {
      double s = 0.0;
      for (std::size_t a = 0; a < 6; ++a) s += x(i, a) * p.w_enc()(j, a);
      s += p.b_enc()(0, j);
      EXPECT_EQ(f(i, j), std::max(0.0, s));
    }
  EXPECT_THROW(sae_encode(Matrix(2, 5), p), DimensionError);
}

TEST(VsaeEncodeMean, CentredInputGivesZero) {
  SaeParams p = identity_params(2);
  const Matrix x = Matrix::from_rows({{0.5, -1.5}});
  p.b_dec() = x;
  EXPECT_EQ(vsae_encode_mean(x, p), Matrix(1, 2));
}

TEST(VsaeEncodeMean, NoReluOnMean) {
  SaeParams p = identity_params(2);
  p.b_enc() = Matrix::from_rows({{1, 1}});
  EXPECT_EQ(vsae_encode_mean(Matrix::from_rows({{0, -3}}), p), Matrix::from_rows({{1, -2}}));
}

TEST(VsaeEncodeMean, MatchesScalarLoop) {
  Rng rng(2);
  const SaeParams p = random_params(rng, 5, 8);
  const Matrix x = random_matrix(rng, 3, 5);
  const Matrix mu = vsae_encode_mean(x, p);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      double s = 0.0;
      for (std::size_t a = 0; a < 5; ++a) s += (x(i, a) - p.b_dec()(0, a)) * p.w_enc()(j, a);
      s += p.b_enc()(0, j);
      EXPECT_EQ(mu(i, j), s);
    }
}

TEST(Reparameterize, ZeroNoiseAndZeroMean) {
  Rng rng(3);
  const Matrix mu = random_matrix(rng, 2, 3);
  const Matrix e = random_matrix(rng, 2, 3);
  EXPECT_EQ(reparameterize(mu, Matrix(2, 3)), mu);
  EXPECT_EQ(reparameterize(Matrix(2, 3), e), e);
  EXPECT_THROW(reparameterize(mu, Matrix(3, 2)), DimensionError);
}

TEST(Reparameterize, SampleMomentsAroundFixedMean) {
  Rng rng(4);
  const std::size_t n = 100000, m = 3;
  const Matrix mu(n, m, 1.5);
  const Matrix z = reparameterize(mu, gaussian_sample(rng, n, m));
  for (std::size_t j = 0; j < m; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += z(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (z(i, j) - mean) * (z(i, j) - mean);
    var /= static_cast<double>(n - 1);
    EXPECT_GE(mean, 1.48);
    EXPECT_LE(mean, 1.52);
    EXPECT_GE(var, 0.97);
    EXPECT_LE(var, 1.03);
  }
}

TEST(TopK, SelectsLargestByValue) {
  const TopKResult r = topk_select(Matrix::from_rows({{3, 1, 4, 1, 5}}), 2);
  EXPECT_EQ(r.codes, Matrix::from_rows({{0, 0, 4, 0, 5}}));
  ASSERT_EQ(r.indices.size(), 2u);
  EXPECT_EQ(r.indices[0], 2u);
  EXPECT_EQ(r.indices[1], 4u);
}

TEST(TopK, TieGoesToLowerIndex) {
  const TopKResult r = topk_select(Matrix::from_rows({{2, 2, 1}}), 1);
  EXPECT_EQ(r.codes, Matrix::from_rows({{2, 0, 0}}));
  EXPECT_EQ(r.indices[0], 0u);
}

TEST(TopK, SignedValuesNotMagnitudes) {
  const TopKResult r = topk_select(Matrix::from_rows({{-9, 0.5, -0.1, 0.2}}), 2);
  EXPECT_EQ(r.codes, Matrix::from_rows({{0, 0.5, 0, 0.2}}));
}

TEST(TopK, FullWidthIsIdentity) {
  Rng rng(5);
  const Matrix v = random_matrix(rng, 4, 6);
  EXPECT_EQ(topk_select(v, 6).codes, v);
}

TEST(TopK, InvalidKThrows) {
  EXPECT_THROW(topk_select(Matrix(2, 3), 4), ConfigError);
  EXPECT_THROW(topk_select(Matrix(2, 3), 0), ConfigError);
}

TEST(TopK, SparsityIndicesAndIdempotence) {
  Rng rng(6);
  const Matrix v = random_matrix(rng, 500, 32);
  const TopKResult r = topk_select(v, 5);
  for (std::size_t i = 0; i < v.rows(); ++i) {
    std::size_t nz = 0;
    for (double c : r.codes.row(i)) nz += c != 0.0;
    EXPECT_LE(nz, 5u);
    const auto idx = r.row_indices(i);
    for (std::size_t a = 1; a < idx.size(); ++a) EXPECT_LT(idx[a - 1], idx[a]);
    // Every kept value is at least every dropped value.
    double min_kept = 1e300, max_dropped = -1e300;
    for (std::size_t j = 0; j < v.cols(); ++j) {
      const bool kept = std::find(idx.begin(), idx.end(), j) != idx.end();
      if (kept) {
        min_kept = std::min(min_kept, v(i, j));
        EXPECT_EQ(r.codes(i, j), v(i, j));
      } else {
        max_dropped = std::max(max_dropped, v(i, j));
        EXPECT_EQ(r.codes(i, j), 0.0);
      }
    }
    EXPECT_GE(min_kept, max_dropped);
  }
  Matrix positive = v;
  for (double& x : positive.values()) x = std::abs(x) + 0.1;
  const Matrix once = topk_select(positive, 5).codes;
  EXPECT_EQ(topk_select(once, 5).codes, once);
}

TEST(Decode, ZeroCodeGivesBias) {
  Rng rng(7);
  const SaeParams p = random_params(rng, 4, 6);
  const Matrix xhat = decode(Matrix(3, 6), p);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t a = 0; a < 4; ++a) EXPECT_EQ(xhat(i, a), p.b_dec()(0, a));
}

TEST(Decode, OneHotReadsAtom) {
  Rng rng(8);
  SaeParams p = random_params(rng, 4, 6);
  p.b_dec().fill(0.0);
  Matrix code(1, 6);
  code(0, 3) = 1.0;
  const Matrix xhat = decode(code, p);
  for (std::size_t a = 0; a < 4; ++a) EXPECT_EQ(xhat(0, a), p.w_dec()(a, 3));
}

TEST(Decode, MatchesScalarLoop) {
  Rng rng(9);
  const SaeParams p = random_params(rng, 5, 7);
  const Matrix codes = random_matrix(rng, 3, 7);
  const Matrix xhat = decode(codes, p);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t a = 0; a < 5; ++a) {
      double s = 0.0;
      for (std::size_t j = 0; j < 7; ++j) s += codes(i, j) * p.w_dec()(a, j);
      s += p.b_dec()(0, a);
      EXPECT_EQ(xhat(i, a), s);
    }
  EXPECT_THROW(decode(Matrix(1, 6), p), DimensionError);
}

TEST(KlDivergence, ClosedFormCases) {
  EXPECT_EQ(kl_divergence(Matrix(3, 4)), 0.0);
  EXPECT_DOUBLE_EQ(kl_divergence(Matrix::from_rows({{1, 2}})), 2.5);
  EXPECT_DOUBLE_EQ(kl_divergence(Matrix::from_rows({{1, 2}, {0, 0}})), 1.25);
}

TEST(KlDivergence, QuadraticScalingAndFullFormula) {
  Rng rng(10);
  for (int rep = 0; rep < 20; ++rep) {
    const Matrix mu = random_matrix(rng, 4, 6, 2.0);
    const double c = 3.0 * rng.uniform() - 1.5;
    Matrix scaled = mu;
    for (double& v : scaled.values()) v *= c;
    const double kl = kl_divergence(mu);
    EXPECT_LT(std::abs(kl_divergence(scaled) - c * c * kl) / (c * c * kl), 1e-12);

    // 0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2) at sigma = 1, batch mean.
    const double sigma = 1.0;
    double full = 0.0;
    for (double v : mu.values()) full += 0.5 * (v * v + sigma * sigma - 1.0 - std::log(sigma * sigma));
    full /= static_cast<double>(mu.rows());
    EXPECT_LT(std::abs(kl - full) / full, 1e-12);
  }
}

TEST(Forward, VsaeZeroMeanWithoutSampling) {
  Rng rng(11);
  SaeParams p = random_params(rng, 4, 6);
  p.w_enc().fill(0.0);
  p.b_enc().fill(0.0);
  const Matrix x = random_matrix(rng, 5, 4);
  const ForwardResult r = forward(x, p, {Architecture::VsaeTopK, 2, 0.0, 0.3});
  double expected = 0.0;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t a = 0; a < 4; ++a) expected += std::pow(x(i, a) - p.b_dec()(0, a), 2);
  EXPECT_NEAR(r.loss.recon_mse, expected / 5.0, 1e-12);
  EXPECT_EQ(r.loss.kl, 0.0);
  EXPECT_EQ(r.trace.preact, r.trace.mu);
}

TEST(Forward, PerfectReconstructionHasZeroLoss) {
  const SaeParams p = identity_params(3);
  const Matrix x = Matrix::from_rows({{1, 2, 3}, {0.5, 0.25, 4}});
  const ForwardResult r = forward(x, p, {Architecture::SaeTopK, 3, 0.0, 0.0});
  EXPECT_EQ(r.loss.total, 0.0);
  EXPECT_EQ(r.trace.xhat, x);
}

TEST(Forward, LossAgreesWithIndependentRecomputation) {
  Rng rng(12);
  for (int rep = 0; rep < 20; ++rep) {
    const SaeParams p = random_params(rng, 6, 12);
    const Matrix x = random_matrix(rng, 7, 6);
    const Matrix eps = gaussian_sample(rng, 7, 12);
    for (const Architecture arch : {Architecture::SaeTopK, Architecture::VsaeTopK}) {
      const ModelConfig cfg{arch, 4, 0.1, 0.2};
      const Matrix* noise = arch == Architecture::VsaeTopK ? &eps : nullptr;
      const ForwardResult r = forward(x, p, cfg, noise);
      const double ref = reference_loss(x, p, cfg, noise);
      EXPECT_LT(std::abs(r.loss.total - ref) / ref, 1e-12);
      const double composed = arch == Architecture::SaeTopK
                                  ? r.loss.recon_mse + cfg.l1_coeff * r.loss.sparsity_l1
                                  : r.loss.recon_mse + r.loss.beta_effective * r.loss.kl;
      EXPECT_LT(std::abs(r.loss.total - composed) / composed, 1e-12);
      EXPECT_GE(r.loss.kl, 0.0);
      EXPECT_GE(r.loss.sparsity_l1, 0.0);
      if (arch == Architecture::VsaeTopK) {
        EXPECT_EQ(r.trace.preact, reparameterize(r.trace.mu, eps));
        // Continuous noise: exactly K nonzeros per row.
        for (std::size_t i = 0; i < x.rows(); ++i) {
          std::size_t nz = 0;
          for (double c : r.trace.codes().row(i)) nz += c != 0.0;
          EXPECT_EQ(nz, 4u);
        }
      }
    }
  }
}

TEST(Forward, DeterministicEvaluationIsBitIdentical) {
  Rng rng(13);
  const SaeParams p = random_params(rng, 6, 12);
  const Matrix x = random_matrix(rng, 7, 6);
  for (const Architecture arch : {Architecture::SaeTopK, Architecture::VsaeTopK}) {
    const ModelConfig cfg{arch, 3, 0.0, 0.1};
    const ForwardResult a = forward(x, p, cfg), b = forward(x, p, cfg);
    EXPECT_EQ(a.trace.preact, b.trace.preact);
    EXPECT_EQ(a.trace.codes(), b.trace.codes());
    EXPECT_EQ(a.trace.xhat, b.trace.xhat);
    EXPECT_EQ(a.loss.total, b.loss.total);
    EXPECT_EQ(encode_codes(x, p, cfg), a.trace.codes());
  }
}

TEST(Forward, SampledPassIsSeedDeterministic) {
  Rng rng(14);
  const SaeParams p = random_params(rng, 6, 12);
  const Matrix x = random_matrix(rng, 7, 6);
  const ModelConfig cfg{Architecture::VsaeTopK, 3, 0.0, 0.1};
  Rng r1(99), r2(99);
  EXPECT_EQ(forward_sampled(x, p, cfg, r1).trace.eps, forward_sampled(x, p, cfg, r2).trace.eps);
  EXPECT_NE(forward_sampled(x, p, cfg, r1).trace.eps, Matrix(7, 12));
}

TEST(Forward, LinearAutoencoderLimitAgrees) {
  Rng rng(15);
  SaeParams p = random_params(rng, 5, 8, 0.3);
  p.b_dec().fill(0.0);
  p.b_enc().fill(10.0);  // every pre-activation positive
  const Matrix x = random_matrix(rng, 6, 5);
  const ForwardResult sae = forward(x, p, {Architecture::SaeTopK, 8, 0.0, 0.0});
  const ForwardResult vsae = forward(x, p, {Architecture::VsaeTopK, 8, 0.0, 0.0});
  EXPECT_EQ(sae.loss.total, vsae.loss.total);
}

TEST(Backward, ZeroEverythingGivesZeroGradients) {
  for (const Architecture arch : {Architecture::SaeTopK, Architecture::VsaeTopK}) {
    const SaeParams p = SaeParams::zeros(4, 6);
    const ModelConfig cfg{arch, 2, 0.0, 0.0};
    const ForwardResult r = forward(Matrix(3, 4), p, cfg);
    const SaeGrads g = backward(r.trace, p, cfg);
    for (const Matrix& t : g.tensors)
      for (double v : t.values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Backward, KlOnlyGradientIsBetaMuOverN) {
  Rng rng(16);
  SaeParams p = random_params(rng, 4, 6);
  p.w_dec().fill(0.0);  // x̂ = b_dec
  Matrix x(5, 4);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t a = 0; a < 4; ++a) x(i, a) = p.b_dec()(0, a);  // zero residual
  const double beta = 0.37;
  const ModelConfig cfg{Architecture::VsaeTopK, 3, 0.0, beta};
  const ForwardResult r = forward(x, p, cfg);
  const Matrix g = latent_gradient(r.trace, p, cfg);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(g(i, j), beta * r.trace.mu(i, j) / 5.0);
}

TEST(Backward, ReparameterizationPassesGradientUnchanged) {
  // d loss / d mu minus the KL part must equal d recon / d z with z treated
  // as a free input, evaluated here by central differences on z itself.
  Rng rng(17);
  const SaeParams p = random_params(rng, 5, 10);
  const Matrix x = random_matrix(rng, 4, 5);
  const Matrix eps = gaussian_sample(rng, 4, 10);
  const double beta = 0.2;
  const ModelConfig cfg{Architecture::VsaeTopK, 3, 0.0, beta};
  const ForwardResult r = forward(x, p, cfg, &eps);
  const Matrix g = latent_gradient(r.trace, p, cfg);

  const auto recon_of_z = [&](const Matrix& z) {
    const Matrix codes = topk_select(z, cfg.k).codes;
    double s = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t a = 0; a < x.cols(); ++a) {
        double xh = p.b_dec()(0, a);
        for (std::size_t j = 0; j < codes.cols(); ++j) xh += codes(i, j) * p.w_dec()(a, j);
        s += (x(i, a) - xh) * (x(i, a) - xh);
      }
    return s / static_cast<double>(x.rows());
  };
  const double h = 1e-6;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 10; ++j) {
      Matrix zp = r.trace.preact, zm = r.trace.preact;
      zp(i, j) += h;
      zm(i, j) -= h;
      const double fd = (recon_of_z(zp) - recon_of_z(zm)) / (2.0 * h);
      const double direct = g(i, j) - beta * r.trace.mu(i, j) / 4.0;
      EXPECT_NEAR(direct, fd, 1e-6 * std::max(1.0, std::abs(fd)));
    }
}

TEST(Backward, MismatchedTraceThrows) {
  Rng rng(18);
  const SaeParams p = random_params(rng, 4, 6);
  const ModelConfig cfg{Architecture::SaeTopK, 2, 0.0, 0.0};
  const ForwardResult r = forward(random_matrix(rng, 3, 4), p, cfg);
  EXPECT_THROW(backward(r.trace, random_params(rng, 4, 8), cfg), DimensionError);
  ModelConfig other = cfg;
  other.arch = Architecture::VsaeTopK;
  EXPECT_THROW(backward(r.trace, p, other), DimensionError);
}

TEST(Architecture, NamesRoundTrip) {
  EXPECT_EQ(parse_architecture("sae_topk"), Architecture::SaeTopK);
  EXPECT_EQ(parse_architecture("vsae_topk"), Architecture::VsaeTopK);
  EXPECT_EQ(to_string(Architecture::VsaeTopK), "vsae_topk");
  EXPECT_THROW(parse_architecture("gated"), ConfigError);
}
