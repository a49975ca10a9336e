#include "instabnn/stats.hpp"

#include <gtest/gtest.h>

#include <random>

#include "support/oracles.hpp"

using namespace instabnn;

TEST(Normalize, TwoPointBatch) {
  // One channel, batch values {3, 1}: batch mean 2, batch std ~1.
  Tensor x(Shape{2, 1, 1, 1});
  x[0] = 3.0f;
  x[1] = 1.0f;
  NormStats stats(1);
  Tensor out = normalize_no_affine(x, stats, NormMode::kTrain);
  EXPECT_NEAR(out[0], 1.0f, 1e-4f);
  EXPECT_NEAR(out[1], -1.0f, 1e-4f);
  EXPECT_TRUE(stats.initialized);
}

TEST(Normalize, EvalIdentityStats) {
  std::mt19937 rng(9);
  Tensor x = random_tensor<float>(Shape{2, 3, 4, 4}, rng);
  NormStats stats(3);
  stats.load({0.0f, 0.0f, 0.0f}, {1.0f, 1.0f, 1.0f});
  Tensor out = normalize_no_affine(x, stats, NormMode::kEval);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(out[i], x[i]);
}

TEST(Normalize, EvalBeforeTrainErrors) {
  Tensor x(Shape{1, 2, 2, 2}, 1.0f);
  NormStats stats(2);
  EXPECT_THROW(normalize_no_affine(x, stats, NormMode::kEval), std::invalid_argument);
}

TEST(Normalize, TrainOutputHasZeroMeanUnitStd) {
  std::mt19937 rng(77);
  Tensor x = random_tensor<float>(Shape{4, 3, 6, 6}, rng, -3.0f, 5.0f);
  NormStats stats(3);
  Tensor out = normalize_no_affine(x, stats, NormMode::kTrain);
  std::vector<float> mean, std;
  batch_channel_stats(out, mean, std);
  for (int c = 0; c < 3; ++c) {
    EXPECT_NEAR(mean[c], 0.0f, 1e-4f);
    EXPECT_NEAR(std[c], 1.0f, 1e-4f);
  }
}

TEST(Normalize, RunningStatsBlendWithMomentum) {
  Tensor x(Shape{2, 1, 1, 1});
  x[0] = 3.0f;
  x[1] = 1.0f;
  NormStats stats(1);
  normalize_no_affine(x, stats, NormMode::kTrain);
  // One update from the (0, 1) start at momentum 0.1.
  EXPECT_NEAR(stats.running_mean[0], 0.9f * 0.0f + 0.1f * 2.0f, 1e-6f);
  EXPECT_NEAR(stats.running_std[0], 0.9f * 1.0f + 0.1f * std::sqrt(1.0f + 1e-5f),
              1e-6f);
}

TEST(InstanceMean, HandValues) {
  Tensor c(Shape{1, 2, 3, 3}, 4.25f);
  Tensor m = instance_channel_mean(c);
  EXPECT_FLOAT_EQ(m.at(0, 0, 0, 0), 4.25f);
  EXPECT_FLOAT_EQ(m.at(0, 1, 0, 0), 4.25f);

  Tensor x = Tensor::from_list(Shape{1, 1, 2, 2}, {-1.0f, -1.0f, 1.0f, 3.0f});
  EXPECT_FLOAT_EQ(instance_channel_mean(x)[0], 0.5f);
}

TEST(InstanceMoment3, HandValuesAndOracle) {
  Tensor odd = Tensor::from_list(Shape{1, 1, 2, 2}, {1.0f, -1.0f, 1.0f, -1.0f});
  EXPECT_FLOAT_EQ(instance_channel_moment3(odd)[0], 0.0f);

  Tensor x = Tensor::from_list(Shape{1, 1, 2, 2}, {1.5f, -0.5f, -0.5f, -0.5f});
  EXPECT_FLOAT_EQ(instance_channel_moment3(x)[0], 0.75f);

  std::mt19937 rng(13);
  Tensor r = random_tensor<float>(Shape{2, 3, 5, 5}, rng);
  Tensor m3 = instance_channel_moment3(r);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c) {
      auto v = oracle::map_samples(r, n, c);
      for (double& s : v) s = s * s * s;
      EXPECT_NEAR(m3.at(n, c, 0, 0), oracle::mean(v), 1e-5);
    }
}

TEST(FisherSkewness, HandValues) {
  Tensor sym(Shape{1, 1, 1, 3});
  sym[0] = -1.0f;
  sym[1] = 0.0f;
  sym[2] = 1.0f;
  EXPECT_NEAR(fisher_skewness(sym)[0], 0.0f, 1e-7f);

  Tensor x(Shape{1, 1, 1, 3});
  x[0] = 0.0f;
  x[1] = 0.0f;
  x[2] = 3.0f;
  // mu=1, var=2, E[(X-mu)^3]=2 -> 2 / 2^(3/2)
  EXPECT_NEAR(fisher_skewness(x)[0], 0.70710678f, 1e-6f);

  Tensor nx = x;
  for (std::size_t i = 0; i < nx.numel(); ++i) nx[i] = -nx[i];
  EXPECT_NEAR(fisher_skewness(nx)[0], -0.70710678f, 1e-6f);
}

TEST(FisherSkewness, ZeroVarianceConvention) {
  Tensor c(Shape{2, 2, 3, 3}, 5.0f);
  Tensor s = fisher_skewness(c);
  for (std::size_t i = 0; i < s.numel(); ++i) EXPECT_EQ(s[i], 0.0f);
}

TEST(Moment3Identity, HandAndDegenerateCases) {
  Tensor x(Shape{1, 1, 1, 3});
  x[0] = 0.0f;
  x[1] = 0.0f;
  x[2] = 3.0f;
  EXPECT_NEAR(moment3_identity_check(x)[0], 0.0f, 1e-5f);

  Tensor c(Shape{1, 1, 2, 2}, -2.5f);
  EXPECT_NEAR(moment3_identity_check(c)[0], 0.0f, 1e-5f);
}

TEST(Moment3Identity, RandomMapsSmallRelativeResidual) {
  std::mt19937 rng(1001);
  for (int iter = 0; iter < 200; ++iter) {
    Tensor x = random_tensor<float>(Shape{1, 1, 4, 4}, rng, -2.0f, 3.0f);
    if (iter % 11 == 0) x = Tensor(Shape{1, 1, 4, 4}, 1.75f);  // constant map
    if (iter % 13 == 0) {
      // Two-valued degenerate map.
      for (std::size_t i = 0; i < x.numel(); ++i) x[i] = (i % 3 == 0) ? 2.0f : -1.0f;
    }
    Tensor res = moment3_identity_check(x);
    const float m3 = instance_channel_moment3(x)[0];
    EXPECT_LE(res[0] / std::max(1.0f, std::abs(m3)), 1e-4f) << "iter " << iter;
  }
}

TEST(InstanceMoments, PermutationInvariance) {
  std::mt19937 rng(303);
  Tensor x = random_tensor<float>(Shape{1, 1, 4, 4}, rng);
  InstanceMoments a = compute_instance_moments(x);
  std::vector<float> vals(x.vec());
  std::shuffle(vals.begin(), vals.end(), rng);
  Tensor y = Tensor::from_data(x.shape(), vals);
  InstanceMoments b = compute_instance_moments(y);
  EXPECT_NEAR(a.m1[0], b.m1[0], 1e-6f);
  EXPECT_NEAR(a.m3[0], b.m3[0], 1e-6f);
  EXPECT_NEAR(a.var[0], b.var[0], 1e-6f);
  EXPECT_NEAR(a.skew[0], b.skew[0], 1e-6f);
}

TEST(ComputeThreshold, Examples) {
  Tensor x = Tensor::from_list(Shape{1, 1, 2, 2}, {1.5f, -0.5f, -0.5f, -0.5f});
  InstanceMoments m = compute_instance_moments(x);
  ASSERT_FLOAT_EQ(m.m3[0], 0.75f);

  ThresholdParams p(1);
  p.alpha[0] = 0.1f;
  p.beta[0] = 0.2f;
  Tensor th = compute_threshold(ThVariant::kCube, m, p);
  EXPECT_NEAR(th[0], 0.25f, 1e-6f);

  // beta = 0 degenerates every variant to the plain learned threshold.
  ThresholdParams p0(1);
  p0.alpha[0] = 0.37f;
  for (ThVariant v : {ThVariant::kMean, ThVariant::kMeanVar, ThVariant::kMeanSkew,
                      ThVariant::kMeanSkewVar, ThVariant::kCube})
    EXPECT_FLOAT_EQ(compute_threshold(v, m, p0)[0], 0.37f);

  // Zero-mean instance under the mean variant.
  Tensor zm = Tensor::from_list(Shape{1, 1, 2, 2}, {1.0f, -1.0f, 2.0f, -2.0f});
  InstanceMoments mz = compute_instance_moments(zm);
  ThresholdParams pm(1);
  pm.alpha[0] = 0.1f;
  pm.beta[0] = 5.0f;
  EXPECT_NEAR(compute_threshold(ThVariant::kMean, mz, pm)[0], 0.1f, 1e-6f);
}

TEST(ComputeThreshold, AllVariantFormulas) {
  std::mt19937 rng(404);
  Tensor x = random_tensor<float>(Shape{2, 2, 4, 4}, rng);
  InstanceMoments m = compute_instance_moments(x);
  ThresholdParams p(2);
  p.alpha = {0.1f, -0.2f};
  p.beta = {0.5f, 1.5f};
  p.gamma_combo = {-0.3f, 0.7f};
  Tensor t_mean = compute_threshold(ThVariant::kMean, m, p);
  Tensor t_mv = compute_threshold(ThVariant::kMeanVar, m, p);
  Tensor t_ms = compute_threshold(ThVariant::kMeanSkew, m, p);
  Tensor t_msv = compute_threshold(ThVariant::kMeanSkewVar, m, p);
  Tensor t_cube = compute_threshold(ThVariant::kCube, m, p);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 2; ++c) {
      const float a = p.alpha[c], b = p.beta[c], g = p.gamma_combo[c];
      const float m1 = m.m1.at(n, c, 0, 0), var = m.var.at(n, c, 0, 0);
      const float sk = m.skew.at(n, c, 0, 0), m3 = m.m3.at(n, c, 0, 0);
      EXPECT_NEAR(t_mean.at(n, c, 0, 0), a + b * m1, 1e-6f);
      EXPECT_NEAR(t_mv.at(n, c, 0, 0), a + b * m1 * var, 1e-6f);
      EXPECT_NEAR(t_ms.at(n, c, 0, 0), a + b * m1 + g * sk, 1e-6f);
      EXPECT_NEAR(t_msv.at(n, c, 0, 0), a + (b * m1 + g * sk) * var, 1e-6f);
      EXPECT_NEAR(t_cube.at(n, c, 0, 0), a + b * m3, 1e-6f);
    }
}

// The cube form carries the same information as the explicit decomposition:
// m3 = skew*var^1.5 + 3*m1*var + m1^3, so beta * m3 reconstructs the combo.
TEST(ComputeThreshold, CubeMatchesDecompositionReconstruction) {
  std::mt19937 rng(505);
  for (int iter = 0; iter < 50; ++iter) {
    Tensor x = random_tensor<float>(Shape{1, 1, 5, 5}, rng, -2.0f, 2.0f);
    InstanceMoments m = compute_instance_moments(x);
    ThresholdParams p(1);
    p.alpha[0] = 0.05f;
    p.beta[0] = 0.4f;
    const float cube_th = compute_threshold(ThVariant::kCube, m, p)[0];
    const float m1 = m.m1[0], var = m.var[0], sk = m.skew[0];
    const float recon =
        p.alpha[0] +
        p.beta[0] * (sk * std::pow(var, 1.5f) + 3.0f * m1 * var + m1 * m1 * m1);
    EXPECT_NEAR(cube_th, recon, 1e-4f * std::max(1.0f, std::abs(cube_th)));
  }
}

TEST(ThVariantParsing, RoundtripAndErrors) {
  for (const char* s : {"mean", "mean_var", "mean_skew", "mean_skew_var", "cube"})
    EXPECT_EQ(to_string(th_variant_from_string(s)), s);
  EXPECT_THROW(th_variant_from_string("median"), std::invalid_argument);
}
