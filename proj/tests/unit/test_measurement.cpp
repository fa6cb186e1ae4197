#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "blindinv/measurement.hpp"
#include "test_util.hpp"

using namespace blindinv;
using testutil::random_tensor;

namespace {

Eigen::VectorXd singular_values(const Tensor& m) {
  Eigen::MatrixXd a(m.dim(0), m.dim(1));
  for (std::size_t i = 0; i < m.dim(0); ++i)
    for (std::size_t j = 0; j < m.dim(1); ++j) a(i, j) = m.at(i, j);
  return Eigen::JacobiSVD<Eigen::MatrixXd>(a).singularValues();
}

Tensor matvec(const Tensor& t, const Tensor& x) {
  Tensor y(Shape{t.dim(0)});
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) y[i] += t.at(i, j) * x[j];
  return y;
}

}  // namespace

TEST(Kernels, GaussianIsNormalized) {
  for (auto [size, sigma] : {std::pair{20u, 5.0}, std::pair{7u, 1.5}, std::pair{4u, 0.7}}) {
    const ConvKernel k = gaussian_kernel(size, sigma);
    double total = 0.0;
    for (double v : k.values.data()) total += v;
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  EXPECT_EQ(gaussian_kernel(1, 2.0).values, Tensor(Shape{1, 1}, 1.0));
}

TEST(Kernels, GaussianCornerToCenterRatio) {
  const ConvKernel k = gaussian_kernel(3, 1.0);
  EXPECT_NEAR(k.values.at(0, 0) / k.values.at(1, 1), std::exp(-1.0), 1e-14);
}

TEST(Kernels, EdgeKernelExact) {
  const Tensor expected = Tensor::from_rows({{1, 0, -1}, {2, 0, -2}, {1, 0, -1}});
  EXPECT_EQ(edge_kernel().values, expected);
  for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(edge_kernel().values.at(r, 0) + edge_kernel().values.at(r, 2), 0.0);
}

TEST(Kernels, EdgeOfConstantImageVanishesInside) {
  const Tensor y = apply_kernel(Tensor(Shape{6, 7}, 0.8), edge_kernel());
  for (std::size_t r = 1; r < 5; ++r)
    for (std::size_t c = 1; c < 6; ++c) EXPECT_NEAR(y.at(r, c), 0.0, 1e-15);
}

TEST(ApplyKernel, DeltaIsIdentityAndLinear) {
  Rng rng(1);
  const Tensor a = random_tensor({2, 5, 6}, rng), b = random_tensor({2, 5, 6}, rng);
  EXPECT_EQ(apply_kernel(a, delta_kernel(3)), a);
  const ConvKernel k = gaussian_kernel(4, 1.0);
  Tensor combo(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) combo[i] = 2.5 * a[i] - 0.7 * b[i];
  const Tensor lhs = apply_kernel(combo, k);
  const Tensor ka = apply_kernel(a, k), kb = apply_kernel(b, k);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(lhs[i], 2.5 * ka[i] - 0.7 * kb[i], 1e-12);
}

TEST(Toeplitz, DeltaGivesIdentity) { EXPECT_EQ(toeplitz_of(delta_kernel(3), 4, 5), Tensor::identity(20)); }

TEST(Toeplitz, MatvecEqualsApplyKernel) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const std::size_t h = 3 + rng.bounded(6), w = 3 + rng.bounded(6);
    const std::size_t kh = 1 + rng.bounded(6), kw = 1 + rng.bounded(6);
    const ConvKernel k{random_tensor({kh, kw}, rng)};
    const Tensor x = random_tensor({h, w}, rng);
    const Tensor direct = apply_kernel(x, k);
    const Tensor via = matvec(toeplitz_of(k, h, w), x.reshaped({h * w}));
    EXPECT_LT(max_abs_diff(direct.reshaped({h * w}), via), 1e-10);
  }
}

TEST(Toeplitz, EdgeOperatorRankDeficientAtOddWidth) {
  // [1, 0, -1] along rows is singular only for odd widths.
  const Eigen::VectorXd odd = singular_values(toeplitz_of(edge_kernel(), 7, 7));
  EXPECT_LT(odd(odd.size() - 1), 1e-8 * odd(0));
  const Eigen::VectorXd even = singular_values(toeplitz_of(edge_kernel(), 8, 8));
  EXPECT_GT(even(even.size() - 1), 1e-3 * even(0));
}

TEST(Mixing, IdentityMixIsAbsoluteValue) {
  Rng rng(3);
  const Tensor x = random_tensor({3, 10}, rng);
  const Tensor y = mix_abs({Tensor::identity(3)}, x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], std::abs(x[i]));
  EXPECT_EQ(mix_abs({Tensor::identity(3)}, Tensor(Shape{3, 4})), Tensor(Shape{3, 4}));
}

TEST(Mixing, DifferenceOfTwoSources) {
  const Tensor m = Tensor::from_rows({{1}, {-1}});
  const Tensor x = Tensor::from_rows({{0.5, -0.2, 1.0}, {0.1, 0.4, 1.0}});
  const Tensor y = mix_abs({m}, x);
  EXPECT_DOUBLE_EQ(y[0], 0.4);
  EXPECT_DOUBLE_EQ(y[1], 0.6);
  EXPECT_DOUBLE_EQ(y[2], 0.0);
}

TEST(Mixing, SampledEntriesHaveRequestedMean) {
  Rng a(4), b(4);
  const MixingMatrix m = sample_mixing(100, 100, a);
  EXPECT_EQ(m.values, sample_mixing(100, 100, b).values);
  double mean = 0.0;
  bool negative = false;
  for (double v : m.values.data()) {
    mean += v;
    negative = negative || v < 0.0;
  }
  mean /= m.values.size();
  EXPECT_GE(mean, -0.52);
  EXPECT_LE(mean, -0.48);
  EXPECT_TRUE(negative);
}

TEST(Noise, ZeroSigmaIsIdentityAndStdMatches) {
  Rng rng(5);
  const Tensor y = random_tensor({100, 100}, rng);
  EXPECT_EQ(add_noise(y, 0.0, rng), y);
  Rng a(6), b(6);
  const Tensor n1 = add_noise(y, 0.1, a);
  EXPECT_EQ(n1, add_noise(y, 0.1, b));
  double sq = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) sq += (n1[i] - y[i]) * (n1[i] - y[i]);
  EXPECT_NEAR(std::sqrt(sq / y.size()), 0.1, 0.005);
}

TEST(Observations, BlurOfDeltaIsKernel) {
  Tensor img(Shape{1, 9, 9});
  img[4 * 9 + 4] = 1.0;
  Rng rng(7);
  const ConvKernel k = gaussian_kernel(7, 1.5);
  const ObservationSet obs = make_observations({img}, KernelOperator{"blur", k}, 1, rng);
  ASSERT_EQ(obs.size(), 1u);
  // Correlation with a symmetric kernel: the response is the kernel itself.
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 7; ++j) EXPECT_NEAR(obs.observations[0][(1 + i) * 9 + 1 + j], k.values.at(i, j), 1e-15);
}

TEST(Observations, SaveLoadRoundTrip) {
  Rng rng(8);
  const auto dir = testutil::temp_dir("obs");
  std::vector<Tensor> src{random_tensor({2, 12}, rng), random_tensor({2, 12}, rng)};
  const ObservationSet obs = make_observations(src, MixingOperator{sample_mixing(2, 3, rng)}, 2, rng, 0.0, 99);
  save_observations(dir, obs);
  const ObservationSet back = load_observations(dir);
  EXPECT_EQ(back.operator_id, "mix");
  EXPECT_EQ(back.seed, 99u);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_LT(max_abs_diff(back.observations[1], obs.observations[1]), 1e-6);
  EXPECT_LT(max_abs_diff(back.sources[0], src[0]), 1e-6);
  EXPECT_EQ(operator_id(back.op), "mix");
}

TEST(Observations, RequiresAtLeastOne) {
  Rng rng(9);
  EXPECT_THROW(make_observations({}, IdentityOperator{}, 0, rng), std::invalid_argument);
}
