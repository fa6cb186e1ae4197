#include <gtest/gtest.h>

#include <cmath>

#include "blindinv/nn.hpp"
#include "test_util.hpp"

using namespace blindinv;
using ad::Tape;
using ad::Var;
using testutil::random_tensor;

namespace {

// Textbook bias-corrected Adam on a single scalar.
struct RefAdam {
  double m = 0, v = 0, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  int t = 0;
  double step(double theta, double g, double lr) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    return theta - lr * mh / (std::sqrt(vh) + eps);
  }
};

nn::ParameterSet single(double value) {
  nn::ParameterSet p;
  p.add("theta", Tensor(Shape{1}, value));
  return p;
}

}  // namespace

TEST(Dense, IdentityWeightsPassThrough) {
  Rng rng(1);
  const Tensor x = random_tensor({4}, rng);
  Tape tape;
  Var y = nn::dense_forward(tape.constant(Tensor::identity(4)), tape.constant(Tensor(Shape{4})), tape.constant(x));
  EXPECT_EQ(y.value(), x);
}

TEST(Dense, ZeroWeightsGiveBias) {
  Rng rng(2);
  const Tensor b = random_tensor({3}, rng);
  Tape tape;
  Var y = nn::dense_forward(tape.constant(Tensor(Shape{3, 5})), tape.constant(b), tape.constant(random_tensor({5}, rng)));
  EXPECT_EQ(y.value(), b);
}

TEST(Dense, BatchRowsMatchSingleInputs) {
  Rng rng(3);
  const Tensor w = random_tensor({3, 4}, rng), b = random_tensor({3}, rng), x = random_tensor({2, 4}, rng);
  Tape tape;
  const Tensor batch = nn::dense_forward(tape.constant(w), tape.constant(b), tape.constant(x)).value();
  for (std::size_t r = 0; r < 2; ++r) {
    Tensor row(Shape{4});
    for (std::size_t i = 0; i < 4; ++i) row[i] = x.at(r, i);
    const Tensor y = nn::dense_forward(tape.constant(w), tape.constant(b), tape.constant(row)).value();
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(batch.at(r, i), y[i], 1e-14);
  }
}

TEST(Dense, GradCheckThroughLayer) {
  Rng rng(4);
  const Tensor w = random_tensor({3, 4}, rng), b = random_tensor({3}, rng), x = random_tensor({4}, rng);
  EXPECT_LT(ad::grad_check([&](Var v) {
              Tape& t = v.tape();
              return ad::sum_squares(nn::activate(nn::dense_forward(t.constant(w), t.constant(b), v), nn::Activation::tanh));
            }, x), 1e-5);
  EXPECT_LT(ad::grad_check([&](Var v) {
              Tape& t = v.tape();
              return ad::sum_squares(nn::dense_forward(v, t.constant(b), t.constant(x)));
            }, w), 1e-5);
}

TEST(Init, ZeroStdGivesZeros) {
  Rng rng(5);
  const Tensor t = nn::init_params({10, 10}, rng, nn::InitScheme::normal, 0.0);
  for (double v : t.data()) EXPECT_EQ(v, 0.0);
}

TEST(Init, SampleStdNearTarget) {
  Rng rng(6);
  const Tensor t = nn::init_params({100, 100}, rng, nn::InitScheme::normal, 0.02);
  double mean = 0, sq = 0;
  for (double v : t.data()) mean += v;
  mean /= t.size();
  for (double v : t.data()) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / t.size());
  EXPECT_GE(sd, 0.018);
  EXPECT_LE(sd, 0.022);
}

TEST(Init, SameSeedSameTensor) {
  Rng a(7), b(7);
  EXPECT_EQ(nn::init_params({8, 8}, a), nn::init_params({8, 8}, b));
}

TEST(Adam, FirstStepWithUnitGradient) {
  nn::ParameterSet p;
  p.add("w", Tensor(Shape{2, 2}, 0.5));
  p[0].grad = Tensor(Shape{2, 2}, 1.0);
  nn::AdamState s;
  nn::adam_step(p, s, 1e-3);
  for (double v : p[0].value.data()) EXPECT_NEAR(v - 0.5, -1e-3 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(p[0].value[0] - 0.5, -9.99999e-4, 1e-9);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  nn::ParameterSet p = single(0.25);
  p[0].grad = Tensor(Shape{1});
  nn::AdamState s;
  nn::adam_step(p, s, 0.1);
  EXPECT_EQ(p[0].value[0], 0.25);
}

TEST(Adam, MinimizesSquareLikeReference) {
  nn::ParameterSet p = single(1.0);
  nn::AdamState s;
  RefAdam ref;
  double theta = 1.0;
  for (int i = 0; i < 200; ++i) {
    p[0].grad = Tensor(Shape{1}, 2.0 * p[0].value[0]);
    nn::adam_step(p, s, 0.1);
    theta = ref.step(theta, 2.0 * theta, 0.1);
    ASSERT_NEAR(p[0].value[0], theta, 1e-12) << "step " << i;
  }
  EXPECT_LT(std::abs(p[0].value[0]), 0.05);
}

TEST(Adam, SecondMomentNonNegativeAndStateShapes) {
  Rng rng(8);
  nn::ParameterSet p;
  p.add("a", random_tensor({3, 2}, rng));
  p.add("b", random_tensor({4}, rng));
  nn::AdamState s;
  for (int i = 0; i < 20; ++i) {
    for (auto& prm : p) prm.grad = random_tensor(prm.value.shape(), rng, -5, 5);
    nn::adam_step(p, s, 0.01);
  }
  ASSERT_EQ(s.m.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(s.m[k].shape(), p[k].value.shape());
    for (double v : s.v[k].data()) EXPECT_GE(v, 0.0);
  }
  EXPECT_EQ(s.t, 20u);
}

TEST(Adam, ClonedStatesEvolveIdentically) {
  Rng rng(9);
  nn::ParameterSet p;
  p.add("a", random_tensor({5}, rng));
  nn::AdamState s;
  p[0].grad = random_tensor({5}, rng);
  nn::adam_step(p, s, 0.01);
  nn::ParameterSet q = p;
  nn::AdamState s2 = s;
  const Tensor g = random_tensor({5}, rng);
  p[0].grad = g;
  q[0].grad = g;
  nn::adam_step(p, s, 0.01);
  nn::adam_step(q, s2, 0.01);
  EXPECT_TRUE(p.values_equal(q));
}

TEST(Adam, RejectsNonPositiveLearningRate) {
  nn::ParameterSet p = single(1.0);
  nn::AdamState s;
  EXPECT_THROW(nn::adam_step(p, s, 0.0), std::invalid_argument);
}

TEST(Params, ZeroGradsIsIdempotentAndKeepsShapes) {
  Rng rng(10);
  nn::ParameterSet p;
  p.add("a", random_tensor({2, 3}, rng));
  p[0].grad = random_tensor({2, 3}, rng);
  nn::zero_grads(p);
  nn::zero_grads(p);
  EXPECT_EQ(p[0].grad.shape(), (Shape{2, 3}));
  for (double v : p[0].grad.data()) EXPECT_EQ(v, 0.0);
}

TEST(Params, DuplicateNamesRejected) {
  nn::ParameterSet p;
  p.add("a", Tensor(Shape{1}));
  EXPECT_THROW(p.add("a", Tensor(Shape{1})), std::invalid_argument);
}

TEST(Network, BuildNamesAndZeroBiases) {
  Rng rng(11);
  const auto net = nn::Network::build({nn::LayerSpec::dense(4, 3, nn::Activation::relu),
                                       nn::LayerSpec::conv(2, 1, 3, 3, nn::Activation::none)},
                                      rng);
  ASSERT_EQ(net.params().size(), 4u);
  EXPECT_EQ(net.params()[0].name, "dense0.weight");
  EXPECT_EQ(net.params()[3].name, "conv1.bias");
  EXPECT_EQ(net.params()[2].value.shape(), (Shape{2, 1, 3, 3}));
  for (double v : net.params()[1].value.data()) EXPECT_EQ(v, 0.0);
}
