#include <gtest/gtest.h>

#include <cmath>

#include "blindinv/baselines.hpp"
#include "blindinv/measurement.hpp"
#include "blindinv/solver.hpp"
#include "test_util.hpp"

using namespace blindinv;
using testutil::random_tensor;

namespace {

// G(z) = z reshaped to the image, no activation.
GanModel identity_prior(ImageShape image) {
  Rng rng(0);
  const std::size_t m = image.size();
  nn::Network g = nn::Network::build({nn::LayerSpec::dense(m, m, nn::Activation::none)}, rng, 0.0);
  g.params()[0].value = Tensor::identity(m);
  nn::Network d = nn::Network::build({nn::LayerSpec::dense(1, m, nn::Activation::sigmoid)}, rng, 0.0);
  return {Generator(std::move(g), m, image), Discriminator(std::move(d))};
}

// Single 1x1 convolution with bias: y = w x + b.
ConvSurrogate scalar_surrogate(double w, double b) {
  Rng rng(0);
  nn::Network net = nn::Network::build({nn::LayerSpec::conv(1, 1, 1, 1, nn::Activation::none)}, rng, 0.0);
  net.params()[0].value[0] = w;
  net.params()[1].value[0] = b;
  return ConvSurrogate(std::move(net), 1, false);
}

std::vector<Tensor> blurred_items(const GanModel& prior, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  const ConvKernel k = gaussian_kernel(3, 1.0);
  std::vector<Tensor> ys;
  for (std::size_t j = 0; j < n; ++j) {
    const Tensor z = init_latents(1, 1, prior.generator.latent_dim(), rng);
    ys.push_back(apply_kernel(sample(prior.generator, z.reshaped({z.size()})), k));
  }
  return ys;
}

SolverConfig small_config() {
  SolverConfig cfg;
  cfg.outer_epochs = 4;
  cfg.surrogate_steps = 5;
  cfg.latent_steps = 5;
  cfg.lr_theta = 1e-2;
  cfg.lr_z = 1e-2;
  return cfg;
}

}  // namespace

TEST(Latents, InitRangeAndMean) {
  Rng rng(1);
  const Tensor z = init_latents(20, 2, 100, rng);
  EXPECT_EQ(z.shape(), (Shape{20, 2, 100}));
  double mean = 0.0;
  for (double v : z.data()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LT(v, 1.0);
    mean += v;
  }
  EXPECT_NEAR(mean / z.size(), 0.0, 0.03);
}

TEST(Latents, ProjectClip) {
  const Tensor z = Tensor::from_rows({{-3.0, -1.0, 0.2, 1.0, 7.5}});
  EXPECT_EQ(project_clip(z, -1.0, 1.0), Tensor::from_rows({{-1.0, -1.0, 0.2, 1.0, 1.0}}));
  EXPECT_EQ(project_clip(z, 0.0, 0.5), Tensor::from_rows({{0.0, 0.0, 0.2, 0.5, 0.5}}));
}

TEST(TotalLoss, DataTermNorms) {
  const GanModel prior = identity_prior({1, 1, 2});
  ad::Tape tape;
  std::vector<ad::Var> est{tape.constant(Tensor::from_rows({{1.0, -2.0}}))};
  const std::vector<Tensor> obs{Tensor(Shape{1, 2})};
  ad::Var src = tape.constant(Tensor(Shape{1, 2}));
  EXPECT_DOUBLE_EQ(total_loss(est, obs, prior.discriminator, src, 0.0, LossNorm::l1).value().item(), 3.0);
  EXPECT_DOUBLE_EQ(total_loss(est, obs, prior.discriminator, src, 0.0, LossNorm::l2).value().item(), 5.0);
}

TEST(TotalLoss, PerceptualTermWithFlatDiscriminator) {
  // Zero-weight discriminator: D = 0.5 everywhere.
  const GanModel prior = identity_prior({1, 1, 2});
  ad::Tape tape;
  std::vector<ad::Var> est{tape.constant(Tensor(Shape{1, 2}, 1.0)), tape.constant(Tensor(Shape{1, 2}))};
  const std::vector<Tensor> obs{Tensor(Shape{1, 2}), Tensor(Shape{1, 2})};
  ad::Var src = tape.constant(Tensor(Shape{3, 2}));
  const double got = total_loss(est, obs, prior.discriminator, src, 0.1).value().item();
  EXPECT_NEAR(got, 2.0 + 0.1 * 3.0 * std::log(0.5), 1e-12);
  EXPECT_THROW(total_loss(std::span(est).first(1), obs, prior.discriminator, src, 0.1), std::invalid_argument);
}

TEST(Phases, SurrogatePhaseLeavesLatents) {
  const GanModel prior = testutil::tiny_gan(2);
  const auto ys = blurred_items(prior, 3, 3);
  const SolverConfig cfg = small_config();
  Rng rng(4);
  SolverState state = init_state(cfg, prior, ys, SurrogateFamily::conv, rng);
  const Tensor z = state.z();
  const nn::ParameterSet theta = surrogate_network(state.surrogate).params();
  surrogate_phase(state, cfg, prior, ys);
  EXPECT_EQ(state.z(), z);
  EXPECT_FALSE(surrogate_network(state.surrogate).params().values_equal(theta));
}

TEST(Phases, LatentPhaseLeavesSurrogate) {
  const GanModel prior = testutil::tiny_gan(2);
  const auto ys = blurred_items(prior, 3, 3);
  const SolverConfig cfg = small_config();
  Rng rng(4);
  SolverState state = init_state(cfg, prior, ys, SurrogateFamily::conv, rng);
  const Tensor z = state.z();
  const nn::ParameterSet theta = surrogate_network(state.surrogate).params();
  latent_phase(state, cfg, prior, ys);
  EXPECT_TRUE(surrogate_network(state.surrogate).params().values_equal(theta));
  EXPECT_NE(state.z(), z);
}

TEST(Phases, ZeroStepCountsAreNoOps) {
  const GanModel prior = testutil::tiny_gan(2);
  const auto ys = blurred_items(prior, 2, 5);
  SolverConfig cfg = small_config();
  cfg.surrogate_steps = 0;
  cfg.latent_steps = 0;
  Rng rng(6);
  SolverState state = init_state(cfg, prior, ys, SurrogateFamily::conv, rng);
  const Tensor z = state.z();
  const nn::ParameterSet theta = surrogate_network(state.surrogate).params();
  const RecoveryResult r = run_solver(state, cfg, prior, ys);
  EXPECT_EQ(state.z(), z);
  EXPECT_TRUE(surrogate_network(state.surrogate).params().values_equal(theta));
  ASSERT_EQ(r.loss_history.size(), cfg.outer_epochs);
  for (const EpochLoss& e : r.loss_history) EXPECT_EQ(e.after_latent, r.initial_loss);
}

TEST(Solve, ZeroEpochsReturnsInitialSources) {
  const GanModel prior = testutil::tiny_gan(7);
  const auto ys = blurred_items(prior, 3, 8);
  SolverConfig cfg = small_config();
  cfg.outer_epochs = 0;
  const RecoveryResult r = solve(cfg, prior, ys, SurrogateFamily::conv, 9);
  EXPECT_TRUE(r.loss_history.empty());
  EXPECT_EQ(r.final_loss, r.initial_loss);
  Rng rng(9);
  const Tensor z0 = init_latents(3, 1, prior.generator.latent_dim(), rng);
  EXPECT_EQ(r.latents, z0);
  const auto expected = recovered_sources(prior.generator, z0);
  ASSERT_EQ(r.sources.size(), 3u);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(r.sources[j], expected[j]);
}

TEST(Solve, LinearSurrogateFindsScaleAndOffset) {
  const ImageShape image{1, 3, 3};
  const GanModel prior = identity_prior(image);
  Rng data(10);
  std::vector<Tensor> xs, ys;
  for (int j = 0; j < 4; ++j) xs.push_back(random_tensor({1, 3, 3}, data));

  SolverConfig cfg;
  cfg.outer_epochs = 1;
  cfg.surrogate_steps = 3000;
  cfg.latent_steps = 0;
  cfg.lr_theta = 1e-2;
  cfg.alpha = 0.0;
  cfg.loss_norm = LossNorm::l2;
  for (const Tensor& x : xs) {
    Tensor y = x;
    for (double& v : y.data()) v = 1.7 * v + 0.3;
    ys.push_back(y);
  }
  Rng rng(11);
  SolverState state = init_state(cfg, prior, ys, SurrogateFamily::conv, rng);
  for (std::size_t j = 0; j < xs.size(); ++j) {
    std::copy(xs[j].data().begin(), xs[j].data().end(), state.z().data().begin() + static_cast<std::ptrdiff_t>(j * 9));
  }
  state.surrogate = scalar_surrogate(0.0, 0.0);
  run_solver(state, cfg, prior, ys);
  const auto& p = surrogate_network(state.surrogate).params();
  EXPECT_NEAR(p[0].value[0], 1.7, 1e-2);
  EXPECT_NEAR(p[1].value[0], 0.3, 1e-2);
}

TEST(Solve, IdentityModelsRecoverObservation) {
  const ImageShape image{1, 3, 3};
  const GanModel prior = identity_prior(image);
  Rng data(12);
  const std::vector<Tensor> ys{random_tensor({1, 3, 3}, data, -0.8, 0.8), random_tensor({1, 3, 3}, data, -0.8, 0.8)};
  SolverConfig cfg;
  cfg.outer_epochs = 1;
  cfg.surrogate_steps = 0;
  cfg.latent_steps = 500;
  cfg.lr_z = 1e-2;
  cfg.alpha = 0.0;
  Rng rng(13);
  SolverState state = init_state(cfg, prior, ys, SurrogateFamily::conv, rng);
  state.surrogate = identity_conv_surrogate(1);
  const RecoveryResult r = run_solver(state, cfg, prior, ys);
  for (std::size_t j = 0; j < ys.size(); ++j) {
    double err = 0.0;
    for (std::size_t i = 0; i < 9; ++i) err += std::abs(r.sources[j][i] - ys[j][i]);
    EXPECT_LT(err / 9.0, 1e-2) << "item " << j;
  }
}

TEST(Solve, LatentsStayInsideBox) {
  const GanModel prior = testutil::tiny_gan(14);
  const auto ys = blurred_items(prior, 2, 15);
  SolverConfig cfg = small_config();
  cfg.lr_z = 10.0;
  cfg.clip_lo = -0.5;
  cfg.clip_hi = 0.75;
  const RecoveryResult r = solve(cfg, prior, ys, SurrogateFamily::conv, 16);
  bool on_boundary = false;
  for (double v : r.latents.data()) {
    EXPECT_GE(v, -0.5);
    EXPECT_LE(v, 0.75);
    on_boundary = on_boundary || v == -0.5 || v == 0.75;
  }
  EXPECT_TRUE(on_boundary);
}

TEST(Solve, FrozenIdentitySurrogateEqualsLatentPgd) {
  const GanModel prior = testutil::tiny_gan(17);
  const auto ys = blurred_items(prior, 3, 18);
  SolverConfig cfg = small_config();
  cfg.surrogate_steps = 0;
  cfg.outer_epochs = 6;
  cfg.latent_steps = 7;
  Rng rng(19);
  SolverState state = init_state(cfg, prior, ys, SurrogateFamily::conv, rng);
  state.surrogate = identity_conv_surrogate(1);
  const RecoveryResult r = run_solver(state, cfg, prior, ys);
  const BaselineResult b = pgd_no_forward(prior, ys, BaselineOptions::matching(cfg), 19);
  EXPECT_EQ(r.latents, b.latents);
  EXPECT_EQ(r.final_loss, b.final_loss);
}

TEST(Solve, DeterministicForSeed) {
  const GanModel prior = testutil::tiny_gan(20);
  const auto ys = blurred_items(prior, 2, 21);
  const SolverConfig cfg = small_config();
  const RecoveryResult a = solve(cfg, prior, ys, SurrogateFamily::conv, 22);
  const RecoveryResult b = solve(cfg, prior, ys, SurrogateFamily::conv, 22);
  EXPECT_EQ(a.latents, b.latents);
  EXPECT_EQ(a.loss_history, b.loss_history);
  EXPECT_TRUE(surrogate_network(a.surrogate).params().values_equal(surrogate_network(b.surrogate).params()));
  const RecoveryResult c = solve(cfg, prior, ys, SurrogateFamily::conv, 23);
  EXPECT_NE(a.latents, c.latents);
}

TEST(Solve, LossDecreases) {
  const GanModel prior = testutil::tiny_gan(24);
  const auto ys = blurred_items(prior, 3, 25);
  SolverConfig cfg = small_config();
  cfg.outer_epochs = 10;
  const RecoveryResult r = solve(cfg, prior, ys, SurrogateFamily::conv, 26);
  EXPECT_LT(r.final_loss, r.initial_loss);
  for (const Tensor& s : r.sources) {
    EXPECT_EQ(s.shape(), (Shape{1, 1, 6, 6}));
    for (double v : s.data()) EXPECT_LE(std::abs(v), 1.0);
  }
}

TEST(Solve, MixFamilyShapes) {
  const GanModel prior = testutil::tiny_gan(27);
  Rng rng(28);
  const std::vector<Tensor> ys{random_tensor({4, 36}, rng, 0.0, 1.0), random_tensor({4, 36}, rng, 0.0, 1.0)};
  SolverConfig cfg = small_config();
  cfg.sources = 3;
  const RecoveryResult r = solve(cfg, prior, ys, SurrogateFamily::mix, 29);
  ASSERT_EQ(r.sources.size(), 2u);
  EXPECT_EQ(r.sources[0].shape(), (Shape{3, 1, 6, 6}));
  EXPECT_EQ(r.latents.shape(), (Shape{2, 3, 8}));
}

TEST(Solve, EarlyStopCutsRunShort) {
  const GanModel prior = testutil::tiny_gan(30);
  const auto ys = blurred_items(prior, 2, 31);
  SolverConfig cfg = small_config();
  cfg.outer_epochs = 50;
  cfg.early_stop = true;
  cfg.early_stop_tol = 1.0;
  cfg.early_stop_patience = 3;
  const RecoveryResult r = solve(cfg, prior, ys, SurrogateFamily::conv, 32);
  EXPECT_EQ(r.loss_history.size(), 3u);
}

TEST(Solve, RejectsBadInputs) {
  const GanModel prior = testutil::tiny_gan(33);
  const auto ys = blurred_items(prior, 2, 34);
  SolverConfig cfg = small_config();
  EXPECT_THROW(solve(cfg, prior, {}, SurrogateFamily::conv, 1), std::invalid_argument);
  cfg.sources = 2;
  EXPECT_THROW(solve(cfg, prior, ys, SurrogateFamily::conv, 1), std::invalid_argument);
  cfg.sources = 1;
  cfg.lr_z = 0.0;
  EXPECT_THROW(solve(cfg, prior, ys, SurrogateFamily::conv, 1), std::invalid_argument);
  const std::vector<Tensor> wrong{Tensor(Shape{1, 5, 5})};
  EXPECT_THROW(solve(small_config(), prior, wrong, SurrogateFamily::conv, 1), ShapeError);
}

TEST(Solve, SurrogateRoundTrip) {
  Rng rng(35);
  const Surrogate s = build_mix_surrogate(2, 3, rng, 16, 0.3);
  const auto bytes = encode_surrogate(s);
  const Surrogate back = decode_surrogate(bytes, "test");
  ASSERT_TRUE(std::holds_alternative<MixSurrogate>(back));
  const auto& a = surrogate_network(s).params();
  const auto& b = surrogate_network(back).params();
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_LT(max_abs_diff(a[k].value, b[k].value), 1e-7);
  EXPECT_EQ(encode_surrogate(back), bytes);
}
