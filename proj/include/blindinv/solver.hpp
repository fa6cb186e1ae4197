#pragma once

// Blind recovery by alternating minimization.
//
// Unknowns are the surrogate parameters Theta and one latent matrix z_j [S x T]
// per observation. Each outer epoch runs T1 Adam steps on Theta with the
// latents frozen, then T2 projected Adam steps on the latents with Theta
// frozen. The objective is
//
//   L = sum_j || F_hat(G(z_j)) - Y_j ||  +  alpha * sum_{j,i} log(1 - D(G(z_j^i)))
//
// The solver only ever sees observations, the number of sources, the surrogate
// family and the pretrained prior; the true operator is not an input.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "gan.hpp"
#include "io.hpp"
#include "nn.hpp"
#include "rng.hpp"
#include "surrogate.hpp"
#include "tensor.hpp"

namespace blindinv {

enum class LossNorm { l1, l2 };

inline std::string to_string(LossNorm n) { return n == LossNorm::l1 ? "l1" : "l2"; }

inline LossNorm loss_norm_from_string(const std::string& s) {
  if (s == "l1") return LossNorm::l1;
  if (s == "l2") return LossNorm::l2;
  throw std::invalid_argument("unknown loss norm '" + s + "' (expected l1 or l2)");
}

struct SolverConfig {
  std::size_t outer_epochs = 100;    // T
  std::size_t surrogate_steps = 50;  // T1
  std::size_t latent_steps = 50;     // T2
  double lr_theta = 4e-3;
  double lr_z = 3e-4;
  double alpha = 1e-4;
  double clip_lo = -1.0;
  double clip_hi = 1.0;
  std::size_t sources = 1;  // S
  LossNorm loss_norm = LossNorm::l1;
  bool early_stop = false;
  double early_stop_tol = 1e-5;
  std::size_t early_stop_patience = 5;

  void validate() const {
    if (sources == 0) throw std::invalid_argument("solver config: S must be at least 1");
    if (!(lr_theta > 0.0) || !(lr_z > 0.0)) throw std::invalid_argument("solver config: learning rates must be positive");
    if (!(alpha >= 0.0)) throw std::invalid_argument("solver config: alpha must be non-negative");
    if (!(clip_lo < clip_hi)) throw std::invalid_argument("solver config: clip_lo must be below clip_hi");
  }

  friend bool operator==(const SolverConfig&, const SolverConfig&) = default;
};

inline io::json to_json(const SolverConfig& c) {
  return {{"T", c.outer_epochs},        {"T1", c.surrogate_steps},   {"T2", c.latent_steps},
          {"lr_theta", c.lr_theta},     {"lr_z", c.lr_z},            {"alpha", c.alpha},
          {"clip_lo", c.clip_lo},       {"clip_hi", c.clip_hi},      {"S", c.sources},
          {"loss_norm", to_string(c.loss_norm)}, {"early_stop", c.early_stop}};
}

enum class SurrogateFamily { conv, mix };

struct EpochLoss {
  double after_surrogate = 0.0;
  double after_latent = 0.0;
  friend bool operator==(const EpochLoss&, const EpochLoss&) = default;
};

struct SolverState {
  nn::ParameterSet latents;  // single parameter "z" of shape [N x S x T]
  Surrogate surrogate;
  nn::AdamState theta_adam;
  nn::AdamState z_adam;
  std::vector<EpochLoss> loss_history;

  const Tensor& z() const { return latents[0].value; }
  Tensor& z() { return latents[0].value; }
};

struct RecoveryResult {
  std::vector<Tensor> sources;  // N tensors [S x C x H x W], all in [-1, 1]
  Surrogate surrogate;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<EpochLoss> loss_history;
  SolverConfig config;
  std::uint64_t seed = 0;
  Tensor latents;  // [N x S x T]
  double runtime_ms = 0.0;
};

/// z_j^(0) ~ U(-1, 1) for every observation; shape [N x S x T].
inline Tensor init_latents(std::size_t n, std::size_t s, std::size_t latent_dim, Rng& rng) {
  Tensor z(Shape{n, s, latent_dim});
  for (double& v : z.data()) v = rng.uniform(-1.0, 1.0);
  return z;
}

inline void project_clip_inplace(Tensor& z, double lo, double hi) {
  for (double& v : z.data()) v = std::clamp(v, lo, hi);
}

inline Tensor project_clip(Tensor z, double lo, double hi) {
  project_clip_inplace(z, lo, hi);
  return z;
}

inline ad::Var norm_of(ad::Var residual, LossNorm norm) {
  return norm == LossNorm::l1 ? ad::l1(residual) : ad::sum_squares(residual);
}

/// sum_j ||Y_est_j - Y_obs_j|| + alpha * L_per(sources). `sources` holds all
/// generated images as rows [B x M]; the perceptual term is skipped when alpha == 0.
inline ad::Var total_loss(std::span<const ad::Var> y_est, std::span<const Tensor> y_obs, const Discriminator& disc,
                          ad::Var sources, double alpha, LossNorm norm = LossNorm::l1) {
  if (y_est.size() != y_obs.size() || y_est.empty()) {
    throw std::invalid_argument("total_loss: " + std::to_string(y_est.size()) + " estimates for " +
                                std::to_string(y_obs.size()) + " observations");
  }
  ad::Tape& tape = sources.tape();
  ad::Var data;
  for (std::size_t j = 0; j < y_est.size(); ++j) {
    ad::Var term = norm_of(ad::sub(y_est[j], tape.constant(y_obs[j])), norm);
    data = j == 0 ? term : ad::add(data, term);
  }
  if (alpha == 0.0) return data;
  return ad::add(data, ad::scalar_mul(perceptual_loss(tape, disc, sources), alpha));
}

namespace detail {

/// Maps the sources of observation j ([S x M]) to an estimate shaped like Y_j.
using MeasureFn = std::function<ad::Var(ad::Var sources_j, std::size_t j)>;
/// Produces a MeasureFn whose constants live on the given tape.
using MeasureFactory = std::function<MeasureFn(ad::Tape&)>;

/// All generated images for latents z [N x S x T], as rows [N*S x M].
inline ad::Var generate(const Generator& gen, const nn::Bound& bound, ad::Var z) {
  const Shape& s = z.shape();
  return gen.forward(bound, ad::reshape(z, {s[0] * s[1], s[2]}));
}

inline Tensor generate_values(const Generator& gen, const Tensor& z) {
  ad::Tape tape;
  return generate(gen, gen.bind(tape, false), tape.constant(z)).value();
}

/// Loss as a function of the latents with everything else held fixed.
struct LatentObjective {
  const GanModel* prior = nullptr;
  std::span<const Tensor> y_obs;
  std::size_t sources = 1;
  double alpha = 0.0;
  LossNorm norm = LossNorm::l1;
  MeasureFactory measurement;

  ad::Var build(ad::Tape& tape, ad::Var z) const {
    const MeasureFn measure = measurement(tape);
    ad::Var all = generate(prior->generator, prior->generator.bind(tape, false), z);
    std::vector<ad::Var> estimates;
    estimates.reserve(y_obs.size());
    for (std::size_t j = 0; j < y_obs.size(); ++j) {
      estimates.push_back(measure(ad::slice_rows(all, j * sources, sources), j));
    }
    return total_loss(estimates, y_obs, prior->discriminator, all, alpha, norm);
  }

  double value(const Tensor& z) const {
    ad::Tape tape;
    return build(tape, tape.constant(z)).value().item();
  }
};

/// Projected Adam on the latents; returns the loss before the final step.
inline double latent_descent(nn::ParameterSet& latents, nn::AdamState& adam, const LatentObjective& objective,
                             std::size_t steps, double lr, double lo, double hi, std::string_view label,
                             std::size_t epoch = 0) {
  double last = 0.0;
  for (std::size_t step = 0; step < steps; ++step) {
    try {
      ad::Tape tape;
      ad::Var z = tape.variable(latents[0].value);
      ad::Var loss = objective.build(tape, z);
      tape.backward(loss);
      latents[0].grad = z.grad();
      nn::adam_step(latents, adam, lr);
      nn::zero_grads(latents);
      project_clip_inplace(latents[0].value, lo, hi);
      if (!latents[0].value.all_finite()) throw NumericalError("non-finite latent update");
      last = loss.value().item();
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(label) + " diverged at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step) + ": " + e.what());
    }
  }
  return last;
}

}  // namespace detail

/// Surrogate applied to the sources of one observation ([S x M]).
inline ad::Var measure_with(const Surrogate& s, const nn::Bound& bound, ad::Var sources_j, const ImageShape& image) {
  if (std::holds_alternative<ConvSurrogate>(s)) return surrogate_forward(s, bound, ad::reshape(sources_j, image.shape()));
  return surrogate_forward(s, bound, sources_j);
}

namespace detail {

inline void check_observations(const SolverConfig& cfg, const GanModel& prior, std::span<const Tensor> y_obs,
                               SurrogateFamily family) {
  if (y_obs.empty()) throw std::invalid_argument("solve: need at least one observation");
  const ImageShape image = prior.generator.image();
  const Shape& first = y_obs.front().shape();
  for (const Tensor& y : y_obs) {
    if (y.shape() != first) {
      throw ShapeError("solve: observations differ in shape (" + to_string(first) + " vs " + to_string(y.shape()) + ")");
    }
  }
  if (family == SurrogateFamily::conv) {
    if (cfg.sources != 1) throw std::invalid_argument("solve: the convolutional surrogate handles S = 1 only");
    if (first != image.shape()) {
      throw ShapeError("solve: convolutional surrogate needs observations shaped like generator output " +
                       to_string(image.shape()) + ", got " + to_string(first));
    }
  } else if (first.size() != 2 || first[1] != image.size()) {
    throw ShapeError("solve: mixing surrogate needs observations [N_obs x " + std::to_string(image.size()) + "], got " +
                     to_string(first));
  }
}

inline LatentObjective latent_objective(const SolverState& state, const SolverConfig& cfg, const GanModel& prior,
                                        std::span<const Tensor> y_obs) {
  const ImageShape image = prior.generator.image();
  const Surrogate* surrogate = &state.surrogate;
  return {&prior, y_obs, cfg.sources, cfg.alpha, cfg.loss_norm, [surrogate, image](ad::Tape& tape) -> MeasureFn {
            nn::Bound frozen = surrogate_network(*surrogate).bind(tape, false);
            return [surrogate, image, frozen = std::move(frozen)](ad::Var x, std::size_t) {
              return measure_with(*surrogate, frozen, x, image);
            };
          }};
}

}  // namespace detail

/// Fresh state: latents from `rng` first, then surrogate weights.
inline SolverState init_state(const SolverConfig& cfg, const GanModel& prior, std::span<const Tensor> y_obs,
                              SurrogateFamily family, Rng& rng, const ConvSurrogateOptions& conv_opt = {}) {
  cfg.validate();
  detail::check_observations(cfg, prior, y_obs, family);
  SolverState state;
  state.latents.add("z", init_latents(y_obs.size(), cfg.sources, prior.generator.latent_dim(), rng));
  if (family == SurrogateFamily::conv) {
    state.surrogate = build_conv_surrogate(prior.generator.image().channels, rng, conv_opt);
  } else {
    state.surrogate = build_mix_surrogate(cfg.sources, y_obs.front().dim(0), rng);
  }
  return state;
}

/// Current value of the objective.
inline double evaluate_loss(const SolverState& state, const SolverConfig& cfg, const GanModel& prior,
                            std::span<const Tensor> y_obs) {
  return detail::latent_objective(state, cfg, prior, y_obs).value(state.z());
}

/// T1 Adam steps on the surrogate parameters; latents untouched.
inline void surrogate_phase(SolverState& state, const SolverConfig& cfg, const GanModel& prior,
                            std::span<const Tensor> y_obs, std::size_t epoch = 0) {
  if (cfg.surrogate_steps == 0) return;
  const ImageShape image = prior.generator.image();
  const Tensor sources = detail::generate_values(prior.generator, state.z());
  double perceptual = 0.0;
  if (cfg.alpha != 0.0) {
    ad::Tape tape;
    perceptual = perceptual_loss(tape, prior.discriminator, tape.constant(sources)).value().item();
  }
  nn::Network& net = surrogate_network(state.surrogate);
  for (std::size_t step = 0; step < cfg.surrogate_steps; ++step) {
    try {
      ad::Tape tape;
      ad::Var all = tape.constant(sources);
      const nn::Bound bound = net.bind(tape, true);
      ad::Var loss;
      for (std::size_t j = 0; j < y_obs.size(); ++j) {
        ad::Var est = measure_with(state.surrogate, bound, ad::slice_rows(all, j * cfg.sources, cfg.sources), image);
        ad::Var term = norm_of(ad::sub(est, tape.constant(y_obs[j])), cfg.loss_norm);
        loss = j == 0 ? term : ad::add(loss, term);
      }
      if (cfg.alpha != 0.0) loss = ad::add_scalar(loss, cfg.alpha * perceptual);
      tape.backward(loss);
      net.accumulate_grads(bound);
      nn::adam_step(net.params(), state.theta_adam, cfg.lr_theta);
      nn::zero_grads(net.params());
    } catch (const NumericalError& e) {
      throw NumericalError("surrogate phase diverged at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step) + ": " + e.what());
    }
  }
}

/// T2 projected Adam steps on the latents; surrogate untouched.
inline void latent_phase(SolverState& state, const SolverConfig& cfg, const GanModel& prior,
                         std::span<const Tensor> y_obs, std::size_t epoch = 0) {
  if (cfg.latent_steps == 0) return;
  const auto objective = detail::latent_objective(state, cfg, prior, y_obs);
  detail::latent_descent(state.latents, state.z_adam, objective, cfg.latent_steps, cfg.lr_z, cfg.clip_lo, cfg.clip_hi,
                         "latent phase", epoch);
}

/// G(z) for every observation, each [S x C x H x W].
inline std::vector<Tensor> recovered_sources(const Generator& gen, const Tensor& z) {
  const std::size_t n = z.dim(0), s = z.dim(1);
  const Tensor all = detail::generate_values(gen, z);
  const ImageShape image = gen.image();
  std::vector<Tensor> out;
  for (std::size_t j = 0; j < n; ++j) {
    Tensor x(Shape{s, image.channels, image.height, image.width});
    std::copy(all.data().begin() + static_cast<std::ptrdiff_t>(j * s * image.size()),
              all.data().begin() + static_cast<std::ptrdiff_t>((j + 1) * s * image.size()), x.data().begin());
    out.push_back(std::move(x));
  }
  return out;
}

/// Runs the outer loop on an existing state.
inline RecoveryResult run_solver(SolverState& state, const SolverConfig& cfg, const GanModel& prior,
                                 std::span<const Tensor> y_obs, std::uint64_t seed = 0) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();
  RecoveryResult result;
  result.config = cfg;
  result.seed = seed;
  result.initial_loss = evaluate_loss(state, cfg, prior, y_obs);
  if (!std::isfinite(result.initial_loss)) throw NumericalError("solve: initial loss is not finite");

  std::size_t stalled = 0;
  double previous = result.initial_loss;
  for (std::size_t epoch = 0; epoch < cfg.outer_epochs; ++epoch) {
    EpochLoss entry;
    surrogate_phase(state, cfg, prior, y_obs, epoch);
    entry.after_surrogate = evaluate_loss(state, cfg, prior, y_obs);
    latent_phase(state, cfg, prior, y_obs, epoch);
    entry.after_latent = evaluate_loss(state, cfg, prior, y_obs);
    if (!std::isfinite(entry.after_surrogate) || !std::isfinite(entry.after_latent)) {
      throw NumericalError("solve: non-finite loss at epoch " + std::to_string(epoch));
    }
    state.loss_history.push_back(entry);
    if (cfg.early_stop) {
      const double change = std::abs(previous - entry.after_latent) / std::max(std::abs(previous), 1e-12);
      stalled = change < cfg.early_stop_tol ? stalled + 1 : 0;
      if (stalled >= cfg.early_stop_patience) break;
    }
    previous = entry.after_latent;
  }

  result.final_loss = state.loss_history.empty() ? result.initial_loss : state.loss_history.back().after_latent;
  result.loss_history = state.loss_history;
  result.latents = state.z();
  result.sources = recovered_sources(prior.generator, state.z());
  result.surrogate = state.surrogate;
  result.runtime_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  return result;
}

/// Full blind recovery from observations alone.
inline RecoveryResult solve(const SolverConfig& cfg, const GanModel& prior, std::span<const Tensor> y_obs,
                            SurrogateFamily family, std::uint64_t seed, const ConvSurrogateOptions& conv_opt = {}) {
  Rng rng(seed);
  SolverState state = init_state(cfg, prior, y_obs, family, rng, conv_opt);
  return run_solver(state, cfg, prior, y_obs, seed);
}

// ------------------------------------------------------------ serialization

inline std::vector<std::uint8_t> encode_surrogate(const Surrogate& s) {
  const nn::Network* nets[] = {&surrogate_network(s)};
  return checkpoint::encode(0, nets);
}

inline Surrogate decode_surrogate(std::span<const std::uint8_t> bytes, const std::string& origin) {
  const checkpoint::Decoded d = checkpoint::decode(bytes, origin);
  if (d.layers.size() != 2) throw std::runtime_error("surrogate '" + origin + "' must have exactly two layers");
  nn::Network net = checkpoint::slice(d, 0, 2);
  const nn::LayerSpec& first = d.layers[0];
  if (first.kind == nn::LayerKind::conv2d) {
    return ConvSurrogate(std::move(net), first.dims[1], first.activation == nn::Activation::relu);
  }
  return MixSurrogate(std::move(net), first.dims[1], d.layers[1].dims[0]);
}

/// manifest.json (caller-supplied fields plus shape info), sources.f32, and optionally surrogate.bin.
inline void write_recovery(const std::filesystem::path& dir, const std::vector<Tensor>& sources, io::json manifest,
                           const Surrogate* surrogate = nullptr) {
  if (sources.empty()) throw std::invalid_argument("write_recovery: no sources");
  manifest["N"] = sources.size();
  manifest["sources_shape"] = io::shape_json(sources.front().shape());
  io::write_json(dir / "manifest.json", manifest);
  io::write_tensors(dir / "sources.f32", sources);
  if (surrogate) checkpoint::write_file(dir / "surrogate.bin", encode_surrogate(*surrogate));
}

inline io::json loss_history_json(const std::vector<EpochLoss>& history) {
  io::json arr = io::json::array();
  for (const auto& e : history) arr.push_back({{"after_surrogate", e.after_surrogate}, {"after_latent", e.after_latent}});
  return arr;
}

inline void save_result(const std::filesystem::path& dir, const RecoveryResult& r, io::json extra = io::json::object()) {
  io::json m;
  m["method"] = "solve";
  m["config"] = to_json(r.config);
  m["seed"] = r.seed;
  m["initial_loss"] = r.initial_loss;
  m["final_loss"] = r.final_loss;
  m["loss_history"] = loss_history_json(r.loss_history);
  for (auto& [k, v] : extra.items()) m[k] = v;
  write_recovery(dir, r.sources, std::move(m), &r.surrogate);
}

struct LoadedRecovery {
  io::json manifest;
  std::vector<Tensor> sources;
  std::optional<Surrogate> surrogate;
};

inline LoadedRecovery load_recovery(const std::filesystem::path& dir) {
  LoadedRecovery out;
  out.manifest = io::read_json(dir / "manifest.json");
  try {
    out.sources = io::read_tensors(dir / "sources.f32", out.manifest.at("N").get<std::size_t>(),
                                   io::shape_from_json(out.manifest.at("sources_shape")));
  } catch (const io::json::exception& e) {
    throw std::runtime_error("bad result manifest in '" + dir.string() + "': " + e.what());
  }
  if (std::filesystem::exists(dir / "surrogate.bin")) {
    out.surrogate = decode_surrogate(checkpoint::read_file(dir / "surrogate.bin"), (dir / "surrogate.bin").string());
  }
  return out;
}

}  // namespace blindinv
