#pragma once

// Config parsing and end-to-end runs: data, observations, solver and
// baselines, per-method outputs and the metrics CSV.

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "baselines.hpp"
#include "data.hpp"
#include "gan.hpp"
#include "io.hpp"
#include "measurement.hpp"
#include "metrics.hpp"
#include "rng.hpp"
#include "solver.hpp"
#include "surrogate.hpp"

namespace blindinv {

/// Bad or incomplete configuration (usage error).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Missing or unreadable input.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Scenario { deblur, edgemap, bss };

inline std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::deblur: return "deblur";
    case Scenario::edgemap: return "edgemap";
    case Scenario::bss: return "bss";
  }
  return "?";
}

inline Scenario scenario_from_string(const std::string& s) {
  if (s == "deblur") return Scenario::deblur;
  if (s == "edgemap") return Scenario::edgemap;
  if (s == "bss") return Scenario::bss;
  throw ConfigError("unknown scenario '" + s + "' (expected deblur, edgemap or bss)");
}

inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> m{"solve",          "pgd_no_forward", "pgd_known_forward",
                                          "naive_additive", "wiener",         "fastica"};
  return m;
}

struct ExperimentConfig {
  Scenario scenario = Scenario::deblur;
  std::uint64_t seed = 0;
  std::string dataset = "synthetic";  // "synthetic" or an IDX image file
  std::size_t dataset_size = 4000;    // training images drawn for train-gan
  std::size_t item_offset = 0;        // first dataset item used for observations
  bool downsample = true;             // IDX: pad and pool 28x28 to 16x16
  std::size_t image_size = 16;        // synthetic images
  std::size_t channels = 1;
  std::string checkpoint;
  std::string output;
  std::string observations;  // optional directory written by `observe`
  std::size_t n = 25;
  std::size_t s = 1;
  std::size_t n_obs = 4;
  std::size_t blur_size = 7;
  double blur_sigma = 1.5;
  double noise = 0.0;
  SolverConfig solver;
  std::size_t surrogate_hidden = 16;
  std::size_t surrogate_kernel = 5;
  std::size_t gan_epochs = 40;
  std::size_t gan_batch = 64;
  double gan_lr = 1e-3;
  double wiener_k = 1e-2;
  std::vector<std::string> methods{"solve"};
  std::size_t trials = 1;
  bool parallel = false;
  bool record_runtime = false;

  ConvSurrogateOptions conv_options() const {
    ConvSurrogateOptions o;
    o.hidden = surrogate_hidden;
    o.kernel = surrogate_kernel;
    return o;
  }
};

namespace detail {

template <class T>
T config_value(const io::json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const io::json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

inline bool is_count(const io::json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

}  // namespace detail

/// Flat JSON object; unknown keys are rejected.
inline ExperimentConfig parse_config(const io::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig c;
  bool has_scenario = false, has_seed = false, has_s = false;
  using Setter = std::function<void(const io::json&, const std::string&)>;
  const auto size = [](std::size_t& dst) -> Setter {
    return [&dst](const io::json& v, const std::string& k) {
      if (!detail::is_count(v)) throw ConfigError("config key '" + k + "' must be a non-negative integer");
      dst = v.get<std::size_t>();
    };
  };
  const auto real = [](double& dst) -> Setter {
    return [&dst](const io::json& v, const std::string& k) {
      if (!v.is_number()) throw ConfigError("config key '" + k + "' must be a number");
      dst = v.get<double>();
    };
  };
  const auto text = [](std::string& dst) -> Setter {
    return [&dst](const io::json& v, const std::string& k) { dst = detail::config_value<std::string>(v, k); };
  };
  const auto flag = [](bool& dst) -> Setter {
    return [&dst](const io::json& v, const std::string& k) { dst = detail::config_value<bool>(v, k); };
  };
  SolverConfig& sc = c.solver;
  const std::map<std::string, Setter> setters{
      {"scenario",
       [&](const io::json& v, const std::string& k) {
         c.scenario = scenario_from_string(detail::config_value<std::string>(v, k));
         has_scenario = true;
       }},
      {"seed",
       [&](const io::json& v, const std::string& k) {
         if (!detail::is_count(v)) throw ConfigError("config key '" + k + "' must be a non-negative integer");
         c.seed = v.get<std::uint64_t>();
         has_seed = true;
       }},
      {"dataset", text(c.dataset)},
      {"dataset_size", size(c.dataset_size)},
      {"item_offset", size(c.item_offset)},
      {"downsample", flag(c.downsample)},
      {"image_size", size(c.image_size)},
      {"channels", size(c.channels)},
      {"checkpoint", text(c.checkpoint)},
      {"output", text(c.output)},
      {"observations", text(c.observations)},
      {"N", size(c.n)},
      {"S",
       [&](const io::json& v, const std::string& k) {
         size(c.s)(v, k);
         has_s = true;
       }},
      {"N_obs", size(c.n_obs)},
      {"blur_size", size(c.blur_size)},
      {"blur_sigma", real(c.blur_sigma)},
      {"noise", real(c.noise)},
      {"T", size(sc.outer_epochs)},
      {"T1", size(sc.surrogate_steps)},
      {"T2", size(sc.latent_steps)},
      {"lr_theta", real(sc.lr_theta)},
      {"lr_z", real(sc.lr_z)},
      {"alpha", real(sc.alpha)},
      {"clip_lo", real(sc.clip_lo)},
      {"clip_hi", real(sc.clip_hi)},
      {"loss_norm",
       [&](const io::json& v, const std::string& k) {
         try {
           sc.loss_norm = loss_norm_from_string(detail::config_value<std::string>(v, k));
         } catch (const ConfigError&) {
           throw;
         } catch (const std::exception& e) {
           throw ConfigError(e.what());
         }
       }},
      {"early_stop", flag(sc.early_stop)},
      {"surrogate_hidden", size(c.surrogate_hidden)},
      {"surrogate_kernel", size(c.surrogate_kernel)},
      {"gan_epochs", size(c.gan_epochs)},
      {"gan_batch", size(c.gan_batch)},
      {"gan_lr", real(c.gan_lr)},
      {"wiener_k", real(c.wiener_k)},
      {"methods",
       [&](const io::json& v, const std::string& k) {
         c.methods = detail::config_value<std::vector<std::string>>(v, k);
       }},
      {"trials", size(c.trials)},
      {"parallel", flag(c.parallel)},
      {"record_runtime", flag(c.record_runtime)},
  };
  for (const auto& [key, value] : j.items()) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(value, key);
  }

  if (!has_scenario) throw ConfigError("config is missing 'scenario'");
  if (!has_seed) throw ConfigError("config is missing 'seed'");
  if (c.scenario == Scenario::bss) {
    if (!has_s) throw ConfigError("bss scenario requires 'S'");
    if (c.s == 0 || c.s > kMaxMatchedSources) throw ConfigError("'S' must be between 1 and 5");
    if (c.n_obs == 0) throw ConfigError("'N_obs' must be positive");
  } else if (c.s != 1) {
    throw ConfigError(to_string(c.scenario) + " scenario needs S = 1");
  }
  c.solver.sources = c.s;
  if (c.n == 0) throw ConfigError("'N' must be positive");
  if (c.trials == 0) throw ConfigError("'trials' must be positive");
  if (c.blur_size == 0 || !(c.blur_sigma > 0.0)) throw ConfigError("blur_size and blur_sigma must be positive");
  if (c.noise < 0.0) throw ConfigError("'noise' must be non-negative");
  if (c.wiener_k < 0.0) throw ConfigError("'wiener_k' must be non-negative");
  if (c.image_size == 0 || c.channels == 0) throw ConfigError("image_size and channels must be positive");
  for (const auto& m : c.methods) {
    if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end()) {
      throw ConfigError("unknown method '" + m + "'");
    }
  }
  try {
    c.solver.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("config file '" + path.string() + "' not found");
  io::json j;
  try {
    j = io::read_json(path);
  } catch (const std::runtime_error& e) {
    throw ConfigError(e.what());
  }
  return parse_config(j);
}

/// Worker cap: BLINDINV_THREADS if set to a positive integer, otherwise the hardware count.
inline std::size_t thread_cap() {
  if (const char* env = std::getenv("BLINDINV_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// ------------------------------------------------------------------ data

inline GanModel require_checkpoint(const ExperimentConfig& cfg) {
  if (cfg.checkpoint.empty()) throw ConfigError("config is missing 'checkpoint'");
  if (!std::filesystem::exists(cfg.checkpoint)) throw IoError("checkpoint '" + cfg.checkpoint + "' not found");
  try {
    return load_checkpoint(cfg.checkpoint);
  } catch (const std::exception& e) {
    throw IoError(e.what());
  }
}

inline std::filesystem::path require_output(const ExperimentConfig& cfg) {
  if (cfg.output.empty()) throw ConfigError("config is missing 'output'");
  return cfg.output;
}

/// `count` images starting at `offset` (IDX), or freshly drawn synthetic faces.
inline std::vector<Tensor> load_images(const ExperimentConfig& cfg, std::size_t count, std::size_t offset, Rng& rng,
                                       const ImageShape& image) {
  if (cfg.dataset == "synthetic") return synthetic_faces(count, image, rng);
  if (!std::filesystem::exists(cfg.dataset)) throw IoError("dataset '" + cfg.dataset + "' not found");
  std::vector<Tensor> all;
  try {
    all = load_idx(cfg.dataset, cfg.downsample, offset + count);
  } catch (const std::exception& e) {
    throw IoError(e.what());
  }
  if (all.size() < offset + count) {
    throw ConfigError("dataset '" + cfg.dataset + "' has " + std::to_string(all.size()) + " images, need " +
                      std::to_string(offset + count));
  }
  std::vector<Tensor> out;
  for (std::size_t i = offset; i < offset + count; ++i) {
    if (all[i].size() != image.size()) {
      throw ConfigError("dataset images are " + to_string(all[i].shape()) + ", model expects " + to_string(image.shape()));
    }
    out.push_back(all[i].reshaped(image.shape()));
  }
  return out;
}

inline ImageShape synthetic_shape(const ExperimentConfig& cfg) { return {cfg.channels, cfg.image_size, cfg.image_size}; }

inline Operator scenario_operator(const ExperimentConfig& cfg, Rng& rng) {
  switch (cfg.scenario) {
    case Scenario::deblur: return KernelOperator{"blur", gaussian_kernel(cfg.blur_size, cfg.blur_sigma)};
    case Scenario::edgemap: return KernelOperator{"edge", edge_kernel()};
    case Scenario::bss: return MixingOperator{sample_mixing(cfg.s, cfg.n_obs, rng)};
  }
  throw ConfigError("unknown scenario");
}

inline std::uint64_t data_seed(std::uint64_t trial) { return splitmix64(trial ^ 0x6f62736572766564ULL); }

/// Ground-truth sources and observations for one trial. Kernel scenarios use
/// one image per item; bss stacks S images into [S x pixels].
inline ObservationSet synthesize_observations(const ExperimentConfig& cfg, const ImageShape& image,
                                              std::uint64_t trial, std::size_t trial_index) {
  Rng rng(data_seed(trial));
  const std::size_t per_item = cfg.scenario == Scenario::bss ? cfg.s : 1;
  const std::size_t count = cfg.n * per_item;
  const std::vector<Tensor> images = load_images(cfg, count, cfg.item_offset + trial_index * count, rng, image);
  std::vector<Tensor> sources;
  for (std::size_t j = 0; j < cfg.n; ++j) {
    if (per_item == 1) {
      sources.push_back(images[j]);
      continue;
    }
    Tensor x(Shape{per_item, image.size()});
    for (std::size_t i = 0; i < per_item; ++i) {
      std::copy(images[j * per_item + i].data().begin(), images[j * per_item + i].data().end(),
                x.data().begin() + static_cast<std::ptrdiff_t>(i * image.size()));
    }
    sources.push_back(std::move(x));
  }
  const Operator op = scenario_operator(cfg, rng);
  return make_observations(sources, op, cfg.n, rng, cfg.noise, trial);
}

// --------------------------------------------------------------- methods

struct MethodOutput {
  std::string method;
  std::vector<Tensor> estimates;  // shaped like the ground-truth sources
  std::optional<double> final_loss;
  double runtime_ms = 0.0;
  std::optional<RecoveryResult> recovery;  // solve only
};

namespace detail {

inline std::vector<Tensor> reshape_all(const std::vector<Tensor>& xs, const Shape& shape) {
  std::vector<Tensor> out;
  for (const Tensor& x : xs) out.push_back(x.reshaped(shape));
  return out;
}

inline Shape truth_shape(const ExperimentConfig& cfg, const ImageShape& image) {
  return cfg.scenario == Scenario::bss ? Shape{cfg.s, image.size()} : image.shape();
}

inline void require_scenario(bool ok, const std::string& method, const ExperimentConfig& cfg) {
  if (!ok) throw ConfigError("method '" + method + "' is not defined for the " + to_string(cfg.scenario) + " scenario");
}

inline double elapsed_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

inline MethodOutput run_method(const std::string& method, const ExperimentConfig& cfg, const GanModel& prior,
                               const ObservationSet& obs, std::uint64_t seed) {
  const ImageShape image = prior.generator.image();
  const Shape shape = detail::truth_shape(cfg, image);
  const bool kernel_scenario = cfg.scenario != Scenario::bss;
  const BaselineOptions baseline = BaselineOptions::matching(cfg.solver);
  MethodOutput out;
  out.method = method;

  if (method == "solve") {
    const auto family = kernel_scenario ? SurrogateFamily::conv : SurrogateFamily::mix;
    RecoveryResult r = solve(cfg.solver, prior, obs.observations, family, seed, cfg.conv_options());
    out.estimates = detail::reshape_all(r.sources, shape);
    out.final_loss = r.final_loss;
    out.runtime_ms = r.runtime_ms;
    out.recovery = std::move(r);
    return out;
  }

  BaselineResult b;
  if (method == "pgd_no_forward") {
    detail::require_scenario(kernel_scenario, method, cfg);
    b = pgd_no_forward(prior, obs.observations, baseline, seed);
  } else if (method == "pgd_known_forward") {
    b = pgd_known_forward(prior, obs.observations, obs.op, baseline, seed);
  } else if (method == "naive_additive") {
    detail::require_scenario(!kernel_scenario, method, cfg);
    b = naive_additive(prior, obs.observations, cfg.s, baseline, seed);
  } else if (method == "wiener") {
    const auto* k = std::get_if<KernelOperator>(&obs.op);
    detail::require_scenario(kernel_scenario && k, method, cfg);
    const auto t0 = std::chrono::steady_clock::now();
    for (const Tensor& y : obs.observations) out.estimates.push_back(wiener_deconvolve(y, k->kernel, cfg.wiener_k).reshaped(shape));
    out.runtime_ms = detail::elapsed_since(t0);
    return out;
  } else if (method == "fastica") {
    detail::require_scenario(!kernel_scenario, method, cfg);
    const auto t0 = std::chrono::steady_clock::now();
    IcaOptions opt;
    opt.seed = seed;
    for (const Tensor& y : obs.observations) out.estimates.push_back(fastica(y, cfg.s, opt).sources);
    out.runtime_ms = detail::elapsed_since(t0);
    return out;
  } else {
    throw ConfigError("unknown method '" + method + "'");
  }
  out.estimates = detail::reshape_all(b.sources, shape);
  out.final_loss = b.final_loss;
  out.runtime_ms = b.runtime_ms;
  return out;
}

// --------------------------------------------------------------- metrics

struct MetricRow {
  std::string scenario;
  std::size_t item = 0;
  std::string method;
  double psnr = 0.0;
  double mse = 0.0;
  double l1 = 0.0;
  std::optional<double> final_loss;
  std::uint64_t seed = 0;
  std::optional<double> runtime_ms;
};

inline constexpr const char* kCsvHeader = "scenario,item,method,psnr,mse,l1,final_loss,seed,runtime_ms";

inline std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string csv_line(const MetricRow& r) {
  std::ostringstream os;
  os << r.scenario << ',' << r.item << ',' << r.method << ',' << format_number(r.psnr) << ',' << format_number(r.mse)
     << ',' << format_number(r.l1) << ',' << (r.final_loss ? format_number(*r.final_loss) : "") << ',' << r.seed << ','
     << (r.runtime_ms ? format_number(*r.runtime_ms) : "");
  return os.str();
}

inline std::vector<Tensor> split_rows(const Tensor& t) {
  const std::size_t rows = t.dim(0), cols = t.size() / rows;
  std::vector<Tensor> out;
  for (std::size_t r = 0; r < rows; ++r) {
    Tensor row(Shape{cols});
    std::copy(t.data().begin() + static_cast<std::ptrdiff_t>(r * cols),
              t.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * cols), row.data().begin());
    out.push_back(std::move(row));
  }
  return out;
}

/// Image scenarios compare pixels directly. bss compares standardized
/// sources after the best permutation; fastica may also flip signs.
inline std::vector<MetricRow> score_method(Scenario scenario, const std::string& method,
                                           const std::vector<Tensor>& estimates, const std::vector<Tensor>& truth,
                                           std::optional<double> final_loss, std::uint64_t seed,
                                           std::optional<double> runtime_ms) {
  if (estimates.size() != truth.size()) throw std::invalid_argument("score_method: estimate and truth counts differ");
  std::vector<MetricRow> rows;
  for (std::size_t j = 0; j < truth.size(); ++j) {
    MetricRow r{to_string(scenario), j, method, 0.0, 0.0, 0.0, final_loss, seed, runtime_ms};
    if (scenario != Scenario::bss) {
      r.psnr = psnr(estimates[j], truth[j]);
      r.mse = mse(estimates[j], truth[j]);
      r.l1 = mean_abs_error(estimates[j], truth[j]);
    } else {
      const auto est = split_rows(estimates[j]);
      const auto tru = split_rows(truth[j]);
      const SourceMatch m = match_sources(est, tru, method == "fastica");
      for (std::size_t i = 0; i < tru.size(); ++i) {
        Tensor e = standardized(est[m.permutation[i]]);
        if (m.flipped[i]) {
          for (double& v : e.data()) v = -v;
        }
        const Tensor t = standardized(tru[i]);
        r.psnr += psnr(e, t) / static_cast<double>(tru.size());
        r.l1 += mean_abs_error(e, t) / static_cast<double>(tru.size());
      }
      r.mse = m.mean_score();
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

inline void write_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << kCsvHeader << '\n';
  for (const auto& r : rows) out << csv_line(r) << '\n';
}

// ---------------------------------------------------------------- output

inline void save_item_images(const std::filesystem::path& dir, const std::vector<Tensor>& items, const ImageShape& image) {
  const std::size_t plane = image.height * image.width;
  for (std::size_t j = 0; j < items.size(); ++j) {
    const Tensor& t = items[j];
    save_pgm(dir / ("item_" + std::to_string(j) + ".pgm"), t.reshaped({t.size() / plane, image.height, image.width}));
  }
}

inline void write_method_output(const std::filesystem::path& dir, const ExperimentConfig& cfg, const MethodOutput& out,
                                const ImageShape& image, std::uint64_t seed) {
  io::json m;
  m["method"] = out.method;
  m["scenario"] = to_string(cfg.scenario);
  m["seed"] = seed;
  m["observations"] = "../observations";
  m["runtime_ms"] = out.runtime_ms;
  if (out.final_loss) m["final_loss"] = *out.final_loss;
  const Surrogate* surrogate = nullptr;
  if (out.recovery) {
    m["config"] = to_json(out.recovery->config);
    m["initial_loss"] = out.recovery->initial_loss;
    m["loss_history"] = loss_history_json(out.recovery->loss_history);
    surrogate = &out.recovery->surrogate;
  } else if (out.method != "wiener" && out.method != "fastica") {
    m["config"] = to_json(cfg.solver);
  }
  write_recovery(dir, out.estimates, std::move(m), surrogate);
  save_item_images(dir / "images", out.estimates, image);
}

// ------------------------------------------------------------- commands

struct TrainGanResult {
  TrainingLog log;
  std::filesystem::path checkpoint;
};

/// Trains the prior on the configured dataset and writes the checkpoint
/// plus `training_log.json` under the output directory.
inline TrainGanResult train_gan_command(const ExperimentConfig& cfg) {
  if (cfg.checkpoint.empty()) throw ConfigError("config is missing 'checkpoint'");
  const std::filesystem::path out_dir = require_output(cfg);
  GanConfig gc;
  gc.image = synthetic_shape(cfg);
  Rng data_rng(data_seed(cfg.seed ^ 0x747261696eULL));
  std::vector<Tensor> images;
  if (cfg.dataset == "synthetic") {
    images = synthetic_faces(cfg.dataset_size, gc.image, data_rng);
  } else {
    if (!std::filesystem::exists(cfg.dataset)) throw IoError("dataset '" + cfg.dataset + "' not found");
    try {
      images = load_idx(cfg.dataset, cfg.downsample, cfg.dataset_size);
    } catch (const std::exception& e) {
      throw IoError(e.what());
    }
    if (images.empty()) throw ConfigError("dataset '" + cfg.dataset + "' is empty");
    const Tensor& first = images.front();
    gc.image = {1, first.dim(1), first.dim(2)};
  }
  Rng rng(cfg.seed);
  Generator gen = build_generator(gc, rng);
  Discriminator disc = build_discriminator(gc, rng);
  GanTrainOptions opt;
  opt.epochs = cfg.gan_epochs;
  opt.batch = cfg.gan_batch;
  opt.lr_g = opt.lr_d = cfg.gan_lr;
  TrainGanResult result{gan_train(gen, disc, images, opt, rng), cfg.checkpoint};
  save_checkpoint(cfg.checkpoint, gen, disc);
  io::json log;
  log["epochs"] = opt.epochs;
  log["images"] = images.size();
  log["discriminator_loss"] = result.log.discriminator_loss;
  log["generator_loss"] = result.log.generator_loss;
  io::write_json(out_dir / "training_log.json", log);
  return result;
}

inline ImageShape observation_image(const ExperimentConfig& cfg) {
  if (!cfg.checkpoint.empty()) return require_checkpoint(cfg).generator.image();
  return synthetic_shape(cfg);
}

inline std::filesystem::path trial_dir(const std::filesystem::path& out, std::size_t t) {
  return out / ("trial_" + std::to_string(t));
}

/// Writes observations for every trial under <output>/trial_<k>/observations.
inline std::vector<ObservationSet> observe_command(const ExperimentConfig& cfg) {
  const std::filesystem::path out = require_output(cfg);
  const ImageShape image = observation_image(cfg);
  std::vector<ObservationSet> sets;
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    ObservationSet obs = synthesize_observations(cfg, image, trial_seed(cfg.seed, t), t);
    save_observations(trial_dir(out, t) / "observations", obs);
    sets.push_back(std::move(obs));
  }
  return sets;
}

/// Runs `methods` on every trial and writes <output>/metrics.csv. Trials are
/// independent (seed_t = splitmix64(seed + t)) and may run concurrently;
/// rows are always emitted in trial order.
inline std::vector<MetricRow> run_experiment(const ExperimentConfig& cfg, const std::vector<std::string>& methods,
                                             bool parallel = false) {
  const std::filesystem::path out = require_output(cfg);
  const GanModel prior = require_checkpoint(cfg);
  const ImageShape image = prior.generator.image();
  if (!cfg.observations.empty() && cfg.trials != 1) throw ConfigError("'observations' can only be used with one trial");
  if (methods.empty()) throw ConfigError("no methods to run");

  std::vector<std::vector<MetricRow>> per_trial(cfg.trials);
  const auto run_trial = [&](std::size_t t) {
    const std::uint64_t seed = trial_seed(cfg.seed, t);
    const std::filesystem::path dir = trial_dir(out, t);
    ObservationSet obs;
    if (!cfg.observations.empty()) {
      if (!std::filesystem::exists(std::filesystem::path(cfg.observations) / "manifest.json")) {
        throw IoError("observations '" + cfg.observations + "' not found");
      }
      obs = load_observations(cfg.observations);
      if (obs.sources.empty()) throw ConfigError("observations '" + cfg.observations + "' carry no ground truth");
    } else {
      obs = synthesize_observations(cfg, image, seed, t);
    }
    save_observations(dir / "observations", obs);
    for (const std::string& method : methods) {
      MethodOutput m = run_method(method, cfg, prior, obs, seed);
      write_method_output(dir / method, cfg, m, image, seed);
      auto rows = score_method(cfg.scenario, method, m.estimates, obs.sources, m.final_loss, seed,
                               cfg.record_runtime ? std::optional<double>(m.runtime_ms) : std::nullopt);
      for (auto& r : rows) r.item += t * cfg.n;
      per_trial[t].insert(per_trial[t].end(), rows.begin(), rows.end());
    }
  };

  const std::size_t workers = (parallel || cfg.parallel) ? std::min(cfg.trials, thread_cap()) : 1;
  if (workers <= 1) {
    for (std::size_t t = 0; t < cfg.trials; ++t) run_trial(t);
  } else {
    std::vector<std::exception_ptr> errors(cfg.trials);
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t t = next++; t < cfg.trials; t = next++) {
          try {
            run_trial(t);
          } catch (...) {
            errors[t] = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  std::vector<MetricRow> rows;
  for (auto& v : per_trial) rows.insert(rows.end(), v.begin(), v.end());
  write_csv(out / "metrics.csv", rows);
  return rows;
}

/// Scores a method output directory against the ground truth of its observations.
inline std::vector<MetricRow> evaluate_command(const std::filesystem::path& result_dir) {
  if (!std::filesystem::exists(result_dir / "manifest.json")) {
    throw IoError("result directory '" + result_dir.string() + "' has no manifest.json");
  }
  LoadedRecovery r;
  io::json m;
  std::filesystem::path obs_dir;
  try {
    r = load_recovery(result_dir);
    m = r.manifest;
    obs_dir = result_dir / m.at("observations").get<std::string>();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw IoError(e.what());
  }
  const ObservationSet obs = load_observations(obs_dir);
  if (obs.sources.empty()) throw IoError("observations in '" + obs_dir.string() + "' carry no ground truth");
  std::optional<double> final_loss;
  if (m.contains("final_loss")) final_loss = m.at("final_loss").get<double>();
  const Scenario scenario = scenario_from_string(m.at("scenario").get<std::string>());
  auto rows = score_method(scenario, m.at("method").get<std::string>(), r.sources, obs.sources, final_loss,
                           m.at("seed").get<std::uint64_t>(), std::nullopt);
  write_csv(result_dir / "metrics.csv", rows);
  return rows;
}

}  // namespace blindinv
