#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "blindinv/experiment.hpp"
#include "blindinv/gradcheck.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kIo = 3;
constexpr int kNumerical = 4;

void print_rows(const std::vector<blindinv::MetricRow>& rows) {
  std::cout << blindinv::kCsvHeader << '\n';
  for (const auto& r : rows) std::cout << blindinv::csv_line(r) << '\n';
}

int gradcheck(std::size_t trials, std::uint64_t seed, double tol) {
  bool ok = true;
  for (const auto& r : blindinv::run_gradcheck_suite(trials, seed)) {
    const bool pass = r.worst < tol;
    ok = ok && pass;
    std::printf("%-30s trials=%zu max_rel_err=%.3e %s\n", r.name.c_str(), r.trials, r.worst, pass ? "ok" : "FAIL");
  }
  return ok ? kOk : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Blind inverse problems with a GAN prior and a learned surrogate"};
  app.require_subcommand(1);

  std::string config, method, result_dir;
  bool parallel = false;

  auto* train = app.add_subcommand("train-gan", "train the image prior and write its checkpoint");
  train->add_option("config", config, "experiment config (JSON)")->required();

  auto* observe = app.add_subcommand("observe", "synthesize observations from ground-truth sources");
  observe->add_option("config", config, "experiment config (JSON)")->required();

  auto* solve = app.add_subcommand("solve", "blind recovery of sources and surrogate");
  solve->add_option("config", config, "experiment config (JSON)")->required();
  solve->add_flag("--parallel", parallel, "run independent trials concurrently");

  auto* baseline = app.add_subcommand("baseline", "run one comparison method");
  baseline->add_option("method", method, "pgd_no_forward | pgd_known_forward | naive_additive | wiener | fastica")
      ->required();
  baseline->add_option("config", config, "experiment config (JSON)")->required();
  baseline->add_flag("--parallel", parallel, "run independent trials concurrently");

  auto* run = app.add_subcommand("run", "solve plus every method listed in the config");
  run->add_option("config", config, "experiment config (JSON)")->required();
  run->add_flag("--parallel", parallel, "run independent trials concurrently");

  auto* evaluate = app.add_subcommand("evaluate", "score a method output directory");
  evaluate->add_option("result-dir", result_dir, "directory holding manifest.json and sources.f32")->required();

  std::size_t gc_trials = 100;
  std::uint64_t gc_seed = 0;
  double gc_tol = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  gc->add_option("--trials", gc_trials, "random instances per op")->capture_default_str();
  gc->add_option("--seed", gc_seed, "base seed")->capture_default_str();
  gc->add_option("--tol", gc_tol, "maximum relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gc) return gradcheck(gc_trials, gc_seed, gc_tol);
    if (*evaluate) {
      print_rows(blindinv::evaluate_command(result_dir));
      return kOk;
    }
    const blindinv::ExperimentConfig cfg = blindinv::load_config(config);
    if (*train) {
      const auto r = blindinv::train_gan_command(cfg);
      std::printf("trained %zu epochs, final D loss %.4f, G loss %.4f -> %s\n", r.log.generator_loss.size(),
                  r.log.discriminator_loss.empty() ? 0.0 : r.log.discriminator_loss.back(),
                  r.log.generator_loss.empty() ? 0.0 : r.log.generator_loss.back(), r.checkpoint.string().c_str());
    } else if (*observe) {
      const auto sets = blindinv::observe_command(cfg);
      std::printf("wrote %zu observation set(s) under %s\n", sets.size(), cfg.output.c_str());
    } else if (*solve) {
      print_rows(blindinv::run_experiment(cfg, {"solve"}, parallel));
    } else if (*baseline) {
      print_rows(blindinv::run_experiment(cfg, {method}, parallel));
    } else if (*run) {
      print_rows(blindinv::run_experiment(cfg, cfg.methods, parallel));
    }
    return kOk;
  } catch (const blindinv::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const blindinv::IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  }
}
