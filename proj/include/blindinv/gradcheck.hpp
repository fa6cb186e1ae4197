#pragma once

// Randomized finite-difference checks of every differentiable op and of a
// few end-to-end graphs. Each probe draws one random instance and returns
// the worst relative error reported by ad::grad_check.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "gan.hpp"
#include "nn.hpp"
#include "rng.hpp"
#include "solver.hpp"
#include "surrogate.hpp"
#include "tensor.hpp"

namespace blindinv {

struct GradProbe {
  std::string name;
  std::function<double(Rng&)> run;
};

struct GradCheckReport {
  std::string name;
  std::size_t trials = 0;
  double worst = 0.0;
};

namespace gradcheck_detail {

using ad::Var;

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + rng.bounded(static_cast<std::uint32_t>(hi - lo + 1));
}

// Splits a flat variable into pieces of the given shapes.
inline std::vector<Var> unpack(Var x, const std::vector<Shape>& shapes) {
  Var col = ad::reshape(x, {x.value().size(), 1});
  std::vector<Var> out;
  std::size_t offset = 0;
  for (const Shape& s : shapes) {
    const std::size_t n = shape_size(s);
    out.push_back(ad::reshape(ad::slice_rows(col, offset, n), s));
    offset += n;
  }
  return out;
}

inline std::size_t packed_size(const std::vector<Shape>& shapes) {
  std::size_t n = 0;
  for (const Shape& s : shapes) n += shape_size(s);
  return n;
}

// Scalar reduction with random weights so every output coordinate gets a distinct adjoint.
inline Var weighted(Var y, const Tensor& w) { return ad::sum(ad::mul_elem(y, y.tape().constant(w))); }

using Unary = std::function<Var(Var)>;

inline GradProbe unary(std::string name, Unary op, double lo = -1.0, double hi = 1.0, bool transposes = false) {
  return {std::move(name), [op, lo, hi, transposes](Rng& rng) {
            const Shape shape{pick(rng, 1, 4), pick(rng, 1, 5)};
            const Tensor x = random_tensor(shape, rng, lo, hi);
            const Tensor w = random_tensor(transposes ? Shape{shape[1], shape[0]} : shape, rng);
            return ad::grad_check([&](Var v) { return weighted(op(v), w); }, x);
          }};
}

using Binary = std::function<Var(Var, Var)>;

inline GradProbe binary(std::string name, Binary op, bool row_bias = false) {
  return {std::move(name), [op, row_bias](Rng& rng) {
            const Shape a{pick(rng, 1, 4), pick(rng, 1, 5)};
            const Shape b = row_bias ? Shape{a[1]} : a;
            const Tensor x = random_tensor({shape_size(a) + shape_size(b)}, rng);
            const Tensor w = random_tensor(a, rng);
            return ad::grad_check(
                [&](Var v) {
                  auto parts = unpack(v, {a, b});
                  return weighted(op(parts[0], parts[1]), w);
                },
                x);
          }};
}

inline GradProbe scalar_probe(std::string name, Unary op) {
  return {std::move(name), [op](Rng& rng) {
            const Tensor x = random_tensor({pick(rng, 1, 4), pick(rng, 1, 5)}, rng);
            return ad::grad_check(op, x);
          }};
}

// Small generator, discriminator and surrogate for composite graphs.
struct TinyModels {
  GanModel prior;
  ConvSurrogate surrogate;
  MixSurrogate mix;
};

inline TinyModels tiny_models(Rng& rng) {
  GanConfig cfg;
  cfg.latent_dim = 6;
  cfg.image = {1, 5, 5};
  cfg.generator_hidden = {8};
  cfg.discriminator_hidden = {7};
  cfg.init_std = 0.4;
  TinyModels m;
  m.prior.generator = build_generator(cfg, rng);
  m.prior.discriminator = build_discriminator(cfg, rng);
  ConvSurrogateOptions opt;
  opt.hidden = 3;
  opt.kernel = 3;
  opt.init_std = 0.4;
  m.surrogate = build_conv_surrogate(1, rng, opt);
  m.mix = build_mix_surrogate(2, 3, rng, 4, 0.4);
  return m;
}

inline nn::Bound unpack_bound(Var x, const nn::Network& net) {
  std::vector<Shape> shapes;
  for (const auto& p : net.params()) shapes.push_back(p.value.shape());
  return {unpack(x, shapes), true};
}

inline Tensor pack_params(const nn::Network& net) {
  std::vector<double> flat;
  for (const auto& p : net.params()) flat.insert(flat.end(), p.value.data().begin(), p.value.data().end());
  const std::size_t n = flat.size();
  return Tensor({n}, std::move(flat));
}

}  // namespace gradcheck_detail

inline std::vector<GradProbe> gradcheck_probes() {
  using namespace gradcheck_detail;
  std::vector<GradProbe> probes;
  probes.push_back(binary("add", [](Var a, Var b) { return ad::add(a, b); }));
  probes.push_back(binary("add_row_bias", [](Var a, Var b) { return ad::add(a, b); }, true));
  probes.push_back(binary("sub", [](Var a, Var b) { return ad::sub(a, b); }));
  probes.push_back(binary("mul_elem", [](Var a, Var b) { return ad::mul_elem(a, b); }));
  probes.push_back(unary("scalar_mul", [](Var a) { return ad::scalar_mul(a, -1.7); }));
  probes.push_back(unary("add_scalar", [](Var a) { return ad::add_scalar(a, 0.3); }));
  probes.push_back(unary("transpose", [](Var a) { return ad::transpose(a); }, -1.0, 1.0, true));
  probes.push_back(unary("relu", [](Var a) { return ad::relu(a); }));
  probes.push_back(unary("leaky_relu", [](Var a) { return ad::leaky_relu(a); }));
  probes.push_back(unary("tanh", [](Var a) { return ad::tanh(a); }, -3.0, 3.0));
  probes.push_back(unary("sigmoid", [](Var a) { return ad::sigmoid(a); }, -4.0, 4.0));
  probes.push_back(unary("abs", [](Var a) { return ad::abs_elem(a); }));
  probes.push_back(unary("log_clamped", [](Var a) { return ad::log_clamped(a); }, 0.05, 2.0));
  probes.push_back(scalar_probe("sum", [](Var a) { return ad::sum(a); }));
  probes.push_back(scalar_probe("l1", [](Var a) { return ad::l1(a); }));
  probes.push_back(scalar_probe("sum_squares", [](Var a) { return ad::sum_squares(a); }));

  probes.push_back({"reshape", [](Rng& rng) {
                      const std::size_t r = pick(rng, 1, 4), c = pick(rng, 1, 5);
                      const Tensor x = random_tensor({r, c}, rng);
                      const Tensor w = random_tensor({c, r}, rng);
                      return ad::grad_check([&](Var v) { return weighted(ad::reshape(v, {c, r}), w); }, x);
                    }});
  probes.push_back({"slice_rows", [](Rng& rng) {
                      const std::size_t r = pick(rng, 2, 6), c = pick(rng, 1, 4);
                      const std::size_t start = pick(rng, 0, r - 1), count = pick(rng, 1, r - start);
                      const Tensor x = random_tensor({r, c}, rng);
                      const Tensor w = random_tensor({count, c}, rng);
                      return ad::grad_check([&](Var v) { return weighted(ad::slice_rows(v, start, count), w); }, x);
                    }});
  probes.push_back({"matmul", [](Rng& rng) {
                      const Shape a{pick(rng, 1, 4), pick(rng, 1, 4)};
                      const Shape b{a[1], pick(rng, 1, 4)};
                      const Tensor x = random_tensor({packed_size({a, b})}, rng);
                      const Tensor w = random_tensor({a[0], b[1]}, rng);
                      return ad::grad_check(
                          [&](Var v) {
                            auto p = unpack(v, {a, b});
                            return weighted(ad::matmul(p[0], p[1]), w);
                          },
                          x);
                    }});
  probes.push_back({"conv2d_same", [](Rng& rng) {
                      const std::size_t c = pick(rng, 1, 2), o = pick(rng, 1, 2);
                      const Shape img{c, pick(rng, 2, 5), pick(rng, 2, 5)};
                      const Shape filt{o, c, pick(rng, 1, 4), pick(rng, 1, 4)};
                      const Tensor x = random_tensor({packed_size({img, filt})}, rng);
                      const Tensor w = random_tensor({o, img[1], img[2]}, rng);
                      return ad::grad_check(
                          [&](Var v) {
                            auto p = unpack(v, {img, filt});
                            return weighted(ad::conv2d_same(p[0], p[1]), w);
                          },
                          x);
                    }});
  probes.push_back({"channel_bias", [](Rng& rng) {
                      const Shape img{pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)};
                      const Shape bias{img[0]};
                      const Tensor x = random_tensor({packed_size({img, bias})}, rng);
                      const Tensor w = random_tensor(img, rng);
                      return ad::grad_check(
                          [&](Var v) {
                            auto p = unpack(v, {img, bias});
                            return weighted(ad::channel_bias(p[0], p[1]), w);
                          },
                          x);
                    }});

  // G followed by the conv surrogate, w.r.t. the latents and w.r.t. the surrogate weights.
  probes.push_back({"generator_surrogate_latents", [](Rng& rng) {
                      const TinyModels m = tiny_models(rng);
                      const Tensor z = random_tensor({2, 1, 6}, rng);
                      const Tensor y = random_tensor({1, 5, 5}, rng);
                      return ad::grad_check(
                          [&](Var v) {
                            Var x = detail::generate(m.prior.generator, m.prior.generator.bind(v.tape(), false), v);
                            Var est = m.surrogate.forward(m.surrogate.network().bind(v.tape(), false),
                                                          ad::reshape(ad::slice_rows(x, 1, 1), {1, 5, 5}));
                            return ad::sum_squares(ad::sub(est, v.tape().constant(y)));
                          },
                          z);
                    }});
  probes.push_back({"generator_surrogate_weights", [](Rng& rng) {
                      const TinyModels m = tiny_models(rng);
                      const Tensor z = random_tensor({1, 1, 6}, rng);
                      const Tensor y = random_tensor({1, 5, 5}, rng);
                      return ad::grad_check(
                          [&](Var v) {
                            Var x = detail::generate(m.prior.generator, m.prior.generator.bind(v.tape(), false),
                                                     v.tape().constant(z));
                            Var est = m.surrogate.forward(unpack_bound(v, m.surrogate.network()),
                                                          ad::reshape(x, {1, 5, 5}));
                            return ad::sum_squares(ad::sub(est, v.tape().constant(y)));
                          },
                          pack_params(m.surrogate.network()));
                    }});
  probes.push_back({"mix_surrogate", [](Rng& rng) {
                      const TinyModels m = tiny_models(rng);
                      const Tensor src = random_tensor({2, 7}, rng);
                      const Tensor w = random_tensor({3, 7}, rng);
                      return ad::grad_check(
                          [&](Var v) { return weighted(m.mix.forward(m.mix.network().bind(v.tape(), false), v), w); },
                          src);
                    }});
  for (LossNorm norm : {LossNorm::l1, LossNorm::l2}) {
    probes.push_back({"total_loss_" + to_string(norm), [norm](Rng& rng) {
                        const TinyModels m = tiny_models(rng);
                        const Tensor z = random_tensor({2, 1, 6}, rng);
                        const std::vector<Tensor> y{random_tensor({1, 5, 5}, rng), random_tensor({1, 5, 5}, rng)};
                        return ad::grad_check(
                            [&](Var v) {
                              ad::Tape& tape = v.tape();
                              Var x = detail::generate(m.prior.generator, m.prior.generator.bind(tape, false), v);
                              const nn::Bound frozen = m.surrogate.network().bind(tape, false);
                              std::vector<Var> est;
                              for (std::size_t j = 0; j < 2; ++j) {
                                est.push_back(m.surrogate.forward(frozen, ad::reshape(ad::slice_rows(x, j, 1), {1, 5, 5})));
                              }
                              return total_loss(est, y, m.prior.discriminator, x, 0.5, norm);
                            },
                            z);
                      }});
  }
  return probes;
}

/// Runs every probe `trials` times with independent seeded instances.
inline std::vector<GradCheckReport> run_gradcheck_suite(std::size_t trials = 100, std::uint64_t seed = 0) {
  std::vector<GradCheckReport> reports;
  const auto probes = gradcheck_probes();
  for (std::size_t k = 0; k < probes.size(); ++k) {
    GradCheckReport r{probes[k].name, trials, 0.0};
    for (std::size_t t = 0; t < trials; ++t) {
      Rng rng(trial_seed(seed + 1000003 * k, t));
      r.worst = std::max(r.worst, probes[k].run(rng));
    }
    reports.push_back(r);
  }
  return reports;
}

}  // namespace blindinv
