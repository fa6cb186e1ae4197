#pragma once

// Comparison methods: latent-space PGD with and without the true operator,
// the naive additive mixing model, Wiener deconvolution and FastICA.

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "gan.hpp"
#include "measurement.hpp"
#include "rng.hpp"
#include "solver.hpp"
#include "tensor.hpp"

namespace blindinv {

struct BaselineOptions {
  std::size_t steps = 5000;
  double lr = 3e-4;
  double alpha = 1e-4;
  double clip_lo = -1.0;
  double clip_hi = 1.0;
  LossNorm loss_norm = LossNorm::l1;

  /// steps = T * T2, lr = lr_z, same alpha, clip range and norm.
  static BaselineOptions matching(const SolverConfig& cfg) {
    return {cfg.outer_epochs * cfg.latent_steps, cfg.lr_z, cfg.alpha, cfg.clip_lo, cfg.clip_hi, cfg.loss_norm};
  }
};

struct BaselineResult {
  std::string method;
  std::vector<Tensor> sources;  // per observation; [S x C x H x W] for latent methods
  double final_loss = 0.0;
  double runtime_ms = 0.0;
  Tensor latents;
  bool converged = true;
};

namespace detail {

inline double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

inline BaselineResult run_latent_baseline(std::string method, const GanModel& prior, std::span<const Tensor> y_obs,
                                          std::size_t s, MeasureFactory measurement, const BaselineOptions& opt,
                                          std::uint64_t seed) {
  if (y_obs.empty()) throw std::invalid_argument(method + ": need at least one observation");
  if (!(opt.lr > 0.0)) throw std::invalid_argument(method + ": learning rate must be positive");
  const auto started = std::chrono::steady_clock::now();
  Rng rng(seed);
  nn::ParameterSet latents;
  latents.add("z", init_latents(y_obs.size(), s, prior.generator.latent_dim(), rng));
  nn::AdamState adam;
  const LatentObjective objective{&prior, y_obs, s, opt.alpha, opt.loss_norm, std::move(measurement)};
  latent_descent(latents, adam, objective, opt.steps, opt.lr, opt.clip_lo, opt.clip_hi, method);

  BaselineResult r;
  r.method = std::move(method);
  r.final_loss = objective.value(latents[0].value);
  r.latents = latents[0].value;
  r.sources = recovered_sources(prior.generator, latents[0].value);
  r.runtime_ms = elapsed_ms(started);
  return r;
}

inline void require_image_observations(std::string_view method, const GanModel& prior, std::span<const Tensor> y_obs) {
  const std::size_t m = prior.generator.image().size();
  for (const Tensor& y : y_obs) {
    if (y.size() != m) {
      throw ShapeError(std::string(method) + ": observation " + to_string(y.shape()) +
                       " does not match generator output " + to_string(prior.generator.image().shape()));
    }
  }
}

/// Filter bank [C x C x kh x kw] applying `kernel` to each channel separately.
inline Tensor per_channel_filters(const ConvKernel& kernel, std::size_t channels) {
  const std::size_t kh = kernel.height(), kw = kernel.width();
  Tensor filters(Shape{channels, channels, kh, kw});
  for (std::size_t c = 0; c < channels; ++c) {
    std::copy(kernel.values.data().begin(), kernel.values.data().end(),
              filters.data().begin() + static_cast<std::ptrdiff_t>((c * channels + c) * kh * kw));
  }
  return filters;
}

}  // namespace detail

/// Fit G(z_j) to Y_j directly, ignoring the measurement process.
inline BaselineResult pgd_no_forward(const GanModel& prior, std::span<const Tensor> y_obs, const BaselineOptions& opt,
                                     std::uint64_t seed) {
  detail::require_image_observations("pgd_no_forward", prior, y_obs);
  const Shape shape = y_obs.front().shape();
  return detail::run_latent_baseline(
      "pgd_no_forward", prior, y_obs, 1,
      [shape](ad::Tape&) -> detail::MeasureFn {
        return [shape](ad::Var x, std::size_t) { return ad::reshape(x, shape); };
      },
      opt, seed);
}

/// PGD through the exact ground-truth operator.
inline BaselineResult pgd_known_forward(const GanModel& prior, std::span<const Tensor> y_obs, const Operator& op,
                                        const BaselineOptions& opt, std::uint64_t seed) {
  if (std::holds_alternative<IdentityOperator>(op)) {
    BaselineResult r = pgd_no_forward(prior, y_obs, opt, seed);
    r.method = "pgd_known_forward";
    return r;
  }
  if (const auto* k = std::get_if<KernelOperator>(&op)) {
    detail::require_image_observations("pgd_known_forward", prior, y_obs);
    const ImageShape image = prior.generator.image();
    const Tensor filters = detail::per_channel_filters(k->kernel, image.channels);
    return detail::run_latent_baseline(
        "pgd_known_forward", prior, y_obs, 1,
        [image, filters](ad::Tape& tape) -> detail::MeasureFn {
          ad::Var f = tape.constant(filters);
          return [image, f](ad::Var x, std::size_t) { return ad::conv2d_same(ad::reshape(x, image.shape()), f); };
        },
        opt, seed);
  }
  const Tensor& m = std::get<MixingOperator>(op).mixing.values;  // [S x N_obs]
  Tensor mt(Shape{m.dim(1), m.dim(0)});
  for (std::size_t i = 0; i < m.dim(0); ++i) {
    for (std::size_t o = 0; o < m.dim(1); ++o) mt.at(o, i) = m.at(i, o);
  }
  return detail::run_latent_baseline(
      "pgd_known_forward", prior, y_obs, m.dim(0),
      [mt](ad::Tape& tape) -> detail::MeasureFn {
        ad::Var mv = tape.constant(mt);
        return [mv](ad::Var x, std::size_t) { return ad::abs_elem(ad::matmul(mv, x)); };
      },
      opt, seed);
}

/// Unweighted sum of S generated sources compared against every observation row.
inline BaselineResult naive_additive(const GanModel& prior, std::span<const Tensor> y_obs, std::size_t s,
                                     const BaselineOptions& opt, std::uint64_t seed) {
  if (s == 0) throw std::invalid_argument("naive_additive: S must be at least 1");
  const std::size_t m = prior.generator.image().size();
  const Shape shape = y_obs.empty() ? Shape{} : y_obs.front().shape();
  if (!y_obs.empty() && y_obs.front().size() % m != 0) {
    throw ShapeError("naive_additive: observation " + to_string(shape) + " is not a stack of generator images");
  }
  const std::size_t rows = y_obs.empty() ? 1 : y_obs.front().size() / m;
  return detail::run_latent_baseline(
      "naive_additive", prior, y_obs, s,
      [rows, s, shape](ad::Tape& tape) -> detail::MeasureFn {
        ad::Var ones = tape.constant(Tensor(Shape{rows, s}, 1.0));
        return [ones, shape](ad::Var x, std::size_t) { return ad::reshape(ad::matmul(ones, x), shape); };
      },
      opt, seed);
}

// ------------------------------------------------------------------ DFT

struct Spectrum {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::complex<double>> bins;  // row-major

  std::complex<double>& at(std::size_t u, std::size_t v) { return bins[u * width + v]; }
  std::complex<double> at(std::size_t u, std::size_t v) const { return bins[u * width + v]; }
};

namespace detail {

// In-place 1-D DFT over `n` strided samples, O(n^2).
inline void dft_1d(std::complex<double>* data, std::size_t n, std::size_t stride, bool inverse,
                   std::vector<std::complex<double>>& scratch) {
  const double sign = inverse ? 1.0 : -1.0;
  scratch.assign(n, {0.0, 0.0});
  for (std::size_t k = 0; k < n; ++k) {
    std::complex<double> acc{0.0, 0.0};
    for (std::size_t t = 0; t < n; ++t) {
      const double angle = sign * 2.0 * std::numbers::pi * static_cast<double>((k * t) % n) / static_cast<double>(n);
      acc += data[t * stride] * std::complex<double>(std::cos(angle), std::sin(angle));
    }
    scratch[k] = acc;
  }
  for (std::size_t k = 0; k < n; ++k) data[k * stride] = scratch[k];
}

inline void dft_2d(Spectrum& s, bool inverse) {
  std::vector<std::complex<double>> scratch;
  for (std::size_t r = 0; r < s.height; ++r) dft_1d(&s.bins[r * s.width], s.width, 1, inverse, scratch);
  for (std::size_t c = 0; c < s.width; ++c) dft_1d(&s.bins[c], s.height, s.width, inverse, scratch);
  if (inverse) {
    const double scale = 1.0 / static_cast<double>(s.height * s.width);
    for (auto& b : s.bins) b *= scale;
  }
}

}  // namespace detail

/// Unnormalized forward 2-D DFT of a single-channel image [H x W].
inline Spectrum dft2d(const Tensor& image) {
  if (image.rank() != 2) throw ShapeError("dft2d expects [H x W], got " + to_string(image.shape()));
  Spectrum s{image.dim(0), image.dim(1), {}};
  s.bins.assign(image.data().begin(), image.data().end());
  detail::dft_2d(s, false);
  return s;
}

/// Inverse of dft2d (1/HW scaling); returns the real part.
inline Tensor idft2d(Spectrum s) {
  detail::dft_2d(s, true);
  Tensor out(Shape{s.height, s.width});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s.bins[i].real();
  return out;
}

/// Wiener deconvolution X = conj(H) Y / (|H|^2 + k_reg) under a circular
/// forward model matching apply_kernel_circular. Works per channel.
inline Tensor wiener_deconvolve(const Tensor& y, const ConvKernel& kernel, double k_reg) {
  if (k_reg < 0.0) throw std::invalid_argument("wiener_deconvolve: k_reg must be non-negative");
  const Tensor planes = detail::as_planes(y);
  const std::size_t c = planes.dim(0), h = planes.dim(1), w = planes.dim(2);
  const std::size_t kh = kernel.height(), kw = kernel.width();

  // Circular impulse response: y[p] = sum_q h[q] x[p - q], h[(a - u) mod n] = k[u].
  Tensor impulse(Shape{h, w});
  for (std::size_t i = 0; i < kh; ++i) {
    for (std::size_t j = 0; j < kw; ++j) {
      const std::size_t r = (kh / 2 + h * kh - i) % h;
      const std::size_t q = (kw / 2 + w * kw - j) % w;
      impulse.at(r, q) += kernel.values.at(i, j);
    }
  }
  const Spectrum hs = dft2d(impulse);

  Tensor out(planes.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    Tensor plane(Shape{h, w});
    std::copy_n(planes.data().begin() + static_cast<std::ptrdiff_t>(ch * h * w), h * w, plane.data().begin());
    Spectrum ys = dft2d(plane);
    for (std::size_t i = 0; i < ys.bins.size(); ++i) {
      const double denom = std::norm(hs.bins[i]) + k_reg;
      ys.bins[i] = denom > 0.0 ? std::conj(hs.bins[i]) * ys.bins[i] / denom : std::complex<double>{0.0, 0.0};
    }
    const Tensor x = idft2d(std::move(ys));
    std::copy(x.data().begin(), x.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(ch * h * w));
  }
  return out.reshaped(y.shape());
}

// ---------------------------------------------------------------- FastICA

class UnderdeterminedError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct IcaResult {
  Tensor sources;   // [S x pixels], unit variance
  Tensor unmixing;  // [S x S] orthonormal rotation in whitened space
  bool converged = false;
  std::size_t iterations = 0;
};

struct IcaOptions {
  double tol = 1e-6;
  std::size_t max_iter = 200;
  std::uint64_t seed = 0;
};

namespace detail {

using Mat = Eigen::MatrixXd;

/// (W W^T)^{-1/2} W
inline Mat symmetric_decorrelation(const Mat& w) {
  Eigen::SelfAdjointEigenSolver<Mat> eig(w * w.transpose());
  const Eigen::VectorXd inv_sqrt = eig.eigenvalues().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
  return eig.eigenvectors() * inv_sqrt.asDiagonal() * eig.eigenvectors().transpose() * w;
}

}  // namespace detail

/// Symmetric FastICA with tanh contrast on mixtures Y [N_obs x pixels].
inline IcaResult fastica(const Tensor& y, std::size_t s, const IcaOptions& opt = {}) {
  using detail::Mat;
  if (y.rank() != 2) throw ShapeError("fastica expects [N_obs x pixels], got " + to_string(y.shape()));
  const std::size_t n_obs = y.dim(0), pixels = y.dim(1);
  if (s == 0) throw std::invalid_argument("fastica: S must be at least 1");
  if (n_obs < s) {
    throw UnderdeterminedError("fastica: underdetermined, " + std::to_string(n_obs) + " mixtures for " +
                               std::to_string(s) + " sources");
  }

  Mat x = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      y.data().data(), static_cast<Eigen::Index>(n_obs), static_cast<Eigen::Index>(pixels));
  x.colwise() -= x.rowwise().mean();
  const Mat cov = x * x.transpose() / static_cast<double>(pixels);
  Eigen::SelfAdjointEigenSolver<Mat> eig(cov);
  const auto k = static_cast<Eigen::Index>(s);
  const Eigen::VectorXd top = eig.eigenvalues().tail(k).reverse();
  const Mat vecs = eig.eigenvectors().rightCols(k).rowwise().reverse();
  const double floor = std::max(top(0), 1e-300) * 1e-12;
  const Eigen::VectorXd scale = top.cwiseMax(floor).cwiseSqrt().cwiseInverse();
  const Mat z = scale.asDiagonal() * vecs.transpose() * x;  // whitened [S x pixels]

  IcaResult result;
  Mat w = Mat::Identity(k, k);
  if (s > 1) {
    Rng rng(opt.seed);
    for (Eigen::Index i = 0; i < k; ++i) {
      for (Eigen::Index j = 0; j < k; ++j) w(i, j) = rng.normal();
    }
    w = detail::symmetric_decorrelation(w);
    const double inv_n = 1.0 / static_cast<double>(pixels);
    for (std::size_t it = 0; it < opt.max_iter; ++it) {
      const Mat g = (w * z).array().tanh().matrix();
      const Eigen::VectorXd g_prime = (1.0 - g.array().square()).rowwise().mean();
      Mat next = g * z.transpose() * inv_n - g_prime.asDiagonal() * w;
      next = detail::symmetric_decorrelation(next);
      const double lim = ((next * w.transpose()).diagonal().cwiseAbs().array() - 1.0).abs().maxCoeff();
      w = next;
      result.iterations = it + 1;
      if (lim < opt.tol) {
        result.converged = true;
        break;
      }
    }
  } else {
    result.converged = true;
  }

  const Mat sources = w * z;
  result.sources = Tensor(Shape{s, pixels});
  result.unmixing = Tensor(Shape{s, s});
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t p = 0; p < pixels; ++p) result.sources.at(i, p) = sources(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p));
    for (std::size_t j = 0; j < s; ++j) result.unmixing.at(i, j) = w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  return result;
}

}  // namespace blindinv
