#pragma once

// Ground-truth measurement processes used to synthesize observations.
// These are never visible to the blind solver; they only feed data
// synthesis and the known-operator baselines.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "autodiff.hpp"
#include "io.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace blindinv {

struct ConvKernel {
  Tensor values;  // [kh x kw]

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
};

/// Normalized Gaussian, k[i,j] ~ exp(-((i-c)^2 + (j-c)^2) / (2 sigma^2)), c = (size-1)/2.
inline ConvKernel gaussian_kernel(std::size_t size = 20, double sigma = 5.0) {
  if (size == 0 || !(sigma > 0.0)) throw std::invalid_argument("gaussian_kernel: size and sigma must be positive");
  Tensor k(Shape{size, size});
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    for (std::size_t j = 0; j < size; ++j) {
      const double di = static_cast<double>(i) - c;
      const double dj = static_cast<double>(j) - c;
      const double v = std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
      k.at(i, j) = v;
      total += v;
    }
  }
  for (double& v : k.data()) v /= total;
  return {std::move(k)};
}

inline ConvKernel edge_kernel() {
  return {Tensor::from_rows({{1.0, 0.0, -1.0}, {2.0, 0.0, -2.0}, {1.0, 0.0, -1.0}})};
}

/// Odd-sized kernel with a single 1 at the center.
inline ConvKernel delta_kernel(std::size_t size = 1) {
  if (size % 2 == 0) throw std::invalid_argument("delta_kernel: size must be odd");
  Tensor k(Shape{size, size});
  k.at(size / 2, size / 2) = 1.0;
  return {std::move(k)};
}

namespace detail {

inline Tensor as_planes(const Tensor& image) {
  if (image.rank() == 2) return image.reshaped({1, image.dim(0), image.dim(1)});
  if (image.rank() == 3) return image;
  throw ShapeError("expected an image [H x W] or [C x H x W], got " + to_string(image.shape()));
}

}  // namespace detail

/// Same-size zero-padded correlation applied to every channel independently.
inline Tensor apply_kernel(const Tensor& image, const ConvKernel& kernel) {
  const Tensor planes = detail::as_planes(image);
  const std::size_t c = planes.dim(0);
  const std::size_t kh = kernel.height();
  const std::size_t kw = kernel.width();
  Tensor filters(Shape{c, c, kh, kw});
  for (std::size_t ch = 0; ch < c; ++ch) {
    std::copy(kernel.values.data().begin(), kernel.values.data().end(),
              filters.data().begin() + static_cast<std::ptrdiff_t>((ch * c + ch) * kh * kw));
  }
  return ad::conv2d_same_values(planes, filters).reshaped(image.shape());
}

/// Circular (wrap-around) correlation with the same anchor convention.
inline Tensor apply_kernel_circular(const Tensor& image, const ConvKernel& kernel) {
  const Tensor planes = detail::as_planes(image);
  const std::size_t c = planes.dim(0), h = planes.dim(1), w = planes.dim(2);
  const std::size_t kh = kernel.height(), kw = kernel.width();
  Tensor out(planes.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::size_t i = 0; i < kh; ++i) {
          const std::size_t sy = (y + i + h * kh - kh / 2) % h;
          for (std::size_t j = 0; j < kw; ++j) {
            const std::size_t sx = (x + j + w * kw - kw / 2) % w;
            acc += kernel.values.at(i, j) * planes[(ch * h + sy) * w + sx];
          }
        }
        out[(ch * h + y) * w + x] = acc;
      }
    }
  }
  return out.reshaped(image.shape());
}

/// Matrix T [HW x HW] with T . vec(image) == apply_kernel(image) for one channel.
inline Tensor toeplitz_of(const ConvKernel& kernel, std::size_t h, std::size_t w) {
  const auto kh = static_cast<std::ptrdiff_t>(kernel.height());
  const auto kw = static_cast<std::ptrdiff_t>(kernel.width());
  const std::ptrdiff_t ah = kh / 2, aw = kw / 2;
  const std::size_t n = h * w;
  Tensor t(Shape{n, n});
  for (std::size_t py = 0; py < h; ++py) {
    for (std::size_t px = 0; px < w; ++px) {
      for (std::size_t qy = 0; qy < h; ++qy) {
        const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(qy) - static_cast<std::ptrdiff_t>(py) + ah;
        if (i < 0 || i >= kh) continue;
        for (std::size_t qx = 0; qx < w; ++qx) {
          const std::ptrdiff_t j = static_cast<std::ptrdiff_t>(qx) - static_cast<std::ptrdiff_t>(px) + aw;
          if (j < 0 || j >= kw) continue;
          t.at(py * w + px, qy * w + qx) = kernel.values.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
        }
      }
    }
  }
  return t;
}

struct MixingMatrix {
  Tensor values;  // [S x N_obs]
};

/// |M^T X| for sources X [S x pixels]; returns [N_obs x pixels].
inline Tensor mix_abs(const MixingMatrix& m, const Tensor& x) {
  const Tensor& mv = m.values;
  if (mv.rank() != 2 || x.rank() != 2 || mv.dim(0) != x.dim(0)) {
    throw ShapeError("mix_abs: mixing " + to_string(mv.shape()) + " incompatible with sources " + to_string(x.shape()));
  }
  const std::size_t s = mv.dim(0), n_obs = mv.dim(1), pixels = x.dim(1);
  Tensor y(Shape{n_obs, pixels});
  for (std::size_t o = 0; o < n_obs; ++o) {
    for (std::size_t i = 0; i < s; ++i) {
      const double wgt = mv.at(i, o);
      for (std::size_t p = 0; p < pixels; ++p) y[o * pixels + p] += wgt * x[i * pixels + p];
    }
  }
  for (double& v : y.data()) v = std::abs(v);
  return y;
}

/// Entries i.i.d. normal with mean -0.5 and standard deviation 0.5.
inline MixingMatrix sample_mixing(std::size_t s, std::size_t n_obs, Rng& rng) {
  Tensor m(Shape{s, n_obs});
  for (double& v : m.data()) v = rng.normal(-0.5, 0.5);
  return {std::move(m)};
}

inline Tensor add_noise(const Tensor& y, double sigma, Rng& rng) {
  if (sigma < 0.0) throw std::invalid_argument("add_noise: sigma must be non-negative");
  Tensor out = y;
  if (sigma == 0.0) return out;
  for (double& v : out.data()) v += rng.normal(0.0, sigma);
  return out;
}

struct IdentityOperator {};
struct KernelOperator {
  std::string id;  // "blur", "edge", ...
  ConvKernel kernel;
};
struct MixingOperator {
  MixingMatrix mixing;
};

using Operator = std::variant<IdentityOperator, KernelOperator, MixingOperator>;

inline std::string operator_id(const Operator& op) {
  struct {
    std::string operator()(const IdentityOperator&) const { return "identity"; }
    std::string operator()(const KernelOperator& k) const { return k.id; }
    std::string operator()(const MixingOperator&) const { return "mix"; }
  } visitor;
  return std::visit(visitor, op);
}

/// Kernel operators take images [C x H x W]; mixing takes sources [S x pixels].
inline Tensor apply_operator(const Operator& op, const Tensor& sources) {
  struct {
    const Tensor& x;
    Tensor operator()(const IdentityOperator&) const { return x; }
    Tensor operator()(const KernelOperator& k) const { return apply_kernel(x, k.kernel); }
    Tensor operator()(const MixingOperator& m) const { return mix_abs(m.mixing, x); }
  } visitor{sources};
  return std::visit(visitor, op);
}

struct ObservationSet {
  std::vector<Tensor> observations;  // N tensors of equal shape
  std::string operator_id;
  std::uint64_t seed = 0;
  std::vector<Tensor> sources;  // optional ground truth, same order
  Operator op;                  // ground truth, kept for evaluation and known-operator baselines only

  std::size_t size() const noexcept { return observations.size(); }
};

/// Applies `op` (plus optional Gaussian noise) to the first N source sets.
inline ObservationSet make_observations(const std::vector<Tensor>& sources, const Operator& op, std::size_t n, Rng& rng,
                                        double noise_sigma = 0.0, std::uint64_t seed = 0) {
  if (n == 0) throw std::invalid_argument("make_observations: N must be at least 1");
  if (sources.size() < n) {
    throw std::invalid_argument("make_observations: need " + std::to_string(n) + " source sets, got " +
                                std::to_string(sources.size()));
  }
  ObservationSet set;
  set.operator_id = operator_id(op);
  set.seed = seed;
  set.op = op;
  for (std::size_t j = 0; j < n; ++j) {
    set.observations.push_back(add_noise(apply_operator(op, sources[j]), noise_sigma, rng));
    set.sources.push_back(sources[j]);
  }
  return set;
}

namespace detail {

inline io::json operator_json(const Operator& op) {
  io::json j;
  j["id"] = operator_id(op);
  if (const auto* k = std::get_if<KernelOperator>(&op)) {
    j["shape"] = io::shape_json(k->kernel.values.shape());
    j["values"] = k->kernel.values.values();
  } else if (const auto* m = std::get_if<MixingOperator>(&op)) {
    j["shape"] = io::shape_json(m->mixing.values.shape());
    j["values"] = m->mixing.values.values();
  }
  return j;
}

inline Operator operator_from_json(const io::json& j) {
  const std::string id = j.at("id").get<std::string>();
  if (id == "identity") return IdentityOperator{};
  Tensor values(io::shape_from_json(j.at("shape")), j.at("values").get<std::vector<double>>());
  if (id == "mix") return MixingOperator{{std::move(values)}};
  return KernelOperator{id, {std::move(values)}};
}

}  // namespace detail

/// Writes manifest.json plus observations.f32 (and sources.f32 when ground truth is present).
inline void save_observations(const std::filesystem::path& dir, const ObservationSet& set) {
  if (set.observations.empty()) throw std::invalid_argument("save_observations: empty observation set");
  io::json m;
  m["operator_id"] = set.operator_id;
  m["seed"] = set.seed;
  m["N"] = set.size();
  m["shape"] = io::shape_json(set.observations.front().shape());
  m["operator"] = detail::operator_json(set.op);
  if (!set.sources.empty()) m["sources_shape"] = io::shape_json(set.sources.front().shape());
  io::write_json(dir / "manifest.json", m);
  io::write_tensors(dir / "observations.f32", set.observations);
  if (!set.sources.empty()) io::write_tensors(dir / "sources.f32", set.sources);
}

inline ObservationSet load_observations(const std::filesystem::path& dir) {
  const io::json m = io::read_json(dir / "manifest.json");
  ObservationSet set;
  try {
    set.operator_id = m.at("operator_id").get<std::string>();
    set.seed = m.at("seed").get<std::uint64_t>();
    const auto n = m.at("N").get<std::size_t>();
    if (n == 0) throw std::runtime_error("N must be at least 1");
    set.observations = io::read_tensors(dir / "observations.f32", n, io::shape_from_json(m.at("shape")));
    if (m.contains("sources_shape")) {
      set.sources = io::read_tensors(dir / "sources.f32", n, io::shape_from_json(m.at("sources_shape")));
    }
    set.op = m.contains("operator") ? detail::operator_from_json(m.at("operator")) : Operator{IdentityOperator{}};
  } catch (const io::json::exception& e) {
    throw std::runtime_error("bad observation manifest in '" + dir.string() + "': " + e.what());
  }
  return set;
}

}  // namespace blindinv
