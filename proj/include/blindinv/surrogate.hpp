#pragma once

// Trainable stand-ins for the unknown measurement process.

#include <stdexcept>
#include <string>
#include <variant>

#include "autodiff.hpp"
#include "measurement.hpp"
#include "nn.hpp"
#include "rng.hpp"

namespace blindinv {

struct ConvSurrogateOptions {
  std::size_t hidden = 16;
  std::size_t kernel = 5;
  bool relu = false;  // nonlinearity between the two convolutions
  double init_std = 0.02;
};

/// conv(C -> hidden) . conv(hidden -> C), linear unless `relu` is set.
class ConvSurrogate {
 public:
  ConvSurrogate() = default;
  ConvSurrogate(nn::Network net, std::size_t channels, bool relu)
      : net_(std::move(net)), channels_(channels), relu_(relu) {}

  std::size_t channels() const noexcept { return channels_; }
  bool has_relu() const noexcept { return relu_; }
  nn::Network& network() noexcept { return net_; }
  const nn::Network& network() const noexcept { return net_; }

  /// x [C x H x W] -> [C x H x W]
  ad::Var forward(const nn::Bound& bound, ad::Var x) const {
    if (x.shape().size() != 3 || x.shape()[0] != channels_) {
      throw ShapeError("conv surrogate expects [" + std::to_string(channels_) + " x H x W], got " +
                       to_string(x.shape()));
    }
    return net_.forward(bound, x);
  }

 private:
  nn::Network net_;
  std::size_t channels_ = 0;
  bool relu_ = false;
};

/// Pixel-wise two-layer perceptron S -> 16 (ReLU) -> N_obs with shared weights.
class MixSurrogate {
 public:
  MixSurrogate() = default;
  MixSurrogate(nn::Network net, std::size_t sources, std::size_t observations)
      : net_(std::move(net)), sources_(sources), observations_(observations) {}

  std::size_t sources() const noexcept { return sources_; }
  std::size_t observations() const noexcept { return observations_; }
  nn::Network& network() noexcept { return net_; }
  const nn::Network& network() const noexcept { return net_; }

  /// x [S x pixels] -> [N_obs x pixels]
  ad::Var forward(const nn::Bound& bound, ad::Var x) const {
    if (x.shape().size() != 2 || x.shape()[0] != sources_) {
      throw ShapeError("mix surrogate expects [" + std::to_string(sources_) + " x pixels], got " + to_string(x.shape()));
    }
    return ad::transpose(net_.forward(bound, ad::transpose(x)));
  }

 private:
  nn::Network net_;
  std::size_t sources_ = 0;
  std::size_t observations_ = 0;
};

using Surrogate = std::variant<ConvSurrogate, MixSurrogate>;

inline ConvSurrogate build_conv_surrogate(std::size_t channels, Rng& rng, const ConvSurrogateOptions& opt = {}) {
  if (channels == 0 || opt.hidden == 0 || opt.kernel == 0) {
    throw std::invalid_argument("build_conv_surrogate: channels, hidden and kernel must be positive");
  }
  const auto act = opt.relu ? nn::Activation::relu : nn::Activation::none;
  std::vector<nn::LayerSpec> layers{nn::LayerSpec::conv(opt.hidden, channels, opt.kernel, opt.kernel, act),
                                    nn::LayerSpec::conv(channels, opt.hidden, opt.kernel, opt.kernel, nn::Activation::none)};
  return ConvSurrogate(nn::Network::build(std::move(layers), rng, opt.init_std), channels, opt.relu);
}

inline MixSurrogate build_mix_surrogate(std::size_t sources, std::size_t observations, Rng& rng,
                                        std::size_t hidden = 16, double init_std = 0.02) {
  if (sources == 0 || observations == 0) throw std::invalid_argument("build_mix_surrogate: S and N_obs must be positive");
  std::vector<nn::LayerSpec> layers{nn::LayerSpec::dense(hidden, sources, nn::Activation::relu),
                                    nn::LayerSpec::dense(observations, hidden, nn::Activation::none)};
  return MixSurrogate(nn::Network::build(std::move(layers), rng, init_std), sources, observations);
}

inline nn::Network& surrogate_network(Surrogate& s) {
  return std::visit([](auto& v) -> nn::Network& { return v.network(); }, s);
}
inline const nn::Network& surrogate_network(const Surrogate& s) {
  return std::visit([](const auto& v) -> const nn::Network& { return v.network(); }, s);
}

inline ad::Var surrogate_forward(const Surrogate& s, const nn::Bound& bound, ad::Var x) {
  return std::visit([&](const auto& v) { return v.forward(bound, x); }, s);
}

inline ad::Var surrogate_forward(ad::Tape& tape, const Surrogate& s, ad::Var x) {
  return surrogate_forward(s, surrogate_network(s).bind(tape, false), x);
}

/// Single kernel equivalent to both convolution layers, biases ignored:
/// K[o,c,u+v] = sum_m f2[o,m,v] * f1[m,c,u]. Result [C x C x (2k-1) x (2k-1)].
/// Exact away from the image border; zero padding between the layers
/// truncates the intermediate maps within k/2 pixels of the edge.
inline Tensor effective_kernel(const ConvSurrogate& s) {
  if (s.has_relu()) throw std::invalid_argument("effective_kernel: surrogate has a nonlinearity");
  const Tensor& f1 = s.network().params()[0].value;  // [M x C x k1 x k1]
  const Tensor& f2 = s.network().params()[2].value;  // [C x M x k2 x k2]
  const std::size_t hidden = f1.dim(0), c_in = f1.dim(1), k1h = f1.dim(2), k1w = f1.dim(3);
  const std::size_t c_out = f2.dim(0), k2h = f2.dim(2), k2w = f2.dim(3);
  const std::size_t kh = k1h + k2h - 1, kw = k1w + k2w - 1;
  Tensor k(Shape{c_out, c_in, kh, kw});
  for (std::size_t o = 0; o < c_out; ++o) {
    for (std::size_t c = 0; c < c_in; ++c) {
      for (std::size_t m = 0; m < hidden; ++m) {
        for (std::size_t vi = 0; vi < k2h; ++vi) {
          for (std::size_t vj = 0; vj < k2w; ++vj) {
            const double b = f2[((o * hidden + m) * k2h + vi) * k2w + vj];
            if (b == 0.0) continue;
            for (std::size_t ui = 0; ui < k1h; ++ui) {
              for (std::size_t uj = 0; uj < k1w; ++uj) {
                k[((o * c_in + c) * kh + ui + vi) * kw + uj + vj] += b * f1[((m * c_in + c) * k1h + ui) * k1w + uj];
              }
            }
          }
        }
      }
    }
  }
  return k;
}

/// The (out, in) slice of an effective kernel bank.
inline ConvKernel kernel_slice(const Tensor& bank, std::size_t out, std::size_t in) {
  const std::size_t kh = bank.dim(2), kw = bank.dim(3);
  Tensor k(Shape{kh, kw});
  const std::size_t offset = (out * bank.dim(1) + in) * kh * kw;
  std::copy(bank.data().begin() + static_cast<std::ptrdiff_t>(offset),
            bank.data().begin() + static_cast<std::ptrdiff_t>(offset + kh * kw), k.data().begin());
  return {std::move(k)};
}

/// Surrogate whose layers are centered deltas routing channel c through hidden channel c.
inline ConvSurrogate identity_conv_surrogate(std::size_t channels, const ConvSurrogateOptions& opt = {}) {
  if (opt.hidden < channels || opt.kernel % 2 == 0) {
    throw std::invalid_argument("identity_conv_surrogate: needs hidden >= channels and an odd kernel");
  }
  Rng unused(0);
  ConvSurrogateOptions zero = opt;
  zero.init_std = 0.0;
  ConvSurrogate s = build_conv_surrogate(channels, unused, zero);
  auto& params = s.network().params();
  const std::size_t k = opt.kernel, mid = k / 2;
  for (std::size_t c = 0; c < channels; ++c) {
    params[0].value[((c * channels + c) * k + mid) * k + mid] = 1.0;
    params[2].value[((c * opt.hidden + c) * k + mid) * k + mid] = 1.0;
  }
  return s;
}

}  // namespace blindinv
