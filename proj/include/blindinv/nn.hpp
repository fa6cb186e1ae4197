#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace blindinv::nn {

using ad::Tape;
using ad::Var;

// Numeric codes are part of the checkpoint format.
enum class LayerKind : std::uint8_t { dense = 0, conv2d = 1 };
enum class Activation : std::uint8_t { none = 0, relu = 1, leaky_relu = 2, tanh = 3, sigmoid = 4 };

/// dims: dense {out, in, extra0, extra1}; conv2d {C_out, C_in, kh, kw}.
struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  Activation activation = Activation::none;
  std::array<std::uint32_t, 4> dims{};

  static LayerSpec dense(std::size_t out, std::size_t in, Activation act) {
    return {LayerKind::dense, act, {static_cast<std::uint32_t>(out), static_cast<std::uint32_t>(in), 0, 0}};
  }
  static LayerSpec conv(std::size_t c_out, std::size_t c_in, std::size_t kh, std::size_t kw, Activation act) {
    return {LayerKind::conv2d,
            act,
            {static_cast<std::uint32_t>(c_out), static_cast<std::uint32_t>(c_in), static_cast<std::uint32_t>(kh),
             static_cast<std::uint32_t>(kw)}};
  }

  Shape weight_shape() const {
    if (kind == LayerKind::dense) return {dims[0], dims[1]};
    return {dims[0], dims[1], dims[2], dims[3]};
  }
  Shape bias_shape() const { return {dims[0]}; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

/// Ordered, uniquely named parameters with paired gradients.
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor value) {
    for (const auto& p : params_) {
      if (p.name == name) throw std::invalid_argument("duplicate parameter name '" + name + "'");
    }
    Tensor grad(value.shape());
    params_.push_back({std::move(name), std::move(value), std::move(grad)});
    return params_.size() - 1;
  }

  std::size_t size() const noexcept { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_.at(i); }
  const Parameter& operator[](std::size_t i) const { return params_.at(i); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  /// Adds `g` into the gradient of parameter i.
  void accumulate(std::size_t i, const Tensor& g) { params_.at(i).grad += g; }

  bool values_equal(const ParameterSet& other) const {
    if (size() != other.size()) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (params_[i].name != other.params_[i].name || params_[i].value != other.params_[i].value) return false;
    }
    return true;
  }

 private:
  std::vector<Parameter> params_;
};

inline void zero_grads(ParameterSet& params) {
  for (auto& p : params) p.grad.fill(0.0);
}

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// theta <- theta - lr * m_hat / (sqrt(v_hat) + eps), bias-corrected.
inline void adam_step(ParameterSet& params, AdamState& state, double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("adam_step: learning rate must be positive, got " + std::to_string(lr));
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.value.shape());
      state.v.emplace_back(p.value.shape());
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match parameter set");
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = params[k];
    Tensor& m = state.m[k];
    Tensor& v = state.v[k];
    p.value.require_same_shape(p.grad, "adam_step");
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p.value[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

enum class InitScheme { normal, zeros };

/// i.i.d. N(0, std^2) entries (or zeros).
inline Tensor init_params(const Shape& shape, Rng& rng, InitScheme scheme = InitScheme::normal, double std = 0.02) {
  Tensor t(shape);
  if (scheme == InitScheme::zeros) return t;
  for (double& v : t.data()) v = rng.normal(0.0, std);
  return t;
}

struct DenseLayer {
  Tensor weights;  // [out x in]
  Tensor bias;     // [out]
};

struct Conv2dLayer {
  Tensor filters;  // [C_out x C_in x kh x kw]
  Tensor bias;     // [C_out]
};

/// weights . x + bias. x is either a vector [in] or a row batch [B x in].
inline Var dense_forward(Var weights, Var bias, Var x) {
  const Shape& xs = x.shape();
  if (xs.size() == 1) {
    Var col = ad::reshape(x, {xs[0], 1});
    Var y = ad::reshape(ad::matmul(weights, col), {weights.shape()[0]});
    return ad::add(y, bias);
  }
  if (xs.size() != 2 || weights.shape().size() != 2 || xs[1] != weights.shape()[1]) {
    throw ShapeError("dense_forward: input " + to_string(xs) + " does not match weights " + to_string(weights.shape()));
  }
  return ad::add(ad::matmul(x, ad::transpose(weights)), bias);
}

inline Var dense_forward(Tape& tape, const DenseLayer& layer, Var x) {
  return dense_forward(tape.constant(layer.weights), tape.constant(layer.bias), x);
}

inline Var conv_forward(Var filters, Var bias, Var x) { return ad::channel_bias(ad::conv2d_same(x, filters), bias); }

inline Var conv_forward(Tape& tape, const Conv2dLayer& layer, Var x) {
  return conv_forward(tape.constant(layer.filters), tape.constant(layer.bias), x);
}

inline Var activate(Var x, Activation act) {
  switch (act) {
    case Activation::none: return x;
    case Activation::relu: return ad::relu(x);
    case Activation::leaky_relu: return ad::leaky_relu(x, 0.2);
    case Activation::tanh: return ad::tanh(x);
    case Activation::sigmoid: return ad::sigmoid(x);
  }
  throw std::invalid_argument("unknown activation");
}

/// Parameters of a Network placed on a tape for one forward/backward pass.
struct Bound {
  std::vector<Var> vars;
  bool trainable = false;
};

/// A feed-forward stack of dense/conv layers. Layer k owns parameters
/// 2k (weights/filters) and 2k+1 (bias).
class Network {
 public:
  Network() = default;

  Network(std::vector<LayerSpec> layers, ParameterSet params) : layers_(std::move(layers)), params_(std::move(params)) {
    if (params_.size() != 2 * layers_.size()) throw std::invalid_argument("network: expected two parameters per layer");
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      if (params_[2 * k].value.shape() != layers_[k].weight_shape() ||
          params_[2 * k + 1].value.shape() != layers_[k].bias_shape()) {
        throw ShapeError("network: parameters of layer " + std::to_string(k) + " do not match its descriptor");
      }
    }
  }

  /// Weights N(0, init_std^2), biases zero.
  static Network build(std::vector<LayerSpec> layers, Rng& rng, double init_std = 0.02) {
    ParameterSet params;
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const std::string tag = (layers[k].kind == LayerKind::dense ? "dense" : "conv") + std::to_string(k);
      params.add(tag + ".weight", init_params(layers[k].weight_shape(), rng, InitScheme::normal, init_std));
      params.add(tag + ".bias", Tensor(layers[k].bias_shape()));
    }
    return Network(std::move(layers), std::move(params));
  }

  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }

  Bound bind(Tape& tape, bool trainable) const {
    Bound b;
    b.trainable = trainable;
    b.vars.reserve(params_.size());
    for (const auto& p : params_) b.vars.push_back(tape.leaf(p.value, trainable));
    return b;
  }

  Var forward(const Bound& bound, Var x) const {
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const LayerSpec& spec = layers_[k];
      x = spec.kind == LayerKind::dense ? dense_forward(bound.vars[2 * k], bound.vars[2 * k + 1], x)
                                        : conv_forward(bound.vars[2 * k], bound.vars[2 * k + 1], x);
      x = activate(x, spec.activation);
    }
    return x;
  }

  /// Copies tape gradients of a trainable binding into the parameter set.
  void accumulate_grads(const Bound& bound) {
    if (!bound.trainable) return;
    for (std::size_t i = 0; i < params_.size(); ++i) params_.accumulate(i, bound.vars[i].grad());
  }

 private:
  std::vector<LayerSpec> layers_;
  ParameterSet params_;
};

}  // namespace blindinv::nn
