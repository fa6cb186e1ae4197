#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "nn.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace blindinv {

struct ImageShape {
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;

  std::size_t size() const noexcept { return channels * height * width; }
  Shape shape() const { return {channels, height, width}; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

struct GanConfig {
  std::size_t latent_dim = 100;
  ImageShape image{};
  std::vector<std::size_t> generator_hidden{128, 256};
  std::vector<std::size_t> discriminator_hidden{256, 128};
  double init_std = 0.02;
};

/// Maps latent rows [B x T] to flattened images [B x C*H*W] in [-1, 1].
class Generator {
 public:
  Generator() = default;
  Generator(nn::Network net, std::size_t latent_dim, ImageShape image)
      : net_(std::move(net)), latent_dim_(latent_dim), image_(image) {}

  std::size_t latent_dim() const noexcept { return latent_dim_; }
  const ImageShape& image() const noexcept { return image_; }
  nn::Network& network() noexcept { return net_; }
  const nn::Network& network() const noexcept { return net_; }

  nn::Bound bind(ad::Tape& tape, bool trainable) const { return net_.bind(tape, trainable); }
  ad::Var forward(const nn::Bound& bound, ad::Var z) const { return net_.forward(bound, z); }
  ad::Var forward(ad::Tape& tape, ad::Var z) const { return forward(bind(tape, false), z); }

 private:
  nn::Network net_;
  std::size_t latent_dim_ = 0;
  ImageShape image_{};
};

/// Maps flattened images [B x M] to realness scores [B x 1] in (0, 1).
class Discriminator {
 public:
  Discriminator() = default;
  explicit Discriminator(nn::Network net) : net_(std::move(net)) {}

  nn::Network& network() noexcept { return net_; }
  const nn::Network& network() const noexcept { return net_; }

  nn::Bound bind(ad::Tape& tape, bool trainable) const { return net_.bind(tape, trainable); }
  ad::Var forward(const nn::Bound& bound, ad::Var images) const { return net_.forward(bound, images); }
  ad::Var forward(ad::Tape& tape, ad::Var images) const { return forward(bind(tape, false), images); }

 private:
  nn::Network net_;
};

struct GanModel {
  Generator generator;
  Discriminator discriminator;
};

/// dense(T->h1) leaky . dense(h1->h2) leaky . dense(h2->C*H*W) tanh
inline Generator build_generator(const GanConfig& cfg, Rng& rng) {
  std::vector<nn::LayerSpec> layers;
  std::size_t in = cfg.latent_dim;
  for (std::size_t h : cfg.generator_hidden) {
    layers.push_back(nn::LayerSpec::dense(h, in, nn::Activation::leaky_relu));
    in = h;
  }
  auto head = nn::LayerSpec::dense(cfg.image.size(), in, nn::Activation::tanh);
  head.dims[2] = static_cast<std::uint32_t>(cfg.image.height);
  head.dims[3] = static_cast<std::uint32_t>(cfg.image.width);
  layers.push_back(head);
  return Generator(nn::Network::build(std::move(layers), rng, cfg.init_std), cfg.latent_dim, cfg.image);
}

inline Discriminator build_discriminator(const GanConfig& cfg, Rng& rng) {
  std::vector<nn::LayerSpec> layers;
  std::size_t in = cfg.image.size();
  for (std::size_t h : cfg.discriminator_hidden) {
    layers.push_back(nn::LayerSpec::dense(h, in, nn::Activation::leaky_relu));
    in = h;
  }
  layers.push_back(nn::LayerSpec::dense(1, in, nn::Activation::sigmoid));
  return Discriminator(nn::Network::build(std::move(layers), rng, cfg.init_std));
}

/// G(z) for a single latent vector z [T]; returns [C x H x W].
inline Tensor sample(const Generator& gen, const Tensor& z) {
  if (z.size() != gen.latent_dim()) {
    throw ShapeError("sample: latent has " + std::to_string(z.size()) + " entries, generator expects " +
                     std::to_string(gen.latent_dim()));
  }
  ad::Tape tape;
  ad::Var x = gen.forward(tape, tape.constant(z.reshaped({1, z.size()})));
  return x.value().reshaped(gen.image().shape());
}

/// sum over rows of log(1 - D(x)), clamped below at log(1e-8).
inline ad::Var perceptual_loss(const Discriminator& disc, const nn::Bound& bound, ad::Var images) {
  ad::Var scores = disc.forward(bound, images);
  return ad::sum(ad::log_clamped(ad::add_scalar(ad::scalar_mul(scores, -1.0), 1.0)));
}

inline ad::Var perceptual_loss(ad::Tape& tape, const Discriminator& disc, ad::Var images) {
  return perceptual_loss(disc, disc.bind(tape, false), images);
}

/// Value-only form over a list of source batches, each [S x ...].
inline double perceptual_loss(const Discriminator& disc, std::span<const Tensor> batches) {
  double total = 0.0;
  for (const Tensor& batch : batches) {
    const std::size_t rows = batch.dim(0);
    ad::Tape tape;
    ad::Var x = tape.constant(batch.reshaped({rows, batch.size() / rows}));
    total += perceptual_loss(tape, disc, x).value().item();
  }
  return total;
}

struct GanTrainOptions {
  std::size_t epochs = 40;
  std::size_t batch = 64;
  double lr_g = 1e-3;
  double lr_d = 1e-3;
  double beta1 = 0.5;
};

struct TrainingLog {
  std::vector<double> discriminator_loss;  // per-epoch mean
  std::vector<double> generator_loss;      // per-epoch mean
  friend bool operator==(const TrainingLog&, const TrainingLog&) = default;
};

/// Latent rows for GAN sampling: i.i.d. U(-1, 1).
inline Tensor uniform_latents(std::size_t rows, std::size_t dim, Rng& rng) {
  Tensor z(Shape{rows, dim});
  for (double& v : z.data()) v = rng.uniform(-1.0, 1.0);
  return z;
}

/// Alternating updates per batch: one discriminator step on
/// -[log D(x) + log(1 - D(G(z)))], then one generator step on the
/// non-saturating loss -log D(G(z)). Batch order comes from `rng`.
inline TrainingLog gan_train(Generator& gen, Discriminator& disc, const std::vector<Tensor>& dataset,
                             const GanTrainOptions& opt, Rng& rng) {
  if (dataset.empty()) throw std::invalid_argument("gan_train: dataset is empty");
  if (opt.batch == 0) throw std::invalid_argument("gan_train: batch size must be positive");
  const std::size_t m = gen.image().size();
  for (const Tensor& img : dataset) {
    if (img.size() != m) {
      throw ShapeError("gan_train: dataset image " + to_string(img.shape()) + " does not match generator output " +
                       to_string(gen.image().shape()));
    }
  }

  TrainingLog log;
  nn::AdamState adam_g, adam_d;
  adam_g.beta1 = adam_d.beta1 = opt.beta1;
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.bounded(static_cast<std::uint32_t>(i))]);
    }
    double d_total = 0.0;
    double g_total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch) {
      const std::size_t b = std::min(opt.batch, order.size() - start);
      Tensor real(Shape{b, m});
      for (std::size_t r = 0; r < b; ++r) {
        const auto src = dataset[order[start + r]].data();
        std::copy(src.begin(), src.end(), real.data().begin() + static_cast<std::ptrdiff_t>(r * m));
      }
      const double scale = -1.0 / static_cast<double>(b);

      double d_loss = 0.0;
      {
        ad::Tape tape;
        ad::Var fake = gen.forward(tape, tape.constant(uniform_latents(b, gen.latent_dim(), rng)));
        nn::Bound bound = disc.bind(tape, true);
        ad::Var real_term = ad::sum(ad::log_clamped(disc.forward(bound, tape.constant(real))));
        ad::Var fake_scores = disc.forward(bound, fake);
        ad::Var fake_term = ad::sum(ad::log_clamped(ad::add_scalar(ad::scalar_mul(fake_scores, -1.0), 1.0)));
        ad::Var loss = ad::scalar_mul(ad::add(real_term, fake_term), scale);
        tape.backward(loss);
        disc.network().accumulate_grads(bound);
        nn::adam_step(disc.network().params(), adam_d, opt.lr_d);
        nn::zero_grads(disc.network().params());
        d_loss = loss.value().item();
      }

      double g_loss = 0.0;
      {
        ad::Tape tape;
        nn::Bound bound = gen.bind(tape, true);
        ad::Var fake = gen.forward(bound, tape.constant(uniform_latents(b, gen.latent_dim(), rng)));
        ad::Var loss = ad::scalar_mul(ad::sum(ad::log_clamped(disc.forward(tape, fake))), scale);
        tape.backward(loss);
        gen.network().accumulate_grads(bound);
        nn::adam_step(gen.network().params(), adam_g, opt.lr_g);
        nn::zero_grads(gen.network().params());
        g_loss = loss.value().item();
      }

      if (!std::isfinite(d_loss) || !std::isfinite(g_loss)) {
        throw NumericalError("gan_train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batches));
      }
      d_total += d_loss;
      g_total += g_loss;
      ++batches;
    }
    log.discriminator_loss.push_back(d_total / static_cast<double>(batches));
    log.generator_loss.push_back(g_total / static_cast<double>(batches));
  }
  return log;
}

// ---------------------------------------------------------------- checkpoints
//
// Little-endian: "GPRI", u32 version, u32 latent_dim, u32 layer_count, then
// per layer {u8 kind, u8 activation, u32 dims[4]}, then every parameter as
// float32 in declaration order (weights then bias, layer by layer).
// Generator layers come first and end with the first tanh-activated layer;
// that layer's dims[2..3] hold the image height and width.

namespace checkpoint {

inline constexpr char kMagic[4] = {'G', 'P', 'R', 'I'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 16;
inline constexpr std::size_t kLayerBytes = 18;

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void raw(std::span<const char> s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint8_t u8() { return bytes_[pos_++]; }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::size_t position() const noexcept { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to '" + path.string() + "'");
}

/// Encodes an arbitrary list of networks as one layer stream.
inline std::vector<std::uint8_t> encode(std::uint32_t latent_dim, std::span<const nn::Network* const> nets) {
  Writer w;
  w.raw(kMagic);
  w.u32(kVersion);
  w.u32(latent_dim);
  std::uint32_t count = 0;
  for (const auto* net : nets) count += static_cast<std::uint32_t>(net->layers().size());
  w.u32(count);
  for (const auto* net : nets) {
    for (const auto& spec : net->layers()) {
      w.u8(static_cast<std::uint8_t>(spec.kind));
      w.u8(static_cast<std::uint8_t>(spec.activation));
      for (std::uint32_t d : spec.dims) w.u32(d);
    }
  }
  for (const auto* net : nets) {
    for (const auto& p : net->params()) {
      for (double v : p.value.data()) w.f32(v);
    }
  }
  return w.bytes();
}

struct Decoded {
  std::uint32_t latent_dim = 0;
  std::vector<nn::LayerSpec> layers;
  std::vector<Tensor> params;  // two per layer
};

inline Decoded decode(std::span<const std::uint8_t> bytes, const std::string& origin) {
  const auto truncated = [&](std::size_t expected) {
    return std::runtime_error("checkpoint '" + origin + "' is truncated: expected " + std::to_string(expected) +
                              " bytes, got " + std::to_string(bytes.size()));
  };
  if (bytes.size() < kHeaderBytes) {
    if (bytes.size() >= 4 && std::memcmp(bytes.data(), kMagic, 4) != 0) {
      throw std::runtime_error("checkpoint '" + origin + "' has bad magic (expected GPRI)");
    }
    throw truncated(kHeaderBytes);
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw std::runtime_error("checkpoint '" + origin + "' has bad magic (expected GPRI)");
  }
  Reader r(bytes.subspan(4));
  Decoded out;
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw std::runtime_error("checkpoint '" + origin + "' has unsupported version " + std::to_string(version));
  }
  out.latent_dim = r.u32();
  const std::uint32_t count = r.u32();
  const std::size_t layer_end = kHeaderBytes + static_cast<std::size_t>(count) * kLayerBytes;
  if (bytes.size() < layer_end) throw truncated(layer_end);

  std::size_t scalars = 0;
  for (std::uint32_t k = 0; k < count; ++k) {
    nn::LayerSpec spec;
    const std::uint8_t kind = r.u8();
    const std::uint8_t act = r.u8();
    if (kind > 1) throw std::runtime_error("checkpoint '" + origin + "': unknown layer kind " + std::to_string(kind));
    if (act > 4) throw std::runtime_error("checkpoint '" + origin + "': unknown activation " + std::to_string(act));
    spec.kind = static_cast<nn::LayerKind>(kind);
    spec.activation = static_cast<nn::Activation>(act);
    for (auto& d : spec.dims) d = r.u32();
    if (spec.dims[0] == 0 || spec.dims[1] == 0 ||
        (spec.kind == nn::LayerKind::conv2d && (spec.dims[2] == 0 || spec.dims[3] == 0))) {
      throw std::runtime_error("checkpoint '" + origin + "': layer " + std::to_string(k) + " has a zero dimension");
    }
    scalars += shape_size(spec.weight_shape()) + shape_size(spec.bias_shape());
    out.layers.push_back(spec);
  }
  const std::size_t expected = layer_end + 4 * scalars;
  if (bytes.size() < expected) throw truncated(expected);
  if (bytes.size() > expected) {
    throw std::runtime_error("checkpoint '" + origin + "' has trailing data: expected " + std::to_string(expected) +
                             " bytes, got " + std::to_string(bytes.size()));
  }
  for (const auto& spec : out.layers) {
    for (const Shape& s : {spec.weight_shape(), spec.bias_shape()}) {
      Tensor t(s);
      for (double& v : t.data()) v = r.f32();
      out.params.push_back(std::move(t));
    }
  }
  return out;
}

/// Network made of layers [first, last) of a decoded stream.
inline nn::Network slice(const Decoded& d, std::size_t first, std::size_t last) {
  std::vector<nn::LayerSpec> layers(d.layers.begin() + static_cast<std::ptrdiff_t>(first),
                                    d.layers.begin() + static_cast<std::ptrdiff_t>(last));
  nn::ParameterSet params;
  for (std::size_t k = first; k < last; ++k) {
    const std::string tag = (d.layers[k].kind == nn::LayerKind::dense ? "dense" : "conv") + std::to_string(k - first);
    params.add(tag + ".weight", d.params[2 * k]);
    params.add(tag + ".bias", d.params[2 * k + 1]);
  }
  return nn::Network(std::move(layers), std::move(params));
}

}  // namespace checkpoint

inline std::vector<std::uint8_t> encode_checkpoint(const Generator& gen, const Discriminator& disc) {
  const nn::Network* nets[] = {&gen.network(), &disc.network()};
  return checkpoint::encode(static_cast<std::uint32_t>(gen.latent_dim()), nets);
}

inline GanModel decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>") {
  const checkpoint::Decoded d = checkpoint::decode(bytes, origin);
  std::size_t split = 0;
  while (split < d.layers.size() && d.layers[split].activation != nn::Activation::tanh) ++split;
  if (split == d.layers.size()) {
    throw std::runtime_error("checkpoint '" + origin + "': no tanh-activated generator head layer");
  }
  const nn::LayerSpec& head = d.layers[split];
  if (head.kind != nn::LayerKind::dense || head.dims[2] == 0 || head.dims[3] == 0 ||
      head.dims[0] % (head.dims[2] * head.dims[3]) != 0) {
    throw std::runtime_error("checkpoint '" + origin + "': generator head does not describe an image shape");
  }
  const ImageShape image{head.dims[0] / (head.dims[2] * head.dims[3]), head.dims[2], head.dims[3]};
  if (d.layers.front().dims[1] != d.latent_dim) {
    throw std::runtime_error("checkpoint '" + origin + "': first generator layer does not consume latent_dim inputs");
  }
  GanModel model{Generator(checkpoint::slice(d, 0, split + 1), d.latent_dim, image),
                 Discriminator(checkpoint::slice(d, split + 1, d.layers.size()))};
  if (model.discriminator.network().layers().empty()) {
    throw std::runtime_error("checkpoint '" + origin + "': missing discriminator layers");
  }
  return model;
}

inline void save_checkpoint(const std::filesystem::path& path, const Generator& gen, const Discriminator& disc) {
  checkpoint::write_file(path, encode_checkpoint(gen, disc));
}

inline GanModel load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(checkpoint::read_file(path), path.string());
}

}  // namespace blindinv
