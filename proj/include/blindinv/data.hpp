#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gan.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace blindinv {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ------------------------------------------------------------------- IDX

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;

namespace detail {

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t pos) {
  return (std::uint32_t{b[pos]} << 24) | (std::uint32_t{b[pos + 1]} << 16) | (std::uint32_t{b[pos + 2]} << 8) |
         std::uint32_t{b[pos + 3]};
}

inline std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Pads a [1 x H x W] image with `fill` to [1 x H' x W'] (centered) and 2x2 mean-pools it.
inline Tensor pad_and_pool(const Tensor& img, std::size_t padded_h, std::size_t padded_w, double fill) {
  const std::size_t h = img.dim(1), w = img.dim(2);
  const std::size_t top = (padded_h - h) / 2, left = (padded_w - w) / 2;
  Tensor padded(Shape{padded_h, padded_w}, fill);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) padded.at(top + y, left + x) = img[y * w + x];
  }
  Tensor out(Shape{1, padded_h / 2, padded_w / 2});
  for (std::size_t y = 0; y < padded_h / 2; ++y) {
    for (std::size_t x = 0; x < padded_w / 2; ++x) {
      out[y * (padded_w / 2) + x] = 0.25 * (padded.at(2 * y, 2 * x) + padded.at(2 * y + 1, 2 * x) +
                                            padded.at(2 * y, 2 * x + 1) + padded.at(2 * y + 1, 2 * x + 1));
    }
  }
  return out;
}

}  // namespace detail

/// IDX image archive (u8 pixels) rescaled to [-1, 1] as [1 x H x W] tensors.
/// With `downsample_to_16`, 28x28 images are padded to 32x32 with background
/// and 2x2 mean pooled to 16x16.
inline std::vector<Tensor> load_idx(const std::filesystem::path& path, bool downsample_to_16 = false,
                                    std::size_t limit = 0) {
  const auto bytes = detail::slurp(path);
  if (bytes.size() < 16) throw FormatError("IDX file '" + path.string() + "' is shorter than its header");
  const std::uint32_t magic = detail::read_be32(bytes, 0);
  if (magic != kIdxImageMagic) {
    std::ostringstream os;
    os << "IDX file '" << path.string() << "' has magic 0x" << std::hex << magic << ", expected 0x803";
    throw FormatError(os.str());
  }
  const std::size_t count = detail::read_be32(bytes, 4);
  const std::size_t rows = detail::read_be32(bytes, 8);
  const std::size_t cols = detail::read_be32(bytes, 12);
  if (rows == 0 || cols == 0) throw FormatError("IDX file '" + path.string() + "' has zero-sized images");
  const std::size_t expected = 16 + count * rows * cols;
  if (bytes.size() < expected) {
    throw FormatError("IDX file '" + path.string() + "' is truncated: expected " + std::to_string(expected) +
                      " bytes, got " + std::to_string(bytes.size()));
  }
  if (downsample_to_16 && (rows > 32 || cols > 32)) {
    throw FormatError("IDX downsampling supports images up to 32x32");
  }
  const std::size_t n = limit ? std::min(limit, count) : count;
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    Tensor img(Shape{1, rows, cols});
    for (std::size_t i = 0; i < rows * cols; ++i) img[i] = bytes[16 + k * rows * cols + i] / 127.5 - 1.0;
    out.push_back(downsample_to_16 ? detail::pad_and_pool(img, 32, 32, -1.0) : std::move(img));
  }
  return out;
}

/// Writes u8 images ([1 x H x W] or [H x W], values in [-1, 1]) as an IDX archive.
inline void save_idx(const std::filesystem::path& path, const std::vector<Tensor>& images) {
  if (images.empty()) throw std::invalid_argument("save_idx: no images");
  const Tensor& first = images.front();
  const std::size_t h = first.dim(first.rank() - 2), w = first.dim(first.rank() - 1);
  std::vector<char> bytes;
  const auto be32 = [&bytes](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) bytes.push_back(static_cast<char>((v >> s) & 0xFF));
  };
  be32(kIdxImageMagic);
  be32(static_cast<std::uint32_t>(images.size()));
  be32(static_cast<std::uint32_t>(h));
  be32(static_cast<std::uint32_t>(w));
  for (const Tensor& img : images) {
    if (img.size() != h * w) throw ShapeError("save_idx: images differ in size");
    for (double v : img.data()) {
      bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::floor((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5 + 0.5))));
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// ------------------------------------------------------------------- PGM

inline unsigned char quantize(double v) {
  return static_cast<unsigned char>(std::floor((std::clamp(v, -1.0, 1.0) + 1.0) / 2.0 * 255.0 + 0.5));
}

inline double dequantize(unsigned char q) { return q / 255.0 * 2.0 - 1.0; }

/// Binary P5, maxval 255. Channels of a [C x H x W] image are stacked vertically.
inline void save_pgm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() < 2 || image.rank() > 3) throw ShapeError("save_pgm: expected an image, got " + to_string(image.shape()));
  const std::size_t w = image.dim(image.rank() - 1);
  const std::size_t h = image.size() / w;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << "P5\n" << w << ' ' << h << "\n255\n";
  std::vector<char> pixels(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) pixels[i] = static_cast<char>(quantize(image[i]));
  out.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
}

/// Reads a binary P5 (maxval 255) as [1 x H x W] in [-1, 1].
inline Tensor load_pgm(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  std::size_t pos = 0;
  const auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  const auto number = [&]() -> std::size_t {
    skip_space();
    std::size_t v = 0;
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0');
    if (pos == start) throw FormatError("PGM '" + path.string() + "': malformed header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw FormatError("PGM '" + path.string() + "': not a P5 file");
  pos = 2;
  const std::size_t w = number(), h = number(), maxval = number();
  if (maxval != 255) throw FormatError("PGM '" + path.string() + "': only maxval 255 is supported");
  if (w == 0 || h == 0) throw FormatError("PGM '" + path.string() + "': zero-sized image");
  ++pos;  // single whitespace after maxval
  if (bytes.size() < pos + w * h) {
    throw FormatError("PGM '" + path.string() + "' is truncated: expected " + std::to_string(pos + w * h) +
                      " bytes, got " + std::to_string(bytes.size()));
  }
  Tensor img(Shape{1, h, w});
  for (std::size_t i = 0; i < w * h; ++i) img[i] = dequantize(bytes[pos + i]);
  return img;
}

// ------------------------------------------------------- synthetic images

/// Cartoon faces with hard edges: background, elliptical head, optional hair,
/// two eyes and a mouth, with randomized geometry and intensity. Feature
/// sizes scale with the image height (designed for 16x16).
inline std::vector<Tensor> synthetic_faces(std::size_t count, const ImageShape& shape, Rng& rng) {
  const double s = static_cast<double>(shape.height) / 16.0;
  const double tint[3] = {1.0, 0.8, 0.65};
  std::vector<Tensor> out;
  out.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    const double cx = (static_cast<double>(shape.width) - 1.0) / 2.0 + rng.uniform(-1.0, 1.0) * s;
    const double cy = (static_cast<double>(shape.height) - 1.0) / 2.0 + rng.uniform(-1.0, 1.0) * s;
    const double rx = rng.uniform(4.5, 6.0) * s;
    const double ry = rng.uniform(5.5, 7.0) * s;
    const double background = rng.uniform(-1.0, -0.6);
    const double skin = rng.uniform(0.1, 0.9);
    const bool has_hair = rng.uniform01() < 0.5;
    const double hair_line = cy - ry * rng.uniform(0.4, 0.7);
    const double hair = rng.uniform(-0.9, -0.3);
    const double eye_dx = rng.uniform(2.0, 3.0) * s;
    const double eye_dy = rng.uniform(1.0, 2.0) * s;
    const double eye_r = rng.uniform(0.8, 1.4) * s;
    const double mouth_dy = rng.uniform(2.5, 3.5) * s;
    const double mouth_hw = rng.uniform(1.5, 3.0) * s;
    const double mouth_hh = 0.6 * s;

    Tensor img(shape.shape());
    for (std::size_t y = 0; y < shape.height; ++y) {
      for (std::size_t x = 0; x < shape.width; ++x) {
        const double px = static_cast<double>(x), py = static_cast<double>(y);
        const double ex = (px - cx) / rx, ey = (py - cy) / ry;
        bool in_face = false;
        double v = background;
        if (ex * ex + ey * ey <= 1.0) {
          v = skin;
          in_face = true;
          if (has_hair && py < hair_line) {
            v = hair;
            in_face = false;
          }
        }
        if (in_face) {
          for (double side : {-1.0, 1.0}) {
            const double dx = px - (cx + side * eye_dx), dy = py - (cy - eye_dy);
            if (dx * dx + dy * dy <= eye_r * eye_r) v = -0.8;
          }
          if (std::abs(py - (cy + mouth_dy)) <= mouth_hh && std::abs(px - cx) <= mouth_hw) v = -0.5;
        }
        for (std::size_t c = 0; c < shape.channels; ++c) {
          const double t = shape.channels == 1 ? 1.0 : tint[c % 3];
          const bool tinted = v == skin;
          img[(c * shape.height + y) * shape.width + x] = tinted ? std::clamp(skin * t, -1.0, 1.0) : v;
        }
      }
    }
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace blindinv
