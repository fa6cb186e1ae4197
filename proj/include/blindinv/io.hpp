#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "tensor.hpp"

namespace blindinv::io {

using json = nlohmann::ordered_json;

/// Raw little-endian float32 payload.
inline void write_f32(const std::filesystem::path& path, std::span<const double> values) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::vector<char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    for (int b = 0; b < 4; ++b) bytes[4 * i + static_cast<std::size_t>(b)] = static_cast<char>(bits >> (8 * b));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<double> read_f32(const std::filesystem::path& path, std::size_t expected_count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != expected_count * 4) {
    throw std::runtime_error("payload '" + path.string() + "' has " + std::to_string(bytes.size()) +
                             " bytes, expected " + std::to_string(expected_count * 4));
  }
  std::vector<double> values(expected_count);
  for (std::size_t i = 0; i < expected_count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[4 * i + static_cast<std::size_t>(b)]) << (8 * b);
    values[i] = std::bit_cast<float>(bits);
  }
  return values;
}

/// Concatenates equally shaped tensors into one payload.
inline void write_tensors(const std::filesystem::path& path, std::span<const Tensor> tensors) {
  std::vector<double> flat;
  for (const Tensor& t : tensors) flat.insert(flat.end(), t.data().begin(), t.data().end());
  write_f32(path, flat);
}

inline std::vector<Tensor> read_tensors(const std::filesystem::path& path, std::size_t count, const Shape& shape) {
  const std::size_t each = shape_size(shape);
  const std::vector<double> flat = read_f32(path, count * each);
  std::vector<Tensor> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.emplace_back(shape, std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(i * each),
                                                flat.begin() + static_cast<std::ptrdiff_t>((i + 1) * each)));
  }
  return out;
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed JSON in '" + path.string() + "': " + e.what());
  }
}

inline json shape_json(const Shape& s) { return json(std::vector<std::size_t>(s.begin(), s.end())); }

inline Shape shape_from_json(const json& j) { return j.get<std::vector<std::size_t>>(); }

}  // namespace blindinv::io
