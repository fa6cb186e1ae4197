#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "tensor.hpp"

namespace blindinv {

inline constexpr double kPsnrCap = 99.0;

inline double mse(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("mse: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

/// Mean absolute difference.
inline double mean_abs_error(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("mean_abs_error: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

/// 10 log10(peak^2 / mse), capped at 99 dB (identical inputs included).
inline double psnr(const Tensor& a, const Tensor& b, double peak = 2.0) {
  const double e = mse(a, b);
  if (e == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / e));
}

/// Zero-mean, unit-variance copy. Constant inputs are only centered.
inline Tensor standardized(const Tensor& t) {
  const double n = static_cast<double>(t.size());
  const double mean = std::accumulate(t.data().begin(), t.data().end(), 0.0) / n;
  double var = 0.0;
  for (double v : t.data()) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  Tensor out = t;
  for (double& v : out.data()) v = sd > 0.0 ? (v - mean) / sd : v - mean;
  return out;
}

/// Zero-mean normalized cross-correlation, in [-1, 1].
inline double ncc(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("ncc: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.data().begin(), a.data().end(), 0.0) / n;
  const double mb = std::accumulate(b.data().begin(), b.data().end(), 0.0) / n;
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += (a[i] - ma) * (b[i] - mb);
    aa += (a[i] - ma) * (a[i] - ma);
    bb += (b[i] - mb) * (b[i] - mb);
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

struct SourceMatch {
  std::vector<std::size_t> permutation;  // truth i is matched with est[permutation[i]]
  std::vector<double> scores;            // normalized MSE per truth source
  std::vector<bool> flipped;             // sign flip applied per truth source
  double total = 0.0;

  double mean_score() const { return scores.empty() ? 0.0 : total / static_cast<double>(scores.size()); }
};

inline constexpr std::size_t kMaxMatchedSources = 5;

/// Best assignment of estimated to true sources over all S! permutations,
/// comparing standardized intensities. `allow_sign_flip` also tries -est.
inline SourceMatch match_sources(std::span<const Tensor> est, std::span<const Tensor> truth, bool allow_sign_flip = false) {
  const std::size_t s = truth.size();
  if (est.size() != s) throw std::invalid_argument("match_sources: estimate and truth counts differ");
  if (s == 0 || s > kMaxMatchedSources) throw std::invalid_argument("match_sources: need 1 to 5 sources");

  std::vector<Tensor> e, t;
  for (const Tensor& x : est) e.push_back(standardized(x));
  for (const Tensor& x : truth) t.push_back(standardized(x));

  // cost[i][k]: truth i vs est k
  std::vector<std::vector<double>> cost(s, std::vector<double>(s));
  std::vector<std::vector<bool>> flip(s, std::vector<bool>(s, false));
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t k = 0; k < s; ++k) {
      cost[i][k] = mse(t[i], e[k]);
      if (allow_sign_flip) {
        Tensor neg = e[k];
        for (double& v : neg.data()) v = -v;
        const double c = mse(t[i], neg);
        if (c < cost[i][k]) {
          cost[i][k] = c;
          flip[i][k] = true;
        }
      }
    }
  }

  std::vector<std::size_t> perm(s);
  std::iota(perm.begin(), perm.end(), 0);
  SourceMatch best;
  best.total = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (std::size_t i = 0; i < s; ++i) total += cost[i][perm[i]];
    if (total < best.total) {
      best.total = total;
      best.permutation = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));

  for (std::size_t i = 0; i < s; ++i) {
    best.scores.push_back(cost[i][best.permutation[i]]);
    best.flipped.push_back(flip[i][best.permutation[i]]);
  }
  return best;
}

}  // namespace blindinv
