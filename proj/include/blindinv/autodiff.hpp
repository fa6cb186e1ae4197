#pragma once

// Define-by-run reverse-mode automatic differentiation over Tensor values.
//
// A Tape records every operation in insertion order; parents always precede
// their children, so backward() is a single sweep in reverse insertion order.
// Tapes are cheap and are rebuilt for every forward pass.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace blindinv::ad {

class Tape;

/// Handle to a node on a Tape. Copyable, does not own anything.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) noexcept : tape_(tape), id_(id) {}

  Tape& tape() const noexcept { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Receives the adjoint of node `self` and accumulates into parent adjoints.
/// Entries of `parent_grads` are null for parents that do not need gradients.
using BackwardFn =
    std::function<void(const Tape&, std::size_t self, const Tensor& out_grad, std::span<Tensor* const> parent_grads)>;

struct Node {
  Tensor value;
  Tensor grad;  // accumulated across backward() calls; empty until first touched
  std::string_view op;
  std::vector<std::size_t> parents;
  BackwardFn backward;
  bool requires_grad = false;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that receives gradients.
  Var variable(Tensor value) { return leaf(std::move(value), true); }
  /// Leaf that does not.
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var leaf(Tensor value, bool requires_grad) {
    check_finite(value, "leaf");
    Node n;
    n.value = std::move(value);
    n.op = "leaf";
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Var push(std::string_view op, Tensor value, std::initializer_list<Var> parents, BackwardFn backward) {
    check_finite(value, op);
    Node n;
    n.value = std::move(value);
    n.op = op;
    n.parents.reserve(parents.size());
    for (const Var& p : parents) {
      if (&p.tape() != this) throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
      n.parents.push_back(p.id());
      n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  std::size_t size() const noexcept { return nodes_.size(); }

  const Tensor& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  /// Accumulates d(root)/d(node) into the grad of every ancestor of root.
  /// Calling twice without resetting doubles every gradient.
  void backward(Var root) {
    if (&root.tape() != this) throw std::invalid_argument("backward: root belongs to another tape");
    const Node& r = nodes_.at(root.id());
    if (r.value.size() != 1) {
      throw ShapeError("backward requires a scalar root, got shape " + to_string(r.value.shape()));
    }
    if (!r.requires_grad) return;

    std::vector<Tensor> adjoint(root.id() + 1);
    adjoint[root.id()] = Tensor(r.value.shape(), 1.0);
    std::vector<Tensor*> parent_ptrs;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      const Node& n = nodes_[i];
      if (adjoint[i].empty() || !n.backward) continue;
      parent_ptrs.assign(n.parents.size(), nullptr);
      for (std::size_t k = 0; k < n.parents.size(); ++k) {
        const std::size_t p = n.parents[k];
        if (!nodes_[p].requires_grad) continue;
        if (adjoint[p].empty()) adjoint[p] = Tensor(nodes_[p].value.shape());
        parent_ptrs[k] = &adjoint[p];
      }
      n.backward(*this, i, adjoint[i], parent_ptrs);
    }
    for (std::size_t i = 0; i <= root.id(); ++i) {
      if (adjoint[i].empty()) continue;
      Node& n = nodes_[i];
      if (n.grad.empty()) {
        n.grad = std::move(adjoint[i]);
      } else {
        n.grad += adjoint[i];
      }
    }
  }

  void zero_grads() {
    for (Node& n : nodes_) n.grad = Tensor();
  }

 private:
  static void check_finite(const Tensor& t, std::string_view op) {
    if (!t.all_finite()) throw NumericalError("non-finite value produced by '" + std::string(op) + "'");
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }
inline bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline ConstMatrixMap as_matrix(const Tensor& t) {
  return ConstMatrixMap(t.data().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
}
inline MatrixMap as_matrix(Tensor& t) {
  return MatrixMap(t.data().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
}

inline void require_same(const Var& a, const Var& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

inline bool is_row_bias(const Shape& a, const Shape& b) {
  return b.size() == 1 && a.size() >= 2 && b[0] == a.back();
}

// Sums `g` into a row bias gradient (sum over all leading dims).
inline void reduce_rows_into(const Tensor& g, Tensor& out) {
  const std::size_t width = out.size();
  for (std::size_t i = 0; i < g.size(); ++i) out[i % width] += g[i];
}

template <class Forward, class Derivative>
Var unary(Var a, std::string_view op, Forward f, Derivative df) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return a.tape().push(op, std::move(y), {a},
                       [ai = a.id(), df](const Tape& t, std::size_t self, const Tensor& g, std::span<Tensor* const> pg) {
                         const Tensor& xv = t.value(ai);
                         const Tensor& yv = t.value(self);
                         Tensor& gx = *pg[0];
                         for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
                       });
}

// Geometry of a same-size, stride-1, zero-padded correlation.
struct ConvGeometry {
  std::size_t c_in, c_out, h, w, kh, kw, ah, aw;

  static ConvGeometry of(const Shape& x, const Shape& f) {
    if (x.size() != 3 || f.size() != 4 || f[1] != x[0]) {
      throw ShapeError("conv2d_same: input " + to_string(x) + " incompatible with filters " + to_string(f) +
                       " (expected [C_in x H x W] and [C_out x C_in x kh x kw])");
    }
    return {x[0], f[0], x[1], x[2], f[2], f[3], f[2] / 2, f[3] / 2};
  }

  // Output rows y for which input row y + i - ah is inside the image.
  std::pair<std::size_t, std::size_t> rows(std::size_t i) const { return span(i, ah, h); }
  std::pair<std::size_t, std::size_t> cols(std::size_t j) const { return span(j, aw, w); }

 private:
  static std::pair<std::size_t, std::size_t> span(std::size_t tap, std::size_t anchor, std::size_t extent) {
    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(tap) - static_cast<std::ptrdiff_t>(anchor);
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -off);
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(extent),
                                                       static_cast<std::ptrdiff_t>(extent) - off);
    if (hi <= lo) return {0, 0};
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
  }
};

}  // namespace detail

/// out[o,y,x] = sum_{c,i,j} f[o,c,i,j] * x[c, y+i-kh/2, x+j-kw/2], zero outside the image.
inline Tensor conv2d_same_values(const Tensor& x, const Tensor& f) {
  const auto g = detail::ConvGeometry::of(x.shape(), f.shape());
  Tensor out(Shape{g.c_out, g.h, g.w});
  const double* xs = x.data().data();
  const double* fs = f.data().data();
  double* os = out.data().data();
  for (std::size_t o = 0; o < g.c_out; ++o) {
    for (std::size_t c = 0; c < g.c_in; ++c) {
      for (std::size_t i = 0; i < g.kh; ++i) {
        const auto [y0, y1] = g.rows(i);
        for (std::size_t j = 0; j < g.kw; ++j) {
          const double wgt = fs[((o * g.c_in + c) * g.kh + i) * g.kw + j];
          if (wgt == 0.0) continue;
          const auto [x0, x1] = g.cols(j);
          for (std::size_t y = y0; y < y1; ++y) {
            double* orow = os + (o * g.h + y) * g.w;
            const double* irow = xs + (c * g.h + y + i - g.ah) * g.w + j - g.aw;
            for (std::size_t xx = x0; xx < x1; ++xx) orow[xx] += wgt * irow[xx];
          }
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- arithmetic

/// Elementwise a + b. b may also be a 1-D bias matching a's last dimension.
inline Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() == bv.shape()) {
    Tensor y = av;
    y += bv;
    return a.tape().push("add", std::move(y), {a, b},
                         [](const Tape&, std::size_t, const Tensor& g, std::span<Tensor* const> pg) {
                           if (pg[0]) *pg[0] += g;
                           if (pg[1]) *pg[1] += g;
                         });
  }
  if (!detail::is_row_bias(av.shape(), bv.shape())) {
    throw ShapeError("add: shape mismatch " + to_string(av.shape()) + " vs " + to_string(bv.shape()));
  }
  Tensor y = av;
  const std::size_t width = bv.size();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i % width];
  return a.tape().push("add_bias", std::move(y), {a, b},
                       [](const Tape&, std::size_t, const Tensor& g, std::span<Tensor* const> pg) {
                         if (pg[0]) *pg[0] += g;
                         if (pg[1]) detail::reduce_rows_into(g, *pg[1]);
                       });
}

inline Var sub(Var a, Var b) {
  detail::require_same(a, b, "sub");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return a.tape().push("sub", std::move(y), {a, b},
                       [](const Tape&, std::size_t, const Tensor& g, std::span<Tensor* const> pg) {
                         if (pg[0]) *pg[0] += g;
                         if (pg[1]) {
                           Tensor& gb = *pg[1];
                           for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                         }
                       });
}

inline Var mul_elem(Var a, Var b) {
  detail::require_same(a, b, "mul_elem");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return a.tape().push("mul_elem", std::move(y), {a, b},
                       [ai = a.id(), bi = b.id()](const Tape& t, std::size_t, const Tensor& g,
                                                  std::span<Tensor* const> pg) {
                         const Tensor& av = t.value(ai);
                         const Tensor& bv = t.value(bi);
                         if (pg[0]) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * bv[i];
                         }
                         if (pg[1]) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i] * av[i];
                         }
                       });
}

inline Var scalar_mul(Var a, double c) {
  return detail::unary(
      a, "scalar_mul", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_scalar(Var a, double c) {
  return detail::unary(
      a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

/// [m x k] . [k x n] -> [m x n]
inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + to_string(av.shape()) + " by " + to_string(bv.shape()));
  }
  Tensor y(Shape{av.dim(0), bv.dim(1)});
  detail::as_matrix(y).noalias() = detail::as_matrix(av) * detail::as_matrix(bv);
  return a.tape().push("matmul", std::move(y), {a, b},
                       [ai = a.id(), bi = b.id()](const Tape& t, std::size_t, const Tensor& g,
                                                  std::span<Tensor* const> pg) {
                         const auto gm = detail::as_matrix(g);
                         if (pg[0]) detail::as_matrix(*pg[0]).noalias() += gm * detail::as_matrix(t.value(bi)).transpose();
                         if (pg[1]) detail::as_matrix(*pg[1]).noalias() += detail::as_matrix(t.value(ai)).transpose() * gm;
                       });
}

inline Var transpose(Var a) {
  const Tensor& av = a.value();
  if (av.rank() != 2) throw ShapeError("transpose needs a matrix, got " + to_string(av.shape()));
  Tensor y(Shape{av.dim(1), av.dim(0)});
  detail::as_matrix(y) = detail::as_matrix(av).transpose();
  return a.tape().push("transpose", std::move(y), {a},
                       [](const Tape&, std::size_t, const Tensor& g, std::span<Tensor* const> pg) {
                         detail::as_matrix(*pg[0]) += detail::as_matrix(g).transpose();
                       });
}

inline Var reshape(Var a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return a.tape().push("reshape", std::move(y), {a},
                       [](const Tape&, std::size_t, const Tensor& g, std::span<Tensor* const> pg) {
                         Tensor& ga = *pg[0];
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                       });
}

/// Rows [start, start + count) along the leading dimension.
inline Var slice_rows(Var a, std::size_t start, std::size_t count) {
  const Tensor& av = a.value();
  if (av.rank() == 0 || count == 0 || start + count > av.dim(0)) {
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + to_string(av.shape()));
  }
  Shape shape = av.shape();
  const std::size_t stride = av.size() / shape[0];
  shape[0] = count;
  std::vector<double> data(av.data().begin() + static_cast<std::ptrdiff_t>(start * stride),
                           av.data().begin() + static_cast<std::ptrdiff_t>((start + count) * stride));
  return a.tape().push("slice_rows", Tensor(std::move(shape), std::move(data)), {a},
                       [offset = start * stride](const Tape&, std::size_t, const Tensor& g,
                                                 std::span<Tensor* const> pg) {
                         Tensor& ga = *pg[0];
                         for (std::size_t i = 0; i < g.size(); ++i) ga[offset + i] += g[i];
                       });
}

// ------------------------------------------------------------- convolution

/// Same-size, stride-1, zero-padded correlation. Even kernels anchor at
/// (kh/2, kw/2), the lower-right of the four central taps.
inline Var conv2d_same(Var x, Var filters) {
  Tensor y = conv2d_same_values(x.value(), filters.value());
  return x.tape().push(
      "conv2d_same", std::move(y), {x, filters},
      [xi = x.id(), fi = filters.id()](const Tape& t, std::size_t, const Tensor& gout, std::span<Tensor* const> pg) {
        const Tensor& xv = t.value(xi);
        const Tensor& fv = t.value(fi);
        const auto g = detail::ConvGeometry::of(xv.shape(), fv.shape());
        const double* xs = xv.data().data();
        const double* fs = fv.data().data();
        const double* gs = gout.data().data();
        for (std::size_t o = 0; o < g.c_out; ++o) {
          for (std::size_t c = 0; c < g.c_in; ++c) {
            for (std::size_t i = 0; i < g.kh; ++i) {
              const auto [y0, y1] = g.rows(i);
              for (std::size_t j = 0; j < g.kw; ++j) {
                const std::size_t tap = ((o * g.c_in + c) * g.kh + i) * g.kw + j;
                const auto [x0, x1] = g.cols(j);
                if (x1 <= x0) continue;
                const auto n = static_cast<Eigen::Index>(x1 - x0);
                if (pg[1]) {
                  double acc = 0.0;
                  for (std::size_t yy = y0; yy < y1; ++yy) {
                    const double* grow = gs + (o * g.h + yy) * g.w + x0;
                    const double* irow = xs + (c * g.h + yy + i - g.ah) * g.w + x0 + j - g.aw;
                    acc += Eigen::Map<const Eigen::VectorXd>(grow, n).dot(Eigen::Map<const Eigen::VectorXd>(irow, n));
                  }
                  (*pg[1])[tap] += acc;
                }
                if (pg[0]) {
                  const double wgt = fs[tap];
                  if (wgt == 0.0) continue;
                  double* xg = pg[0]->data().data();
                  for (std::size_t yy = y0; yy < y1; ++yy) {
                    const double* grow = gs + (o * g.h + yy) * g.w;
                    double* xrow = xg + (c * g.h + yy + i - g.ah) * g.w + j - g.aw;
                    for (std::size_t xx = x0; xx < x1; ++xx) xrow[xx] += wgt * grow[xx];
                  }
                }
              }
            }
          }
        }
      });
}

/// x [C x H x W] + b [C] broadcast over each channel plane.
inline Var channel_bias(Var x, Var b) {
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  if (xv.rank() != 3 || bv.rank() != 1 || bv.dim(0) != xv.dim(0)) {
    throw ShapeError("channel_bias: bias " + to_string(bv.shape()) + " does not match channels of " +
                     to_string(xv.shape()));
  }
  Tensor y = xv;
  const std::size_t plane = xv.dim(1) * xv.dim(2);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i / plane];
  return x.tape().push("channel_bias", std::move(y), {x, b},
                       [plane](const Tape&, std::size_t, const Tensor& g, std::span<Tensor* const> pg) {
                         if (pg[0]) *pg[0] += g;
                         if (pg[1]) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i / plane] += g[i];
                         }
                       });
}

// ------------------------------------------------------------- activations

inline Var relu(Var a) {
  return detail::unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var leaky_relu(Var a, double slope = 0.2) {
  return detail::unary(
      a, "leaky_relu", [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

inline Var tanh(Var a) {
  return detail::unary(
      a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(Var a) {
  return detail::unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

/// |a|, with subgradient 0 at exactly 0.
inline Var abs_elem(Var a) {
  return detail::unary(
      a, "abs", [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

/// log(max(a, eps)); zero gradient where clamped.
inline Var log_clamped(Var a, double eps = 1e-8) {
  return detail::unary(
      a, "log_clamped", [eps](double x) { return std::log(std::max(x, eps)); },
      [eps](double x, double) { return x > eps ? 1.0 / x : 0.0; });
}

// -------------------------------------------------------------- reductions

inline Var sum(Var a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.data()) s += v;
  return a.tape().push("sum", Tensor::scalar(s), {a},
                       [](const Tape&, std::size_t, const Tensor& g, std::span<Tensor* const> pg) {
                         const double gv = g[0];
                         for (double& v : pg[0]->data()) v += gv;
                       });
}

inline Var l1(Var a) { return sum(abs_elem(a)); }

inline Var sum_squares(Var a) { return sum(mul_elem(a, a)); }

// ------------------------------------------------------------ verification

/// Max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
/// using central differences. Coordinates where the one-sided differences
/// disagree (a kink within h, e.g. |x| at 0) are skipped.
inline double grad_check(const std::function<Var(Var)>& f, const Tensor& x, double h = 1e-5) {
  Tensor analytic;
  {
    Tape tape;
    Var xv = tape.variable(x);
    Var y = f(xv);
    tape.backward(y);
    analytic = xv.grad();
  }
  const auto eval = [&f](const Tensor& point) {
    Tape tape;
    return f(tape.constant(point)).value().item();
  };
  const double f0 = eval(x);
  Tensor probe = x;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double fp = eval(probe);
    probe[i] = x[i] - h;
    const double fm = eval(probe);
    probe[i] = x[i];
    const double forward = (fp - f0) / h;
    const double backward = (f0 - fm) / h;
    if (std::abs(forward - backward) > 1e-3 * std::max(1.0, std::abs(forward) + std::abs(backward))) continue;
    const double numeric = (fp - fm) / (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace blindinv::ad
