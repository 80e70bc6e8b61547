#include "serkd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

namespace serkd {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMat = Eigen::Map<const RowMat>;
using MutMat = Eigen::Map<RowMat>;

using detail::Node;

bool wants_grad(const Node& self, std::size_t k) { return self.inputs[k]->requires_grad; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

void require_axis(const Tensor& x, std::size_t axis, const char* op) {
  if (axis >= x.rank()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                         to_string(x.shape()));
  }
}

// (outer, n, inner) factorisation of a shape around one axis.
struct AxisView {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

template <typename F, typename D>
Tensor unary(const Tensor& x, const char* op, F f, D derivative) {
  const auto xv = x.values();
  Buffer y(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  return make_result(x.shape(), std::move(y), {x}, op, [derivative](Node& self) {
    Node& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * derivative(in.value[i], self.value[i]);
    }
  });
}

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Visits every multi-index of `shape` in row-major order, handing the
// visitor the accumulated offset under `strides`.
template <typename V>
void for_each_offset(const Shape& shape, const std::vector<std::size_t>& strides, V visit) {
  const std::size_t total = element_count(shape);
  const std::size_t rank = shape.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    visit(flat, offset);
    for (std::size_t a = rank; a-- > 0;) {
      ++idx[a];
      offset += strides[a];
      if (idx[a] < shape[a]) break;
      offset -= strides[a] * shape[a];
      idx[a] = 0;
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto av = a.values();
  const auto bv = b.values();
  Buffer y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  return make_result(a.shape(), std::move(y), {a, b}, "add", [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (wants_grad(self, k)) self.inputs[k]->accumulate(self.grad);
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto av = a.values();
  const auto bv = b.values();
  Buffer y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] - bv[i];
  return make_result(a.shape(), std::move(y), {a, b}, "sub", [](Node& self) {
    if (wants_grad(self, 0)) self.inputs[0]->accumulate(self.grad);
    if (wants_grad(self, 1)) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto av = a.values();
  const auto bv = b.values();
  Buffer y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  return make_result(a.shape(), std::move(y), {a, b}, "mul", [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants_grad(self, k)) continue;
      const auto& other = self.inputs[1 - k]->value;
      auto& g = self.inputs[k]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * other[i];
    }
  });
}

Tensor scale(const Tensor& x, double s) {
  return unary(x, "scale", [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor shift(const Tensor& x, double s) {
  return unary(x, "shift", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  const std::size_t k = a.shape().back();
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t kb = b.shape()[b.rank() - 2];
  const std::size_t n = b.shape().back();
  std::size_t batches = 1;
  bool shared_rhs = b.rank() == 2;
  if (!shared_rhs) {
    const bool leading_equal =
        a.rank() == b.rank() && std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin());
    if (!leading_equal) {
      throw DimensionError("matmul batch dims differ: " + to_string(a.shape()) + " x " +
                           to_string(b.shape()));
    }
    batches = element_count(Shape(a.shape().begin(), a.shape().end() - 2));
  }
  if (k != kb) {
    throw DimensionError("matmul inner dims differ: " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  // A shared right operand lets every leading row be stacked into one GEMM.
  const std::size_t rows = shared_rhs ? a.numel() / k : m;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  Buffer y(element_count(out_shape));
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t t = 0; t < batches; ++t) {
    ConstMat A(av.data() + t * rows * k, rows, k);
    ConstMat B(bv.data() + (shared_rhs ? 0 : t * k * n), k, n);
    MutMat(y.data() + t * rows * n, rows, n).noalias() = A * B;
  }
  return make_result(std::move(out_shape), std::move(y), {a, b}, "matmul",
                     [rows, k, n, batches, shared_rhs](Node& self) {
                       Node& an = *self.inputs[0];
                       Node& bn = *self.inputs[1];
                       for (std::size_t t = 0; t < batches; ++t) {
                         ConstMat G(self.grad.data() + t * rows * n, rows, n);
                         const std::size_t boff = shared_rhs ? 0 : t * k * n;
                         if (an.requires_grad) {
                           ConstMat B(bn.value.data() + boff, k, n);
                           MutMat(an.grad_buffer().data() + t * rows * k, rows, k).noalias() +=
                               G * B.transpose();
                         }
                         if (bn.requires_grad) {
                           ConstMat A(an.value.data() + t * rows * k, rows, k);
                           MutMat(bn.grad_buffer().data() + boff, k, n).noalias() += A.transpose() * G;
                         }
                       }
                     });
}

Tensor permute(const Tensor& x, std::span<const std::size_t> order) {
  const auto& s = x.shape();
  if (order.size() != s.size()) throw DimensionError("permute order rank mismatch for " + to_string(s));
  std::vector<bool> used(s.size(), false);
  for (auto a : order) {
    if (a >= s.size() || used[a]) throw DimensionError("permute order is not a permutation");
    used[a] = true;
  }
  const auto in_strides = strides_of(s);
  Shape out_shape(s.size());
  std::vector<std::size_t> gather_strides(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    out_shape[i] = s[order[i]];
    gather_strides[i] = in_strides[order[i]];
  }
  const auto xv = x.values();
  Buffer y(xv.size());
  for_each_offset(out_shape, gather_strides, [&](std::size_t flat, std::size_t off) { y[flat] = xv[off]; });
  return make_result(out_shape, std::move(y), {x}, "permute",
                     [out_shape, gather_strides](Node& self) {
                       auto& g = self.inputs[0]->grad_buffer();
                       for_each_offset(out_shape, gather_strides,
                                       [&](std::size_t flat, std::size_t off) { g[off] += self.grad[flat]; });
                     });
}

Tensor permute(const Tensor& x, std::initializer_list<std::size_t> order) {
  return permute(x, std::span<const std::size_t>(order.begin(), order.size()));
}

Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1) {
  require_axis(x, axis0, "transpose");
  require_axis(x, axis1, "transpose");
  std::vector<std::size_t> order(x.rank());
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[axis0], order[axis1]);
  return permute(x, order);
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("transpose needs rank >= 2, got " + to_string(x.shape()));
  return transpose(x, x.rank() - 2, x.rank() - 1);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (element_count(shape) != x.numel()) {
    throw DimensionError("reshape " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  const auto xv = x.values();
  Buffer y(xv.begin(), xv.end());
  return make_result(std::move(shape), std::move(y), {x}, "reshape",
                     [](Node& self) { self.inputs[0]->accumulate(self.grad); });
}

Tensor gather(const Tensor& x, std::size_t axis, std::span<const std::size_t> indices) {
  require_axis(x, axis, "gather");
  if (indices.empty()) throw DimensionError("gather with no indices");
  const auto v = axis_view(x.shape(), axis);
  for (auto i : indices) {
    if (i >= v.n) {
      throw DimensionError("gather index " + std::to_string(i) + " out of range for axis " +
                           std::to_string(axis) + " of " + to_string(x.shape()));
    }
  }
  Shape out_shape = x.shape();
  out_shape[axis] = indices.size();
  const std::size_t m = indices.size();
  const auto xv = x.values();
  Buffer y(v.outer * m * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t j = 0; j < m; ++j) {
      const double* src = xv.data() + (o * v.n + indices[j]) * v.inner;
      std::copy(src, src + v.inner, y.data() + (o * m + j) * v.inner);
    }
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result(std::move(out_shape), std::move(y), {x}, "gather", [v, idx](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const std::size_t m = idx.size();
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t j = 0; j < m; ++j) {
        double* dst = g.data() + (o * v.n + idx[j]) * v.inner;
        const double* src = self.grad.data() + (o * m + j) * v.inner;
        for (std::size_t q = 0; q < v.inner; ++q) dst[q] += src[q];
      }
    }
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  require_axis(x, axis, "slice");
  if (begin >= end || end > x.dim(axis)) {
    throw DimensionError("slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for axis " + std::to_string(axis) + " of " + to_string(x.shape()));
  }
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return gather(x, axis, idx);
}

Tensor expand(const Tensor& x, std::size_t axis, std::size_t count) {
  require_axis(x, axis, "expand");
  if (x.dim(axis) != 1) throw DimensionError("expand needs a size-1 axis, got " + to_string(x.shape()));
  std::vector<std::size_t> idx(count, 0);
  return gather(x, axis, idx);
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of nothing");
  const Shape& ref = parts[0].shape();
  require_axis(parts[0], axis, "concat");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != ref.size()) throw DimensionError("concat rank mismatch");
    out_shape[axis] += probe[axis];
    probe[axis] = ref[axis];
    if (probe != ref) {
      throw DimensionError("concat shape mismatch " + to_string(ref) + " vs " + to_string(p.shape()));
    }
  }
  const auto v = axis_view(out_shape, axis);
  Buffer y(element_count(out_shape));
  std::vector<std::size_t> widths;
  std::size_t start = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis);
    const auto pv = p.values();
    for (std::size_t o = 0; o < v.outer; ++o) {
      std::copy(pv.data() + o * w * v.inner, pv.data() + (o + 1) * w * v.inner,
                y.data() + (o * v.n + start) * v.inner);
    }
    widths.push_back(w);
    start += w;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result(out_shape, std::move(y), std::move(inputs), "concat", [v, widths](Node& self) {
    std::size_t start = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const std::size_t w = widths[k];
      if (wants_grad(self, k)) {
        auto& g = self.inputs[k]->grad_buffer();
        for (std::size_t o = 0; o < v.outer; ++o) {
          const double* src = self.grad.data() + (o * v.n + start) * v.inner;
          double* dst = g.data() + o * w * v.inner;
          for (std::size_t q = 0; q < w * v.inner; ++q) dst[q] += src[q];
        }
      }
      start += w;
    }
  });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor exp(const Tensor& x) {
  return unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x, double floor) {
  return unary(
      x, "log", [floor](double v) { return std::log(std::max(v, floor)); },
      [floor](double v, double) { return v > floor ? 1.0 / v : 0.0; });
}

Tensor sqrt(const Tensor& x, double floor) {
  return unary(
      x, "sqrt", [floor](double v) { return std::sqrt(std::max(v, floor)); },
      [floor](double v, double y) { return (v > floor && y > 0.0) ? 0.5 / y : 0.0; });
}

Tensor pow(const Tensor& x, double exponent) {
  return unary(
      x, "pow", [exponent](double v) { return std::pow(v, exponent); },
      [exponent](double v, double) { return exponent * std::pow(v, exponent - 1.0); });
}

Tensor clamp_min(const Tensor& x, double lo) {
  return unary(
      x, "clamp_min", [lo](double v) { return std::max(v, lo); },
      [lo](double v, double) { return v > lo ? 1.0 : 0.0; });
}

Tensor relu(const Tensor& x) { return clamp_min(x, 0.0); }

Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr double a = 0.044715;
  return unary(
      x, "gelu",
      [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + a * v * v * v))); },
      [](double v, double) {
        const double t = std::tanh(c * (v + a * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * a * v * v);
      });
}

Tensor huber(const Tensor& residual, double delta) {
  if (!(delta > 0.0)) throw ContractError("huber threshold must be positive");
  return unary(
      residual, "huber",
      [delta](double r) {
        const double m = std::abs(r);
        return m <= delta ? 0.5 * r * r : delta * (m - 0.5 * delta);
      },
      [delta](double r, double) {
        if (std::abs(r) <= delta) return r;
        return r > 0.0 ? delta : -delta;
      });
}

Tensor sum(const Tensor& x, std::span<const std::size_t> axes, bool keepdim) {
  const auto& s = x.shape();
  std::vector<bool> reduced(s.size(), false);
  for (auto a : axes) {
    require_axis(x, a, "sum");
    reduced[a] = true;
  }
  Shape kept = s;
  Shape out_shape;
  for (std::size_t a = 0; a < s.size(); ++a) {
    if (reduced[a]) kept[a] = 1;
    if (!reduced[a] || keepdim) out_shape.push_back(kept[a]);
  }
  const auto kept_strides = strides_of(kept);
  std::vector<std::size_t> scatter(s.size());
  for (std::size_t a = 0; a < s.size(); ++a) scatter[a] = reduced[a] ? 0 : kept_strides[a];
  const auto xv = x.values();
  Buffer y(element_count(kept), 0.0);
  for_each_offset(s, scatter, [&](std::size_t flat, std::size_t off) { y[off] += xv[flat]; });
  return make_result(std::move(out_shape), std::move(y), {x}, "sum", [s, scatter](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for_each_offset(s, scatter, [&](std::size_t flat, std::size_t off) { g[flat] += self.grad[off]; });
  });
}

Tensor sum(const Tensor& x, std::initializer_list<std::size_t> axes, bool keepdim) {
  return sum(x, std::span<const std::size_t>(axes.begin(), axes.size()), keepdim);
}

Tensor mean(const Tensor& x, std::span<const std::size_t> axes, bool keepdim) {
  std::size_t count = 1;
  for (auto a : axes) count *= x.dim(a);
  return scale(sum(x, axes, keepdim), 1.0 / static_cast<double>(count));
}

Tensor mean(const Tensor& x, std::initializer_list<std::size_t> axes, bool keepdim) {
  return mean(x, std::span<const std::size_t>(axes.begin(), axes.size()), keepdim);
}

Tensor sum_all(const Tensor& x) {
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return sum(x, axes, false);
}

Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_axis(x, axis, "softmax");
  const auto v = axis_view(x.shape(), axis);
  const auto xv = x.values();
  Buffer y(xv.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t q = 0; q < v.inner; ++q) {
      const std::size_t base = o * v.n * v.inner + q;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < v.n; ++j) mx = std::max(mx, xv[base + j * v.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < v.n; ++j) {
        const double e = std::exp(xv[base + j * v.inner] - mx);
        y[base + j * v.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < v.n; ++j) y[base + j * v.inner] /= z;
    }
  }
  return make_result(x.shape(), std::move(y), {x}, "softmax", [v](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t q = 0; q < v.inner; ++q) {
        const std::size_t base = o * v.n * v.inner + q;
        double dot = 0.0;
        for (std::size_t j = 0; j < v.n; ++j) {
          const std::size_t p = base + j * v.inner;
          dot += self.grad[p] * self.value[p];
        }
        for (std::size_t j = 0; j < v.n; ++j) {
          const std::size_t p = base + j * v.inner;
          g[p] += self.value[p] * (self.grad[p] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  require_axis(x, axis, "log_softmax");
  const auto v = axis_view(x.shape(), axis);
  const auto xv = x.values();
  Buffer y(xv.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t q = 0; q < v.inner; ++q) {
      const std::size_t base = o * v.n * v.inner + q;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < v.n; ++j) mx = std::max(mx, xv[base + j * v.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < v.n; ++j) z += std::exp(xv[base + j * v.inner] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t j = 0; j < v.n; ++j) y[base + j * v.inner] = xv[base + j * v.inner] - lz;
    }
  }
  return make_result(x.shape(), std::move(y), {x}, "log_softmax", [v](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t q = 0; q < v.inner; ++q) {
        const std::size_t base = o * v.n * v.inner + q;
        double total = 0.0;
        for (std::size_t j = 0; j < v.n; ++j) total += self.grad[base + j * v.inner];
        for (std::size_t j = 0; j < v.n; ++j) {
          const std::size_t p = base + j * v.inner;
          g[p] += self.grad[p] - std::exp(self.value[p]) * total;
        }
      }
    }
  });
}

namespace {

struct PoolGeometry {
  std::size_t batch, h, w, c, kh, kw, sh, sw, oh, ow;
};

PoolGeometry pool_geometry(const Tensor& x, std::size_t kh, std::size_t kw, std::size_t sh,
                           std::size_t sw, const char* op) {
  if (x.rank() != 4) throw DimensionError(std::string(op) + " expects (B,H,W,C), got " + to_string(x.shape()));
  if (kh == 0 || kw == 0 || sh == 0 || sw == 0) throw ContractError(std::string(op) + ": zero window or stride");
  const auto& s = x.shape();
  if (s[1] < kh || s[2] < kw) throw DimensionError(std::string(op) + ": window larger than input " + to_string(s));
  return {s[0], s[1], s[2], s[3], kh, kw, sh, sw, (s[1] - kh) / sh + 1, (s[2] - kw) / sw + 1};
}

}  // namespace

Tensor avg_pool2d(const Tensor& x, std::size_t window_h, std::size_t window_w, std::size_t stride_h,
                  std::size_t stride_w) {
  const auto p = pool_geometry(x, window_h, window_w, stride_h, stride_w, "avg_pool2d");
  const auto xv = x.values();
  Buffer y(p.batch * p.oh * p.ow * p.c, 0.0);
  const double inv = 1.0 / static_cast<double>(p.kh * p.kw);
  for (std::size_t b = 0; b < p.batch; ++b)
    for (std::size_t oy = 0; oy < p.oh; ++oy)
      for (std::size_t ox = 0; ox < p.ow; ++ox) {
        double* out = y.data() + ((b * p.oh + oy) * p.ow + ox) * p.c;
        for (std::size_t dy = 0; dy < p.kh; ++dy)
          for (std::size_t dx = 0; dx < p.kw; ++dx) {
            const double* in = xv.data() + ((b * p.h + oy * p.sh + dy) * p.w + ox * p.sw + dx) * p.c;
            for (std::size_t ch = 0; ch < p.c; ++ch) out[ch] += in[ch];
          }
        for (std::size_t ch = 0; ch < p.c; ++ch) out[ch] *= inv;
      }
  return make_result({p.batch, p.oh, p.ow, p.c}, std::move(y), {x}, "avg_pool2d", [p, inv](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t b = 0; b < p.batch; ++b)
      for (std::size_t oy = 0; oy < p.oh; ++oy)
        for (std::size_t ox = 0; ox < p.ow; ++ox) {
          const double* go = self.grad.data() + ((b * p.oh + oy) * p.ow + ox) * p.c;
          for (std::size_t dy = 0; dy < p.kh; ++dy)
            for (std::size_t dx = 0; dx < p.kw; ++dx) {
              double* gi = g.data() + ((b * p.h + oy * p.sh + dy) * p.w + ox * p.sw + dx) * p.c;
              for (std::size_t ch = 0; ch < p.c; ++ch) gi[ch] += go[ch] * inv;
            }
        }
  });
}

Tensor max_pool2d(const Tensor& x, std::size_t window_h, std::size_t window_w, std::size_t stride_h,
                  std::size_t stride_w) {
  const auto p = pool_geometry(x, window_h, window_w, stride_h, stride_w, "max_pool2d");
  const auto xv = x.values();
  const std::size_t n_out = p.batch * p.oh * p.ow * p.c;
  Buffer y(n_out);
  auto argmax = std::make_shared<std::vector<std::size_t>>(n_out);
  for (std::size_t b = 0; b < p.batch; ++b)
    for (std::size_t oy = 0; oy < p.oh; ++oy)
      for (std::size_t ox = 0; ox < p.ow; ++ox)
        for (std::size_t ch = 0; ch < p.c; ++ch) {
          const std::size_t o = ((b * p.oh + oy) * p.ow + ox) * p.c + ch;
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_at = 0;
          // Row-major scan with strict comparison keeps the lowest flat index on ties.
          for (std::size_t dy = 0; dy < p.kh; ++dy)
            for (std::size_t dx = 0; dx < p.kw; ++dx) {
              const std::size_t i = ((b * p.h + oy * p.sh + dy) * p.w + ox * p.sw + dx) * p.c + ch;
              if (xv[i] > best || (dy == 0 && dx == 0)) {
                best = xv[i];
                best_at = i;
              }
            }
          y[o] = best;
          (*argmax)[o] = best_at;
        }
  return make_result({p.batch, p.oh, p.ow, p.c}, std::move(y), {x}, "max_pool2d", [argmax](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < argmax->size(); ++o) g[(*argmax)[o]] += self.grad[o];
  });
}

namespace {

struct ConvGeometry {
  std::size_t batch, h, w, cin, kh, kw, cout, stride, pad, oh, ow;
  std::size_t patch() const { return kh * kw * cin; }
  std::size_t rows() const { return batch * oh * ow; }
};

// Applies `visit(row, col, input_offset)` for every in-bounds im2col entry.
template <typename V>
void for_each_patch_entry(const ConvGeometry& g, V visit) {
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t oy = 0; oy < g.oh; ++oy)
      for (std::size_t ox = 0; ox < g.ow; ++ox) {
        const std::size_t row = (b * g.oh + oy) * g.ow + ox;
        for (std::size_t dy = 0; dy < g.kh; ++dy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + dy) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t dx = 0; dx < g.kw; ++dx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + dx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            const std::size_t in = ((b * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)) * g.cin;
            const std::size_t col = (dy * g.kw + dx) * g.cin;
            visit(row, col, in);
          }
        }
      }
}

Buffer im2col(const ConvGeometry& g, std::span<const double> x) {
  Buffer cols(g.rows() * g.patch(), 0.0);
  for_each_patch_entry(g, [&](std::size_t row, std::size_t col, std::size_t in) {
    std::copy(x.data() + in, x.data() + in + g.cin, cols.data() + row * g.patch() + col);
  });
  return cols;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride, std::size_t padding) {
  if (x.rank() != 4 || weight.rank() != 4) {
    throw DimensionError("conv2d expects x (B,H,W,Cin) and weight (KH,KW,Cin,Cout), got " +
                         to_string(x.shape()) + " and " + to_string(weight.shape()));
  }
  if (stride == 0) throw ContractError("conv2d: zero stride");
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (xs[3] != ws[2]) {
    throw DimensionError("conv2d channel mismatch: " + to_string(xs) + " vs " + to_string(ws));
  }
  if (xs[1] + 2 * padding < ws[0] || xs[2] + 2 * padding < ws[1]) {
    throw DimensionError("conv2d kernel larger than padded input " + to_string(xs));
  }
  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[1], ws[3], stride, padding, 0, 0};
  g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
  g.ow = (g.w + 2 * padding - g.kw) / stride + 1;
  const Buffer cols = im2col(g, x.values());
  Buffer y(g.rows() * g.cout);
  MutMat(y.data(), g.rows(), g.cout).noalias() =
      ConstMat(cols.data(), g.rows(), g.patch()) * ConstMat(weight.values().data(), g.patch(), g.cout);
  return make_result({g.batch, g.oh, g.ow, g.cout}, std::move(y), {x, weight}, "conv2d", [g](Node& self) {
    Node& xn = *self.inputs[0];
    Node& wn = *self.inputs[1];
    ConstMat G(self.grad.data(), g.rows(), g.cout);
    if (wn.requires_grad) {
      const Buffer cols = im2col(g, xn.value);
      MutMat(wn.grad_buffer().data(), g.patch(), g.cout).noalias() +=
          ConstMat(cols.data(), g.rows(), g.patch()).transpose() * G;
    }
    if (xn.requires_grad) {
      Buffer dcols(g.rows() * g.patch());
      MutMat(dcols.data(), g.rows(), g.patch()).noalias() =
          G * ConstMat(wn.value.data(), g.patch(), g.cout).transpose();
      auto& dx = xn.grad_buffer();
      for_each_patch_entry(g, [&](std::size_t row, std::size_t col, std::size_t in) {
        const double* src = dcols.data() + row * g.patch() + col;
        for (std::size_t c = 0; c < g.cin; ++c) dx[in + c] += src[c];
      });
    }
  });
}

Tensor patchify(const Tensor& x, std::size_t ph, std::size_t pw) {
  if (x.rank() != 4) throw DimensionError("patchify expects (B,H,W,C), got " + to_string(x.shape()));
  const auto& s = x.shape();
  if (ph == 0 || pw == 0 || s[1] % ph != 0 || s[2] % pw != 0) {
    throw DimensionError("patchify: " + std::to_string(ph) + "x" + std::to_string(pw) + " patches do not tile " +
                         to_string(s));
  }
  const std::size_t gh = s[1] / ph, gw = s[2] / pw;
  auto blocks = reshape(x, {s[0], gh, ph, gw, pw, s[3]});
  return reshape(permute(blocks, {0, 1, 3, 2, 4, 5}), {s[0], gh * gw, ph * pw * s[3]});
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1) throw DimensionError("layer_norm on a scalar");
  const std::size_t c = x.shape().back();
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw DimensionError("layer_norm affine shape mismatch: x " + to_string(x.shape()) + ", gamma " +
                         to_string(gamma.shape()) + ", beta " + to_string(beta.shape()));
  }
  const std::size_t rows = x.numel() / c;
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  auto xhat = std::make_shared<Buffer>(xv.size());
  auto rstd = std::make_shared<Buffer>(rows);
  Buffer y(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * c;
    double mu = 0.0;
    for (std::size_t k = 0; k < c; ++k) mu += in[k];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t k = 0; k < c; ++k) var += (in[k] - mu) * (in[k] - mu);
    var /= static_cast<double>(c);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t k = 0; k < c; ++k) {
      const double h = (in[k] - mu) * rs;
      (*xhat)[r * c + k] = h;
      y[r * c + k] = gv[k] * h + bv[k];
    }
  }
  return make_result(x.shape(), std::move(y), {x, gamma, beta}, "layer_norm",
                     [xhat, rstd, rows, c](Node& self) {
                       Node& xn = *self.inputs[0];
                       Node& gn = *self.inputs[1];
                       Node& bn = *self.inputs[2];
                       const double inv_c = 1.0 / static_cast<double>(c);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* go = self.grad.data() + r * c;
                         const double* h = xhat->data() + r * c;
                         if (gn.requires_grad) {
                           auto& dg = gn.grad_buffer();
                           for (std::size_t k = 0; k < c; ++k) dg[k] += go[k] * h[k];
                         }
                         if (bn.requires_grad) {
                           auto& db = bn.grad_buffer();
                           for (std::size_t k = 0; k < c; ++k) db[k] += go[k];
                         }
                         if (xn.requires_grad) {
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t k = 0; k < c; ++k) {
                             const double dh = go[k] * gn.value[k];
                             m1 += dh;
                             m2 += dh * h[k];
                           }
                           m1 *= inv_c;
                           m2 *= inv_c;
                           auto& dx = xn.grad_buffer();
                           for (std::size_t k = 0; k < c; ++k) {
                             const double dh = go[k] * gn.value[k];
                             dx[r * c + k] += (*rstd)[r] * (dh - m1 - h[k] * m2);
                           }
                         }
                       }
                     });
}

Tensor bias_add(const Tensor& x, const Tensor& bias) {
  if (x.rank() < 1 || bias.rank() != 1 || x.shape().back() != bias.dim(0)) {
    throw DimensionError("bias_add shape mismatch: " + to_string(x.shape()) + " + " + to_string(bias.shape()));
  }
  const std::size_t d = bias.dim(0);
  const auto xv = x.values();
  const auto bv = bias.values();
  Buffer y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] + bv[i % d];
  return make_result(x.shape(), std::move(y), {x, bias}, "bias_add", [d](Node& self) {
    if (wants_grad(self, 0)) self.inputs[0]->accumulate(self.grad);
    if (wants_grad(self, 1)) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % d] += self.grad[i];
    }
  });
}

Tensor detach(const Tensor& x) { return x.clone(false); }

}  // namespace serkd
