#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "serkd/tensor.hpp"

namespace serkd {

inline constexpr double kEpsilon = 1e-12;

// Elementwise binary ops require identical shapes; the only implicit
// broadcasting is scalar-with-tensor through the double overloads.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor shift(const Tensor& x, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& x, double s) { return scale(x, s); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }
inline Tensor operator/(const Tensor& x, double s) { return scale(x, 1.0 / s); }
inline Tensor operator+(const Tensor& x, double s) { return shift(x, s); }
inline Tensor operator-(const Tensor& x, double s) { return shift(x, -s); }
inline Tensor operator-(const Tensor& x) { return scale(x, -1.0); }

/// (..., M, K) x (K, N), or batched (b..., M, K) x (b..., K, N) with equal
/// leading dimensions.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor permute(const Tensor& x, std::span<const std::size_t> order);
Tensor permute(const Tensor& x, std::initializer_list<std::size_t> order);
Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1);
/// Swaps the last two axes.
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

/// Selects `indices` along `axis`; repeated indices are allowed and their
/// gradients add up.
Tensor gather(const Tensor& x, std::size_t axis, std::span<const std::size_t> indices);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
/// Repeats a size-1 axis `count` times.
Tensor expand(const Tensor& x, std::size_t axis, std::size_t count);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);

Tensor exp(const Tensor& x);
/// log(max(x, floor)); zero gradient below the floor.
Tensor log(const Tensor& x, double floor = kEpsilon);
/// sqrt(max(x, floor)); zero gradient below the floor.
Tensor sqrt(const Tensor& x, double floor = 0.0);
Tensor pow(const Tensor& x, double exponent);
Tensor clamp_min(const Tensor& x, double lo);
Tensor relu(const Tensor& x);
/// tanh-approximated GELU.
Tensor gelu(const Tensor& x);
/// Elementwise Huber penalty of a residual: r^2/2 inside |r| <= delta,
/// delta*(|r| - delta/2) outside.
Tensor huber(const Tensor& residual, double delta = 1.0);

Tensor sum(const Tensor& x, std::span<const std::size_t> axes, bool keepdim = false);
Tensor sum(const Tensor& x, std::initializer_list<std::size_t> axes, bool keepdim = false);
Tensor mean(const Tensor& x, std::span<const std::size_t> axes, bool keepdim = false);
Tensor mean(const Tensor& x, std::initializer_list<std::size_t> axes, bool keepdim = false);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

/// Pools over (H, W) of a channel-last (B, H, W, C) tensor without padding.
Tensor avg_pool2d(const Tensor& x, std::size_t window_h, std::size_t window_w,
                  std::size_t stride_h, std::size_t stride_w);
/// Ties resolve to the lowest flat input index.
Tensor max_pool2d(const Tensor& x, std::size_t window_h, std::size_t window_w,
                  std::size_t stride_h, std::size_t stride_w);

/// Channel-last convolution: x (B, H, W, Cin), weight (KH, KW, Cin, Cout).
Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride, std::size_t padding);

/// Non-overlapping patches of a (B, H, W, C) tensor flattened in (ph, pw, C)
/// order: returns (B, (H/ph)*(W/pw), ph*pw*C), patches in row-major grid order.
Tensor patchify(const Tensor& x, std::size_t ph, std::size_t pw);

/// Normalizes over the last axis, then applies gamma/beta of shape (C).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// x (..., D) plus a bias row b (D) on every row.
Tensor bias_add(const Tensor& x, const Tensor& bias);

/// Same values, no gradient path.
Tensor detach(const Tensor& x);

}  // namespace serkd
