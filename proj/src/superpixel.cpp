#include "serkd/superpixel.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>

#include "serkd/errors.hpp"
#include "serkd/ops.hpp"

namespace serkd {

namespace {

constexpr double kColumnFloor = 1e-12;
constexpr double kStarvationFloor = 1e-12;

void require_state(const TokenGrid& grid, const SuperpixelState& state, const char* op) {
  const auto& g = state.geometry;
  if (grid.rows != g.grid_rows || grid.cols != g.grid_cols) {
    throw DimensionError(std::string(op) + ": token grid does not match the superpixel geometry");
  }
  if (!state.S.defined() || state.S.shape() != Shape{grid.batch(), g.superpixels(), grid.channels()}) {
    throw ContractError(std::string(op) + ": state has no superpixel tokens of shape (B, M, C)");
  }
}

// Constant (B, L, M) tensor repeating an (L, M) pattern over the batch.
Tensor tile_over_batch(const std::vector<double>& pattern, std::size_t batch, std::size_t L, std::size_t M) {
  std::vector<double> v;
  v.reserve(batch * pattern.size());
  for (std::size_t b = 0; b < batch; ++b) v.insert(v.end(), pattern.begin(), pattern.end());
  return Tensor::from({batch, L, M}, v);
}

// Divides x (B, L, M) by its column sums floored at `floor`.
Tensor column_normalize(const Tensor& x, double floor) {
  auto colsum = sum(x, {1}, true);
  return x * expand(pow(clamp_min(colsum, floor), -1.0), 1, x.dim(1));
}

}  // namespace

TokenGrid TokenGrid::make(Tensor tokens, std::size_t rows, std::size_t cols, TokenSource source) {
  if (tokens.rank() != 3) throw DimensionError("TokenGrid: tokens must be (B, L, C), got " + to_string(tokens.shape()));
  if (tokens.dim(0) < 1 || tokens.dim(2) < 1) throw DimensionError("TokenGrid: B and C must be positive");
  if (rows * cols != tokens.dim(1)) {
    throw DimensionError("TokenGrid: grid " + std::to_string(rows) + "x" + std::to_string(cols) +
                         " does not cover L = " + std::to_string(tokens.dim(1)));
  }
  return TokenGrid{std::move(tokens), rows, cols, source};
}

SuperpixelGeometry SuperpixelGeometry::make(std::size_t grid_rows, std::size_t grid_cols, std::size_t cell_rows,
                                            std::size_t cell_cols) {
  if (cell_rows == 0 || cell_cols == 0) throw ConfigError("superpixel grid factors must be positive");
  if (grid_rows % cell_rows != 0) {
    throw ConfigError("token grid height H_g = " + std::to_string(grid_rows) + " is not divisible by H_t = " +
                      std::to_string(cell_rows));
  }
  if (grid_cols % cell_cols != 0) {
    throw ConfigError("token grid width W_g = " + std::to_string(grid_cols) + " is not divisible by W_t = " +
                      std::to_string(cell_cols));
  }
  return {grid_rows, grid_cols, cell_rows, cell_cols, grid_rows / cell_rows, grid_cols / cell_cols};
}

std::vector<std::size_t> neighborhood(std::size_t token_index, const SuperpixelGeometry& g) {
  if (token_index >= g.tokens()) throw ContractError("neighborhood: token index outside the grid");
  const std::size_t r = (token_index / g.grid_cols) / g.cell_rows;
  const std::size_t c = (token_index % g.grid_cols) / g.cell_cols;
  const std::size_t r0 = r == 0 ? 0 : r - 1, r1 = std::min(r + 1, g.sp_rows - 1);
  const std::size_t c0 = c == 0 ? 0 : c - 1, c1 = std::min(c + 1, g.sp_cols - 1);
  std::vector<std::size_t> out;
  for (std::size_t rr = r0; rr <= r1; ++rr) {
    for (std::size_t cc = c0; cc <= c1; ++cc) out.push_back(rr * g.sp_cols + cc);
  }
  return out;
}

std::vector<double> neighborhood_mask(const SuperpixelGeometry& g) {
  const std::size_t L = g.tokens(), M = g.superpixels();
  std::vector<double> mask(L * M, 0.0);
  for (std::size_t i = 0; i < L; ++i) {
    for (auto j : neighborhood(i, g)) mask[i * M + j] = 1.0;
  }
  return mask;
}

SuperpixelState init_superpixels(const TokenGrid& grid, std::size_t cell_rows, std::size_t cell_cols) {
  SuperpixelState state;
  state.geometry = SuperpixelGeometry::make(grid.rows, grid.cols, cell_rows, cell_cols);
  const std::size_t B = grid.batch(), C = grid.channels();
  auto image = reshape(grid.tokens, {B, grid.rows, grid.cols, C});
  auto pooled = avg_pool2d(image, cell_rows, cell_cols, cell_rows, cell_cols);
  state.S = reshape(pooled, {B, state.geometry.superpixels(), C});
  return state;
}

SuperpixelState associate_attention(const TokenGrid& grid, const SuperpixelState& state) {
  require_state(grid, state, "associate_attention");
  const auto& g = state.geometry;
  const std::size_t B = grid.batch(), L = grid.length(), M = g.superpixels();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(grid.channels()));

  auto logits = matmul(grid.tokens, transpose(state.S)) * inv_sqrt_d;
  for (double v : logits.values()) {
    if (!std::isfinite(v)) throw NumericalError("associate_attention: non-finite association logits");
  }
  auto mask = neighborhood_mask(g);
  for (auto& m : mask) m = m > 0 ? 0.0 : -std::numeric_limits<double>::infinity();

  SuperpixelState next;
  next.geometry = g;
  next.iteration = state.iteration + 1;
  next.Q = softmax(logits + tile_over_batch(mask, B, L, M), 2);
  next.Q_hat = column_normalize(next.Q, kColumnFloor);
  next.S = matmul(transpose(next.Q_hat), grid.tokens);
  return next;
}

SuperpixelState associate_rbf(const TokenGrid& features, const SuperpixelState& state) {
  require_state(features, state, "associate_rbf");
  const auto& g = state.geometry;
  const std::size_t B = features.batch(), L = features.length(), M = g.superpixels(), C = features.channels();

  // Squared distances from explicit differences: exact zeros stay exact.
  auto f = expand(reshape(features.tokens, {B, L, 1, C}), 2, M);
  auto s = expand(reshape(state.S, {B, 1, M, C}), 1, L);
  auto diff = f - s;
  auto dist2 = sum(diff * diff, {3});

  SuperpixelState next;
  next.geometry = g;
  next.iteration = state.iteration + 1;
  next.Q = exp(-dist2) * tile_over_batch(neighborhood_mask(g), B, L, M);

  auto Z = sum(next.Q, {1});  // (B, M)
  const auto z = Z.values();
  std::vector<double> keep(B * M * C, 1.0);
  for (std::size_t bj = 0; bj < B * M; ++bj) {
    if (z[bj] >= kStarvationFloor) continue;
    next.starved.push_back(bj);
    std::fill_n(keep.begin() + static_cast<std::ptrdiff_t>(bj * C), C, 0.0);
  }
  auto aggregated = matmul(transpose(column_normalize(next.Q, kStarvationFloor)), features.tokens);
  if (next.starved.empty()) {
    next.S = aggregated;
  } else {
    std::clog << "warning: superpixel starvation in " << next.starved.size()
              << " superpixel(s); keeping their previous centers\n";
    auto k = Tensor::from({B, M, C}, keep);
    auto drop = Tensor::from({B, M, C}, std::vector<double>(B * M * C, 1.0)) - k;
    next.S = aggregated * k + state.S * drop;
  }
  return next;
}

std::string to_string(AssociationKernel k) { return k == AssociationKernel::attention ? "attention" : "rbf"; }

AssociationKernel parse_association_kernel(const std::string& name) {
  if (name == "attention") return AssociationKernel::attention;
  if (name == "rbf") return AssociationKernel::rbf;
  throw ConfigError("unknown association kernel '" + name + "' (expected attention or rbf)");
}

SuperpixelState sample_superpixels(const TokenGrid& grid, std::size_t cell_rows, std::size_t cell_cols,
                                   std::size_t iterations, AssociationKernel kernel) {
  if (iterations < 1) throw ConfigError("superpixel iteration count must be at least 1");
  auto state = init_superpixels(grid, cell_rows, cell_cols);
  for (std::size_t t = 0; t < iterations; ++t) {
    state = kernel == AssociationKernel::attention ? associate_attention(grid, state) : associate_rbf(grid, state);
  }
  return state;
}

std::vector<std::uint32_t> hard_assignments(const SuperpixelState& state) {
  if (!state.Q.defined()) throw ContractError("hard_assignments: association map is unset at t = 0");
  const std::size_t B = state.Q.dim(0), L = state.Q.dim(1), M = state.Q.dim(2);
  const auto q = state.Q.values();
  std::vector<std::uint32_t> out(B * L);
  for (std::size_t r = 0; r < B * L; ++r) {
    const auto row = q.subspan(r * M, M);
    out[r] = static_cast<std::uint32_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

}  // namespace serkd
