#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "serkd/tensor.hpp"

namespace serkd {

enum class TokenSource { vit_tokens, cnn_tokens };

/// A batch of tokens (B, L, C) together with the 2-D grid they came from.
struct TokenGrid {
  Tensor tokens;
  std::size_t rows = 0;
  std::size_t cols = 0;
  TokenSource source = TokenSource::vit_tokens;

  /// Validates L == rows * cols and B, C >= 1.
  static TokenGrid make(Tensor tokens, std::size_t rows, std::size_t cols, TokenSource source);

  std::size_t batch() const { return tokens.dim(0); }
  std::size_t length() const { return tokens.dim(1); }
  std::size_t channels() const { return tokens.dim(2); }
};

/// Superpixel lattice laid over a token grid: each superpixel initially owns
/// a cell_rows x cell_cols block of tokens.
struct SuperpixelGeometry {
  std::size_t grid_rows = 0, grid_cols = 0;  // token grid
  std::size_t cell_rows = 0, cell_cols = 0;  // H_t, W_t
  std::size_t sp_rows = 0, sp_cols = 0;

  static SuperpixelGeometry make(std::size_t grid_rows, std::size_t grid_cols, std::size_t cell_rows,
                                 std::size_t cell_cols);
  std::size_t tokens() const { return grid_rows * grid_cols; }
  std::size_t superpixels() const { return sp_rows * sp_cols; }
};

/// Superpixels in the 3x3 block around the cell that contains the token,
/// clamped at the lattice border, in ascending index order.
std::vector<std::size_t> neighborhood(std::size_t token_index, const SuperpixelGeometry& geometry);

/// (L, M) indicator of admissible token/superpixel pairs.
std::vector<double> neighborhood_mask(const SuperpixelGeometry& geometry);

struct SuperpixelState {
  Tensor S;      // (B, M, C)
  Tensor Q;      // (B, L, M); undefined at t = 0
  Tensor Q_hat;  // (B, L, M) column-normalised Q; attention kernel only
  SuperpixelGeometry geometry;
  std::size_t iteration = 0;
  /// Flat (b * M + j) indices of superpixels whose RBF normaliser fell
  /// below 1e-12 in the last iteration; they kept their previous value.
  std::vector<std::size_t> starved;
};

/// S^0 as the mean of each cell_rows x cell_cols token block.
SuperpixelState init_superpixels(const TokenGrid& grid, std::size_t cell_rows, std::size_t cell_cols);

/// One attention-style association step: neighbourhood-masked softmax of
/// <T_i, S_j> / sqrt(C), column normalisation, S = Q_hat^T T.
SuperpixelState associate_attention(const TokenGrid& grid, const SuperpixelState& state);

/// One RBF association step: Q_ij = exp(-|F_i - S_j|^2) on the neighbourhood,
/// S_j = sum_i Q_ij F_i / Z_j with Z_j = sum_i Q_ij.
SuperpixelState associate_rbf(const TokenGrid& features, const SuperpixelState& state);

enum class AssociationKernel { attention, rbf };

std::string to_string(AssociationKernel k);
AssociationKernel parse_association_kernel(const std::string& name);

SuperpixelState sample_superpixels(const TokenGrid& grid, std::size_t cell_rows, std::size_t cell_cols,
                                   std::size_t iterations, AssociationKernel kernel);

/// argmax_j Q[b, i, j] with ties to the lowest j, as (B, L) indices.
std::vector<std::uint32_t> hard_assignments(const SuperpixelState& state);

}  // namespace serkd
