#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstddef>
#include <string>

#include "serkd/ops.hpp"
#include "serkd/tensor.hpp"

namespace serkd {

/// Potential and penalty settings shared by the relational losses.
/// Both the sample-level and the token-level normalizers are the per-batch
/// mean of the off-diagonal pairwise distances.
struct PotentialConfig {
  double huber_threshold = 1.0;
  double eps = kEpsilon;

  void validate() const;
};

enum class AngleStrategy { naive_loop, vectorized, tiled };

std::string to_string(AngleStrategy s);
AngleStrategy parse_angle_strategy(const std::string& name);

/// How the O(B L^3) angle loss is evaluated. The tiled strategy walks the
/// vertex axis `tile` rows at a time and never materialises the angle
/// tensor; the other two are checked against `memory_budget_bytes`.
/// All strategies accumulate in float64.
struct AngleLossPlan {
  AngleStrategy strategy = AngleStrategy::tiled;
  std::size_t tile = 8;
  std::size_t memory_budget_bytes = std::size_t{1} << 30;
};

// ---------------------------------------------------------------------------
// Scalar potentials over Eigen vectors.

template <typename Scalar>
Scalar huber(Scalar x, Scalar y, Scalar delta = Scalar(1)) {
  using std::abs;
  const Scalar d = abs(x - y);
  return d <= delta ? Scalar(0.5) * d * d : delta * (d - Scalar(0.5) * delta);
}

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar psi_distance(const Eigen::MatrixBase<DerivedA>& u_i, const Eigen::MatrixBase<DerivedB>& u_j,
                                       typename DerivedA::Scalar nu) {
  if (!(nu > 0)) throw ContractError("psi_distance: normalizer must be positive");
  if (u_i.size() != u_j.size()) throw DimensionError("psi_distance: vectors differ in dimension");
  return (u_i - u_j).norm() / nu;
}

/// Cosine of the angle at vertex u_j. Coincident points (a difference with
/// norm below eps) give 0.
template <typename DerivedA, typename DerivedB, typename DerivedC>
typename DerivedA::Scalar psi_angle(const Eigen::MatrixBase<DerivedA>& u_i, const Eigen::MatrixBase<DerivedB>& u_j,
                                    const Eigen::MatrixBase<DerivedC>& u_k,
                                    typename DerivedA::Scalar eps = typename DerivedA::Scalar(kEpsilon)) {
  using Scalar = typename DerivedA::Scalar;
  if (u_i.size() != u_j.size() || u_k.size() != u_j.size()) {
    throw DimensionError("psi_angle: vectors differ in dimension");
  }
  const auto e_ij = (u_i - u_j).eval();
  const auto e_kj = (u_k - u_j).eval();
  const Scalar n_ij = e_ij.norm();
  const Scalar n_kj = e_kj.norm();
  if (n_ij < eps || n_kj < eps) return Scalar(0);
  return e_ij.dot(e_kj) / (n_ij * n_kj);
}

// ---------------------------------------------------------------------------
// Token-level relational losses on (B, L, C) tensors.

/// Pairwise Euclidean distances, zero diagonal, each batch divided by its
/// mean off-diagonal distance. Throws DegenerateBatchError if that mean
/// falls below eps.
Tensor batch_pairwise_dist(const Tensor& feat, const PotentialConfig& cfg = {});

/// Distance-wise loss: mean Huber penalty over all B*L*L entries of the two
/// normalised distance matrices. Gradients reach the student only.
Tensor loss_rd_sp(const Tensor& student, const Tensor& teacher, const PotentialConfig& cfg = {});

/// Angle tensor (B, L, L, L) with entry [b, i, j, k] = <e(i, j), e(i, k)>,
/// e(i, j) = (x_i - x_j) / max(|x_i - x_j|, eps). Throws PlanError when the
/// modelled footprint exceeds `memory_budget_bytes`.
Tensor angle_tensor(const Tensor& feat, const PotentialConfig& cfg = {},
                    std::size_t memory_budget_bytes = std::size_t{1} << 30);

/// Angle-wise loss: mean Huber penalty over all B*L^3 entries, degenerate
/// entries included. Gradients reach the student only.
Tensor loss_ra_sp(const Tensor& student, const Tensor& teacher, const AngleLossPlan& plan = {},
                  const PotentialConfig& cfg = {});

/// Sample-level variants over (B, C) embeddings: the batch axis plays the
/// role of the token axis inside a single virtual batch.
Tensor loss_rd_samples(const Tensor& student, const Tensor& teacher, const PotentialConfig& cfg = {});
Tensor loss_ra_samples(const Tensor& student, const Tensor& teacher, const AngleLossPlan& plan = {},
                       const PotentialConfig& cfg = {});

// ---------------------------------------------------------------------------
// Memory model of the materialised angle computation: two (B, L, L, C)
// difference tensors plus the (B, L, L, L) angle tensor.

std::size_t angle_memory_model(std::size_t batch, std::size_t tokens, std::size_t channels,
                               std::size_t bytes_per_element);

/// Decimal gigabytes, three decimals: "0.974 GB".
std::string format_gb(std::size_t bytes);

}  // namespace serkd
