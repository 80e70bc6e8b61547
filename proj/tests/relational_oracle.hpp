#pragma once

// Scalar reference implementations of the relational potentials, written
// independently of the library kernels (plain loops, no tensor ops).

#include <Eigen/Core>
#include <Eigen/QR>
#include <cmath>
#include <random>
#include <vector>

#include "serkd/tensor.hpp"

namespace oracle {

inline Eigen::VectorXd row(const serkd::Tensor& t, std::size_t b, std::size_t i) {
  const std::size_t L = t.dim(1), C = t.dim(2);
  Eigen::VectorXd v(C);
  for (std::size_t q = 0; q < C; ++q) v[q] = t.values()[(b * L + i) * C + q];
  return v;
}

inline double smooth_l1(double x, double y) {
  const double d = std::fabs(x - y);
  return d < 1.0 ? 0.5 * d * d : d - 0.5;
}

// Euclidean distance matrices, zero diagonal, per-batch mean off-diagonal = 1.
inline std::vector<double> normalized_distances(const serkd::Tensor& feat) {
  const std::size_t B = feat.dim(0), L = feat.dim(1);
  std::vector<double> out(B * L * L, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    double total = 0.0;
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j) {
        if (i == j) continue;
        const double d = (row(feat, b, i) - row(feat, b, j)).norm();
        out[(b * L + i) * L + j] = d;
        total += d;
      }
    const double mean = total / static_cast<double>(L * (L - 1));
    for (std::size_t q = 0; q < L * L; ++q) out[b * L * L + q] /= mean;
  }
  return out;
}

inline double distance_loss(const serkd::Tensor& s, const serkd::Tensor& t) {
  const auto ds = normalized_distances(s);
  const auto dt = normalized_distances(t);
  double total = 0.0;
  for (std::size_t b = 0; b < s.dim(0); ++b)
    for (std::size_t i = 0; i < s.dim(1); ++i)
      for (std::size_t j = 0; j < s.dim(1); ++j) {
        const std::size_t q = (b * s.dim(1) + i) * s.dim(1) + j;
        total += smooth_l1(ds[q], dt[q]);
      }
  return total / static_cast<double>(ds.size());
}

inline double cosine_at(const serkd::Tensor& t, std::size_t b, std::size_t vertex, std::size_t j, std::size_t k) {
  const Eigen::VectorXd a = row(t, b, vertex) - row(t, b, j);
  const Eigen::VectorXd c = row(t, b, vertex) - row(t, b, k);
  if (a.norm() == 0.0 || c.norm() == 0.0) return 0.0;
  return a.dot(c) / (a.norm() * c.norm());
}

inline double angle_loss(const serkd::Tensor& s, const serkd::Tensor& t) {
  const std::size_t B = s.dim(0), L = s.dim(1);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j)
        for (std::size_t k = 0; k < L; ++k) total += smooth_l1(cosine_at(s, b, i, j, k), cosine_at(t, b, i, j, k));
  return total / static_cast<double>(B * L * L * L);
}

inline Eigen::MatrixXd random_rotation(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> dist;
  Eigen::MatrixXd m(n, n);
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = dist(rng);
  return Eigen::HouseholderQR<Eigen::MatrixXd>(m).householderQ();
}

// alpha * R x + c applied to every token.
inline serkd::Tensor similarity(const serkd::Tensor& x, const Eigen::MatrixXd& rot, double alpha,
                                const Eigen::VectorXd& c) {
  const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
  std::vector<double> out(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < L; ++i) {
      const Eigen::VectorXd y = alpha * rot * row(x, b, i) + c;
      for (std::size_t q = 0; q < C; ++q) out[(b * L + i) * C + q] = y[q];
    }
  return serkd::Tensor::from(x.shape(), out);
}

}  // namespace oracle
