#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "serkd/config.hpp"
#include "serkd/tensor.hpp"

namespace serkd {

/// Images stored row-major as (N, S, S, 3) with a parallel label vector.
struct ImageSet {
  std::size_t size = 0;  // S
  std::vector<double> pixels;
  std::vector<std::size_t> labels;

  std::size_t count() const { return labels.size(); }
  std::size_t image_elements() const { return size * size * 3; }

  /// Stacks the listed images into a (B, S, S, 3) tensor.
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> batch_labels(std::span<const std::size_t> indices) const;
};

struct SyntheticData {
  ImageSet train;
  ImageSet val;
};

/// Each class is a fixed arrangement of Gaussian blobs with class-specific
/// centres and colours; every sample adds i.i.d. pixel noise. The split is
/// stratified and shuffled by the seed.
SyntheticData gen_synthetic(const DatasetSpec& spec, std::uint64_t seed);

/// Independent random stream for one purpose of a run.
std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t stream);

namespace streams {
inline constexpr std::uint64_t data = 1, teacher_init = 2, student_init = 3, teacher_shuffle = 4,
                               student_shuffle = 5, witness = 6;
}

/// Shuffled index batches covering [0, n) once; the last batch may be short.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::mt19937_64& rng);

}  // namespace serkd
