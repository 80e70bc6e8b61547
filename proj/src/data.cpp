#include "serkd/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "serkd/errors.hpp"

namespace serkd {

Tensor ImageSet::batch(std::span<const std::size_t> indices) const {
  std::vector<double> v;
  v.reserve(indices.size() * image_elements());
  for (auto i : indices) {
    if (i >= count()) throw ContractError("ImageSet::batch: index out of range");
    const auto first = pixels.begin() + static_cast<std::ptrdiff_t>(i * image_elements());
    v.insert(v.end(), first, first + static_cast<std::ptrdiff_t>(image_elements()));
  }
  return Tensor::from({indices.size(), size, size, 3}, v);
}

std::vector<std::size_t> ImageSet::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

SyntheticData gen_synthetic(const DatasetSpec& spec, std::uint64_t seed) {
  spec.validate();
  auto rng = derived_rng(seed, streams::data);
  const std::size_t S = spec.image_size, K = spec.classes;
  const double sigma = spec.blob_sigma;

  struct Blob {
    double cy, cx, color[3];
  };
  std::uniform_real_distribution<double> centre(sigma, static_cast<double>(S) - 1.0 - sigma);
  std::uniform_real_distribution<double> colour(-1.0, 1.0);
  std::vector<std::vector<Blob>> layout(K);
  for (auto& blobs : layout) {
    for (std::size_t k = 0; k < spec.blobs_per_class; ++k) {
      Blob b{centre(rng), centre(rng), {colour(rng), colour(rng), colour(rng)}};
      if (b.cy < 0 || b.cx < 0 || b.cy >= static_cast<double>(S) || b.cx >= static_cast<double>(S)) {
        throw ConfigError("blob off-canvas");
      }
      blobs.push_back(b);
    }
  }

  std::vector<std::vector<double>> templates(K, std::vector<double>(S * S * 3, 0.0));
  for (std::size_t c = 0; c < K; ++c) {
    for (const auto& b : layout[c]) {
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
          const double dy = static_cast<double>(y) - b.cy, dx = static_cast<double>(x) - b.cx;
          const double w = std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
          for (std::size_t ch = 0; ch < 3; ++ch) templates[c][(y * S + x) * 3 + ch] += w * b.color[ch];
        }
    }
  }

  const std::size_t n_val = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(spec.val_fraction * static_cast<double>(spec.samples_per_class))));
  if (n_val >= spec.samples_per_class) throw ConfigError("data.val_fraction leaves no training samples");

  std::normal_distribution<double> noise(0.0, 1.0);
  SyntheticData out;
  out.train.size = out.val.size = S;
  for (std::size_t c = 0; c < K; ++c) {
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
      ImageSet& dst = i < n_val ? out.val : out.train;
      for (double t : templates[c]) dst.pixels.push_back(t + spec.noise * noise(rng));
      dst.labels.push_back(c);
    }
  }
  return out;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::mt19937_64& rng) {
  if (batch_size == 0) throw ContractError("epoch_batches: zero batch size");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch_size)));
  }
  return out;
}

}  // namespace serkd
