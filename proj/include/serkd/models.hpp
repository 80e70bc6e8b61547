#pragma once

#include <cstddef>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "serkd/superpixel.hpp"
#include "serkd/tensor.hpp"

namespace serkd {

/// Named parameters; iteration (and checkpoint) order is lexicographic.
using ParameterSet = std::map<std::string, Tensor>;

/// Copies every parameter into a fresh leaf with the given gradient flag.
ParameterSet clone_parameters(const ParameterSet& params, bool requires_grad);
std::size_t parameter_count(const ParameterSet& params);

// ---------------------------------------------------------------------------
// Toy ViT: patch embedding, learned positions, class (and optionally a
// distillation) token, pre-norm single-head blocks, one head per extra token.

struct ToyViTConfig {
  std::size_t image_size = 32;
  std::size_t patch = 4;
  std::size_t in_channels = 3;
  std::size_t dim = 64;
  std::size_t depth = 4;
  std::size_t mlp_ratio = 2;
  std::size_t classes = 4;
  bool distillation_token = false;

  static ToyViTConfig teacher();
  static ToyViTConfig student();

  void validate() const;
  std::size_t grid_side() const { return image_size / patch; }
  std::size_t visual_tokens() const { return grid_side() * grid_side(); }
  std::size_t prefix_tokens() const { return distillation_token ? 2 : 1; }
  std::size_t sequence_length() const { return visual_tokens() + prefix_tokens(); }
};

struct ModelOutputs {
  Tensor cls_logits;            // (B, K)
  Tensor dist_logits;           // (B, K); undefined without a distillation token
  TokenGrid visual;             // final-layer tokens without class/distillation rows
};

/// Weights and positions ~ N(0, 0.02^2), biases 0, layer-norm gains 1.
ParameterSet init_vit(const ToyViTConfig& cfg, std::mt19937_64& rng);

ModelOutputs vit_forward(const ToyViTConfig& cfg, const ParameterSet& params, const Tensor& images);

/// Rows [prefix, S) of a (B, S, C) sequence.
Tensor visual_tokens_from_sequence(const Tensor& sequence, std::size_t prefix);

/// Averages both heads when the distillation head exists.
Tensor predict(const ModelOutputs& outputs);

// ---------------------------------------------------------------------------
// Toy CNN: three stages, each opened by a stride-2 3x3 convolution and
// followed by `blocks_per_stage - 1` stride-1 convolutions; widths double per
// stage. Head: global average pool then linear.

struct ToyCNNConfig {
  std::size_t image_size = 32;
  std::size_t in_channels = 3;
  std::size_t base_width = 8;
  std::size_t blocks_per_stage = 1;
  std::size_t classes = 4;

  static ToyCNNConfig teacher();
  static ToyCNNConfig student();

  void validate() const;
  std::size_t stage_width(std::size_t stage) const { return base_width << stage; }
  std::size_t stage_side(std::size_t stage) const { return image_size >> (stage + 1); }
};

struct CnnOutputs {
  Tensor logits;               // (B, K)
  std::vector<Tensor> stages;  // (B, H_s, W_s, C_s), s = 0, 1, 2
};

/// He-normal convolution and head weights, zero biases.
ParameterSet init_cnn(const ToyCNNConfig& cfg, std::mt19937_64& rng);

CnnOutputs cnn_forward(const ToyCNNConfig& cfg, const ParameterSet& params, const Tensor& images);

}  // namespace serkd
