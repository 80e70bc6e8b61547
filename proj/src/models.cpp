#include "serkd/models.hpp"

#include <cmath>

#include "serkd/errors.hpp"
#include "serkd/ops.hpp"

namespace serkd {

namespace {

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(element_count(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), v, true);
}

const Tensor& param(const ParameterSet& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw ConfigError("missing parameter '" + name + "'");
  return it->second;
}

Tensor linear(const Tensor& x, const ParameterSet& p, const std::string& prefix) {
  return bias_add(matmul(x, param(p, prefix + ".weight")), param(p, prefix + ".bias"));
}

Tensor norm(const Tensor& x, const ParameterSet& p, const std::string& prefix) {
  return layer_norm(x, param(p, prefix + ".gamma"), param(p, prefix + ".beta"));
}

// (B, C) -> (B, S, C) style broadcast of a (rows, C) parameter over the batch.
Tensor over_batch(const Tensor& rows, std::size_t batch) {
  return expand(reshape(rows, {1, rows.dim(0), rows.dim(1)}), 0, batch);
}

Tensor row_of(const Tensor& seq, std::size_t index) {
  return reshape(slice(seq, 1, index, index + 1), {seq.dim(0), seq.dim(2)});
}

void add_linear(ParameterSet& p, const std::string& prefix, std::size_t in, std::size_t out, double stddev,
                std::mt19937_64& rng) {
  p[prefix + ".weight"] = normal_tensor({in, out}, stddev, rng);
  p[prefix + ".bias"] = Tensor::zeros({out}, true);
}

void add_norm(ParameterSet& p, const std::string& prefix, std::size_t dim) {
  p[prefix + ".gamma"] = Tensor::full({dim}, 1.0, true);
  p[prefix + ".beta"] = Tensor::zeros({dim}, true);
}

void require_images(const Tensor& images, std::size_t size, std::size_t channels) {
  if (images.rank() != 4 || images.dim(1) != size || images.dim(2) != size || images.dim(3) != channels) {
    throw ConfigError("model expects images (B, " + std::to_string(size) + ", " + std::to_string(size) + ", " +
                      std::to_string(channels) + "), got " + to_string(images.shape()));
  }
}

}  // namespace

ParameterSet clone_parameters(const ParameterSet& params, bool requires_grad) {
  ParameterSet out;
  for (const auto& [name, t] : params) out.emplace(name, t.clone(requires_grad));
  return out;
}

std::size_t parameter_count(const ParameterSet& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

ToyViTConfig ToyViTConfig::teacher() { return {}; }

ToyViTConfig ToyViTConfig::student() {
  ToyViTConfig c;
  c.dim = 32;
  c.depth = 2;
  c.distillation_token = true;
  return c;
}

void ToyViTConfig::validate() const {
  if (patch == 0 || image_size % patch != 0) {
    throw ConfigError("image size " + std::to_string(image_size) + " is not divisible by patch " +
                      std::to_string(patch));
  }
  if (dim == 0 || depth == 0 || mlp_ratio == 0 || in_channels == 0) throw ConfigError("ViT sizes must be positive");
  if (classes < 2) throw ConfigError("need at least two classes");
}

ParameterSet init_vit(const ToyViTConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  constexpr double kStd = 0.02;
  const std::size_t C = cfg.dim;
  ParameterSet p;
  add_linear(p, "patch", cfg.patch * cfg.patch * cfg.in_channels, C, kStd, rng);
  p["pos"] = normal_tensor({cfg.sequence_length(), C}, kStd, rng);
  p["cls_token"] = normal_tensor({1, C}, kStd, rng);
  if (cfg.distillation_token) p["dist_token"] = normal_tensor({1, C}, kStd, rng);
  for (std::size_t d = 0; d < cfg.depth; ++d) {
    const std::string b = "block" + std::to_string(d);
    add_norm(p, b + ".ln1", C);
    for (const char* proj : {".q", ".k", ".v", ".o"}) add_linear(p, b + ".attn" + proj, C, C, kStd, rng);
    add_norm(p, b + ".ln2", C);
    add_linear(p, b + ".mlp.fc1", C, C * cfg.mlp_ratio, kStd, rng);
    add_linear(p, b + ".mlp.fc2", C * cfg.mlp_ratio, C, kStd, rng);
  }
  add_norm(p, "norm", C);
  add_linear(p, "head", C, cfg.classes, kStd, rng);
  if (cfg.distillation_token) add_linear(p, "head_dist", C, cfg.classes, kStd, rng);
  return p;
}

ModelOutputs vit_forward(const ToyViTConfig& cfg, const ParameterSet& p, const Tensor& images) {
  cfg.validate();
  require_images(images, cfg.image_size, cfg.in_channels);
  const std::size_t B = images.dim(0), C = cfg.dim;

  auto x = linear(patchify(images, cfg.patch, cfg.patch), p, "patch");
  std::vector<Tensor> parts{over_batch(param(p, "cls_token"), B)};
  if (cfg.distillation_token) parts.push_back(over_batch(param(p, "dist_token"), B));
  parts.push_back(x);
  x = concat(parts, 1) + over_batch(param(p, "pos"), B);

  const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(C));
  for (std::size_t d = 0; d < cfg.depth; ++d) {
    const std::string b = "block" + std::to_string(d);
    auto h = norm(x, p, b + ".ln1");
    auto q = linear(h, p, b + ".attn.q");
    auto k = linear(h, p, b + ".attn.k");
    auto v = linear(h, p, b + ".attn.v");
    auto attn = softmax(matmul(q, transpose(k)) * inv_sqrt_c, 2);
    x = x + linear(matmul(attn, v), p, b + ".attn.o");
    h = norm(x, p, b + ".ln2");
    x = x + linear(gelu(linear(h, p, b + ".mlp.fc1")), p, b + ".mlp.fc2");
  }
  x = norm(x, p, "norm");

  ModelOutputs out;
  out.cls_logits = linear(row_of(x, 0), p, "head");
  if (cfg.distillation_token) out.dist_logits = linear(row_of(x, 1), p, "head_dist");
  out.visual = TokenGrid::make(visual_tokens_from_sequence(x, cfg.prefix_tokens()), cfg.grid_side(),
                               cfg.grid_side(), TokenSource::vit_tokens);
  return out;
}

Tensor visual_tokens_from_sequence(const Tensor& sequence, std::size_t prefix) {
  if (sequence.rank() != 3 || prefix >= sequence.dim(1)) {
    throw DimensionError("visual_tokens_from_sequence: bad sequence " + to_string(sequence.shape()));
  }
  return slice(sequence, 1, prefix, sequence.dim(1));
}

Tensor predict(const ModelOutputs& outputs) {
  if (!outputs.dist_logits.defined()) return outputs.cls_logits;
  return (outputs.cls_logits + outputs.dist_logits) * 0.5;
}

ToyCNNConfig ToyCNNConfig::teacher() {
  ToyCNNConfig c;
  c.blocks_per_stage = 2;
  return c;
}

ToyCNNConfig ToyCNNConfig::student() { return {}; }

void ToyCNNConfig::validate() const {
  if (image_size % 8 != 0) throw ConfigError("CNN image size must be divisible by 8 for three stride-2 stages");
  if (base_width == 0 || blocks_per_stage == 0 || in_channels == 0) throw ConfigError("CNN sizes must be positive");
  if (classes < 2) throw ConfigError("need at least two classes");
}

ParameterSet init_cnn(const ToyCNNConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  ParameterSet p;
  std::size_t in = cfg.in_channels;
  for (std::size_t s = 0; s < 3; ++s) {
    const std::size_t out = cfg.stage_width(s);
    for (std::size_t k = 0; k < cfg.blocks_per_stage; ++k) {
      const std::string name = "stage" + std::to_string(s) + ".conv" + std::to_string(k);
      p[name + ".weight"] = normal_tensor({3, 3, in, out}, std::sqrt(2.0 / static_cast<double>(9 * in)), rng);
      p[name + ".bias"] = Tensor::zeros({out}, true);
      in = out;
    }
  }
  add_linear(p, "head", in, cfg.classes, std::sqrt(1.0 / static_cast<double>(in)), rng);
  return p;
}

CnnOutputs cnn_forward(const ToyCNNConfig& cfg, const ParameterSet& p, const Tensor& images) {
  cfg.validate();
  require_images(images, cfg.image_size, cfg.in_channels);
  CnnOutputs out;
  Tensor x = images;
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t k = 0; k < cfg.blocks_per_stage; ++k) {
      const std::string name = "stage" + std::to_string(s) + ".conv" + std::to_string(k);
      x = relu(bias_add(conv2d(x, param(p, name + ".weight"), k == 0 ? 2 : 1, 1), param(p, name + ".bias")));
    }
    out.stages.push_back(x);
  }
  out.logits = linear(mean(x, {1, 2}), p, "head");
  return out;
}

}  // namespace serkd
