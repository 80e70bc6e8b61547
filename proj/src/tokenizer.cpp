#include "serkd/tokenizer.hpp"

#include <vector>

#include "serkd/errors.hpp"
#include "serkd/ops.hpp"

namespace serkd {

std::string to_string(TokenizerKind k) {
  switch (k) {
    case TokenizerKind::max_pool: return "max-pool";
    case TokenizerKind::avg_pool: return "avg-pool";
    case TokenizerKind::strided_conv: return "strided-conv";
  }
  return "?";
}

TokenizerKind parse_tokenizer_kind(const std::string& name) {
  if (name == "max-pool") return TokenizerKind::max_pool;
  if (name == "avg-pool") return TokenizerKind::avg_pool;
  if (name == "strided-conv") return TokenizerKind::strided_conv;
  throw ConfigError("unknown tokenizer '" + name + "' (expected max-pool, avg-pool or strided-conv)");
}

TokenizerSpec TokenizerSpec::make(TokenizerKind kind, std::size_t window_h, std::size_t window_w,
                                  std::size_t channels) {
  if (window_h == 0 || window_w == 0) throw ConfigError("tokenizer window must be positive");
  TokenizerSpec spec;
  spec.kind = kind;
  spec.window_h = window_h;
  spec.window_w = window_w;
  if (kind == TokenizerKind::strided_conv) {
    if (channels == 0) throw ConfigError("strided-conv tokenizer needs a channel count");
    const double tap = 1.0 / static_cast<double>(window_h * window_w);
    std::vector<double> w(window_h * window_w * channels * channels, 0.0);
    for (std::size_t p = 0; p < window_h * window_w; ++p) {
      for (std::size_t c = 0; c < channels; ++c) w[(p * channels + c) * channels + c] = tap;
    }
    spec.theta = Tensor::from({window_h, window_w, channels, channels}, w, true);
  }
  return spec;
}

TokenGrid tokenize(const Tensor& features, const TokenizerSpec& spec, ParamFlow flow) {
  if (features.rank() != 4) {
    throw DimensionError("tokenize expects a (B, H, W, C) map, got " + to_string(features.shape()));
  }
  const std::size_t B = features.dim(0), H = features.dim(1), W = features.dim(2), C = features.dim(3);
  const std::size_t sh = spec.effective_stride_h(), sw = spec.effective_stride_w();
  if (H % sh != 0 || W % sw != 0) {
    throw ConfigError("feature map " + std::to_string(H) + "x" + std::to_string(W) + " is not divisible by stride " +
                      std::to_string(sh) + "x" + std::to_string(sw));
  }
  if (spec.window_h > sh || spec.window_w > sw) {
    throw ConfigError("tokenizer windows may not overlap (window larger than stride)");
  }
  const std::size_t rows = H / sh, cols = W / sw;
  Tensor tokens;
  switch (spec.kind) {
    case TokenizerKind::avg_pool:
      tokens = avg_pool2d(features, spec.window_h, spec.window_w, sh, sw);
      break;
    case TokenizerKind::max_pool:
      tokens = max_pool2d(features, spec.window_h, spec.window_w, sh, sw);
      break;
    case TokenizerKind::strided_conv: {
      if (sh != spec.window_h || sw != spec.window_w) throw ConfigError("strided-conv uses stride = window");
      if (spec.theta.shape() != Shape{spec.window_h, spec.window_w, C, C}) {
        throw DimensionError("strided-conv kernel " + to_string(spec.theta.shape()) + " does not fit " +
                             std::to_string(C) + " channels");
      }
      const Tensor theta = flow == ParamFlow::detached ? detach(spec.theta) : spec.theta;
      auto patches = patchify(features, sh, sw);
      tokens = matmul(patches, reshape(theta, {sh * sw * C, C}));
      break;
    }
  }
  return TokenGrid::make(reshape(tokens, {B, rows * cols, C}), rows, cols, TokenSource::cnn_tokens);
}

std::size_t stage_plan(std::size_t stage_index) {
  switch (stage_index) {
    case 1: return 4;
    case 2: return 2;
    case 3: return 1;
    default: throw ContractError("stage_plan: stage index must be 1, 2 or 3, got " + std::to_string(stage_index));
  }
}

}  // namespace serkd
