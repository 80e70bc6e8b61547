#pragma once

#include <cstddef>
#include <string>

#include "serkd/superpixel.hpp"
#include "serkd/tensor.hpp"

namespace serkd {

enum class TokenizerKind { max_pool, avg_pool, strided_conv };

std::string to_string(TokenizerKind k);
TokenizerKind parse_tokenizer_kind(const std::string& name);

struct TokenizerSpec {
  TokenizerKind kind = TokenizerKind::avg_pool;
  std::size_t window_h = 1, window_w = 1;
  std::size_t stride_h = 0, stride_w = 0;  // 0 means "same as the window"
  Tensor theta;                            // (H_p, W_p, C, C), strided-conv only

  /// Strided-conv kernels start as the averaging kernel: 1/(H_p W_p) per tap,
  /// identity across channels.
  static TokenizerSpec make(TokenizerKind kind, std::size_t window_h, std::size_t window_w, std::size_t channels = 0);

  std::size_t effective_stride_h() const { return stride_h == 0 ? window_h : stride_h; }
  std::size_t effective_stride_w() const { return stride_w == 0 ? window_w : stride_w; }
};

/// Whether tokenization may send gradients into theta. Teacher features go
/// through with `detached`.
enum class ParamFlow { trainable, detached };

/// (B, H, W, C) feature map to a token grid of (H/stride_h) x (W/stride_w)
/// tokens.
TokenGrid tokenize(const Tensor& features, const TokenizerSpec& spec, ParamFlow flow = ParamFlow::trainable);

/// Stride for CNN stage 1, 2 or 3 (4, 2, 1) so every stage keeps the same
/// token count when resolution halves per stage.
std::size_t stage_plan(std::size_t stage_index);

}  // namespace serkd
