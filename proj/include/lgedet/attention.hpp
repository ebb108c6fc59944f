#pragma once

#include "lgedet/tensor.hpp"

namespace lgedet {

// Parameters of one Hybrid Encode block: a depthwise strided downsample, the
// self-attention projections, and the feed-forward expansion. All weight
// matrices are bias-free.
struct AttentionParams {
  int num_heads = 4;
  int head_dim = 0;  // num_heads * head_dim must equal the channel count
  Tensor wq;         // [C, C]
  Tensor wk;         // [C, C]
  Tensor wv;         // [C, C]
  Tensor wo;         // [C, C]
  Tensor ffn_w1;     // [C, 4C]
  Tensor ffn_w2;     // [4C, C]
  Tensor down_kernel;         // [s,s,1,C] depthwise, window == stride s
  int downsample_stride = 2;  // 1 selects the full-resolution configuration
};

AttentionParams make_attention_params(int64_t channels, int num_heads, Rng& rng,
                                      DType dt = DType::F32, int downsample_stride = 2);

// Scaled dot-product self-attention over tokens [T, C]: per head,
// softmax(Q K^T / sqrt(head_dim)) V; heads concatenated, output-projected.
// No residual connection here.
Tensor multi_head_self_attention(const Tensor& x, const AttentionParams& p);

// x + W2 relu(W1 x), shape preserving.
Tensor feed_forward(const Tensor& x, const AttentionParams& p);

// Global enhancement branch: depthwise strided conv, flatten to tokens,
// pre-attention layer norm, self-attention, feed-forward, reshape back to a
// spatial map. With stride 2 the output is [H/2, W/2, C], matching the
// wavelet encoder; with stride 1 the resolution is preserved.
Tensor hybrid_encode(const Tensor& f0, const AttentionParams& p);

// The downsampled pre-attention map S1; exposed because one enhancement
// variant taps it as a substitute local stream.
Tensor hybrid_downsample(const Tensor& f0, const AttentionParams& p);

}  // namespace lgedet
