#include "lgedet/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace lgedet {

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

AttentionParams make_attention_params(int64_t channels, int num_heads, Rng& rng, DType dt,
                                      int downsample_stride) {
  check(num_heads >= 1, "make_attention_params: num_heads must be >= 1");
  check(channels % num_heads == 0,
        "make_attention_params: channels must be divisible by num_heads");
  check(downsample_stride == 1 || downsample_stride == 2,
        "make_attention_params: downsample_stride must be 1 or 2");
  AttentionParams p;
  p.num_heads = num_heads;
  p.head_dim = static_cast<int>(channels) / num_heads;
  p.downsample_stride = downsample_stride;
  const double proj_std = std::sqrt(1.0 / static_cast<double>(channels));
  p.wq = Tensor::randn({channels, channels}, rng, proj_std, dt, true);
  p.wk = Tensor::randn({channels, channels}, rng, proj_std, dt, true);
  p.wv = Tensor::randn({channels, channels}, rng, proj_std, dt, true);
  p.wo = Tensor::randn({channels, channels}, rng, proj_std, dt, true);
  p.ffn_w1 = Tensor::randn({channels, 4 * channels}, rng, std::sqrt(2.0 / channels), dt, true);
  p.ffn_w2 = Tensor::randn({4 * channels, channels}, rng, std::sqrt(1.0 / (4.0 * channels)), dt,
                           true);
  const int64_t ks = downsample_stride;  // unpadded window == stride, so no boundary effects
  p.down_kernel = Tensor::randn({ks, ks, 1, channels}, rng,
                                std::sqrt(2.0 / static_cast<double>(ks * ks)), dt, true);
  return p;
}

Tensor multi_head_self_attention(const Tensor& x, const AttentionParams& p) {
  check(x.defined(), "multi_head_self_attention: undefined input");
  check(x.rank() == 2, "multi_head_self_attention: input must be [T,C]");
  const int64_t c = x.extent(1);
  check(static_cast<int64_t>(p.num_heads) * p.head_dim == c,
        "multi_head_self_attention: num_heads * head_dim != channels");
  const Tensor q = matmul(x, p.wq);
  const Tensor k = matmul(x, p.wk);
  const Tensor v = matmul(x, p.wv);
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.head_dim));
  std::vector<Tensor> heads;
  heads.reserve(static_cast<size_t>(p.num_heads));
  for (int h = 0; h < p.num_heads; ++h) {
    const int64_t off = static_cast<int64_t>(h) * p.head_dim;
    const Tensor qh = narrow(q, 1, off, p.head_dim);
    const Tensor kh = narrow(k, 1, off, p.head_dim);
    const Tensor vh = narrow(v, 1, off, p.head_dim);
    const Tensor scores = mul_scalar(matmul(qh, transpose2d(kh)), scale);
    const Tensor weights = softmax_lastdim(scores);
    heads.push_back(matmul(weights, vh));
  }
  const Tensor merged = p.num_heads == 1 ? heads.front() : concat(heads, 1);
  return matmul(merged, p.wo);
}

Tensor feed_forward(const Tensor& x, const AttentionParams& p) {
  check(x.defined(), "feed_forward: undefined input");
  check(x.rank() == 2, "feed_forward: input must be [T,C]");
  return add(x, matmul(relu(matmul(x, p.ffn_w1)), p.ffn_w2));
}

Tensor hybrid_downsample(const Tensor& f0, const AttentionParams& p) {
  check(f0.defined(), "hybrid_downsample: undefined input");
  check(f0.rank() == 3, "hybrid_downsample: input must be [H,W,C]");
  if (p.downsample_stride == 2) {
    check(f0.extent(0) % 2 == 0 && f0.extent(1) % 2 == 0,
          "hybrid_downsample: spatial extents must be even");
  }
  const int64_t c = f0.extent(2);
  // Unpadded 2x2 windows: a spatially constant field stays constant after downsampling.
  return conv2d(f0, p.down_kernel, p.downsample_stride, 0, static_cast<int>(c));
}

Tensor hybrid_encode(const Tensor& f0, const AttentionParams& p) {
  const Tensor s1 = hybrid_downsample(f0, p);
  const int64_t ho = s1.extent(0), wo = s1.extent(1), c = s1.extent(2);
  const Tensor tokens = reshape(s1, {ho * wo, c});
  const Tensor normed = layer_norm_lastdim(tokens);
  const Tensor attended = multi_head_self_attention(normed, p);
  const Tensor mixed = feed_forward(attended, p);
  return reshape(mixed, {ho, wo, c});
}

}  // namespace lgedet
