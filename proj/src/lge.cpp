#include "lgedet/lge.hpp"

#include <cmath>
#include <stdexcept>

namespace lgedet {

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// Nearest upsample followed by a learned pointwise conv; aligns a
// half-resolution serial stream with the resolution its consumer expects.
Tensor resolution_bridge(const Tensor& x, const Tensor& bridge_kernel) {
  return conv2d(upsample2x_nearest(x), bridge_kernel);
}

}  // namespace

LgeVariant lge_variant_from_string(const std::string& s) {
  check(s.size() == 1 && s[0] >= 'A' && s[0] <= 'G',
        "lge variant must be one of A..G, got '" + s + "'");
  return static_cast<LgeVariant>(s[0] - 'A');
}

const char* lge_variant_name(LgeVariant v) {
  static const char* names[] = {"A", "B", "C", "D", "E", "F", "G"};
  return names[static_cast<int>(v)];
}

int VariantWiring::stage_count() const {
  int n = static_cast<int>(tail.size());
  for (const auto& b : branches) n += static_cast<int>(b.size());
  return n;
}

VariantWiring build_variant(LgeVariant id) {
  using S = LgeStage;
  VariantWiring w;
  w.id = id;
  switch (id) {
    case LgeVariant::A:
      w.branches = {{S::WaveletEncode}};
      w.tail = {S::WaveletDecode};
      break;
    case LgeVariant::B:
      w.branches = {{S::HybridEncode}};
      w.tail = {S::UpsampleStub};
      break;
    case LgeVariant::C:
      w.branches = {{S::HybridEncode}, {S::ProjectDownsampled}};
      w.merge_count = 1;
      w.tail = {S::WaveletDecode};
      break;
    case LgeVariant::D:
      w.branches = {{S::HybridEncode, S::WaveletEncode}};
      w.tail = {S::WaveletDecode};
      w.needs_resolution_bridge = true;
      break;
    case LgeVariant::E:
      w.branches = {{S::WaveletEncode, S::HybridEncode}};
      w.tail = {S::WaveletDecode};
      w.flagged_unstable = true;
      w.needs_resolution_bridge = true;
      break;
    case LgeVariant::F:
      w.branches = {{S::WaveletEncode}};
      w.tail = {S::WaveletDecode, S::HybridEncodeFullRes};
      break;
    case LgeVariant::G:
      w.branches = {{S::WaveletEncode}, {S::HybridEncode}};
      w.merge_count = 1;
      w.tail = {S::WaveletDecode};
      break;
  }
  return w;
}

LgeIterationParams make_lge_iteration_params(LgeVariant v, int64_t channels, int num_heads,
                                             Rng& rng, DType dt) {
  check(channels % 4 == 0, "lge params: channels must be divisible by 4");
  LgeIterationParams p;
  const double pw_std = std::sqrt(1.0 / static_cast<double>(channels));
  const bool wants_wenc = v == LgeVariant::A || v == LgeVariant::D || v == LgeVariant::E ||
                          v == LgeVariant::F || v == LgeVariant::G;
  const bool wants_henc = v != LgeVariant::A && v != LgeVariant::F;
  const bool wants_wdec = v != LgeVariant::B;
  if (wants_wenc) p.wenc = make_wavelet_encode_params(channels, rng, dt);
  if (wants_henc) p.henc = make_attention_params(channels, num_heads, rng, dt, 2);
  if (v == LgeVariant::F) p.henc = make_attention_params(channels, num_heads, rng, dt, 1);
  if (wants_wdec) p.wdec = make_wavelet_decode_params(channels, rng, dt);
  if (v == LgeVariant::B)
    p.stub_kernel = Tensor::randn({1, 1, channels, channels}, rng, pw_std, dt, true);
  if (v == LgeVariant::C)
    p.s1_projection = Tensor::randn({1, 1, channels, channels}, rng, pw_std, dt, true);
  if (v == LgeVariant::D || v == LgeVariant::E)
    p.bridge_kernel = Tensor::randn({1, 1, channels, channels}, rng, pw_std, dt, true);
  return p;
}

LgeParams make_lge_params(LgeVariant v, int64_t channels, int num_heads, int iterations,
                          Rng& rng, DType dt) {
  check(iterations >= 1, "lge params: iterations must be >= 1");
  LgeParams p;
  p.iterations = iterations;
  for (int i = 0; i < iterations; ++i)
    p.per_iteration.push_back(make_lge_iteration_params(v, channels, num_heads, rng, dt));
  return p;
}

namespace {

void collect_defined(std::vector<Tensor>& out, std::initializer_list<Tensor> ts) {
  for (const Tensor& t : ts)
    if (t.defined()) out.push_back(t);
}

}  // namespace

void collect_lge_tensors(LgeParams& p, std::vector<Tensor>& out) {
  for (LgeIterationParams& it : p.per_iteration) {
    collect_defined(out, {it.wenc.reduce_kernel});
    collect_defined(out, {it.henc.wq, it.henc.wk, it.henc.wv, it.henc.wo, it.henc.ffn_w1,
                          it.henc.ffn_w2, it.henc.down_kernel});
    collect_defined(out, {it.wdec.fw_kernel, it.wdec.depth_kernel1, it.wdec.depth_kernel2,
                          it.wdec.decode_kernel, it.wdec.fp_projection});
    collect_defined(out, {it.stub_kernel, it.s1_projection, it.bridge_kernel});
  }
}

Tensor lge_iteration(const Tensor& x, const LgeIterationParams& p, LgeVariant variant) {
  check(x.defined(), "lge_iteration: undefined input");
  check(x.rank() == 3, "lge_iteration: input must be [H,W,C]");
  const int64_t h = x.extent(0), w = x.extent(1), c = x.extent(2);
  check(h % 2 == 0 && w % 2 == 0, "lge_iteration: spatial extents must be even");
  check(c % 4 == 0, "lge_iteration: channels must be divisible by 4");

  switch (variant) {
    case LgeVariant::A: {
      const Tensor f2 = wavelet_encode(x, p.wenc);
      const Tensor zero_branch = Tensor::zeros(f2.shape(), f2.dtype());
      return wavelet_decode(f2, zero_branch, x, p.wdec);
    }
    case LgeVariant::B: {
      const Tensor f3 = hybrid_encode(x, p.henc);
      return conv2d(upsample2x_nearest(f3), p.stub_kernel);
    }
    case LgeVariant::C: {
      const Tensor s1 = hybrid_downsample(x, p.henc);
      const Tensor local = conv2d(s1, p.s1_projection);
      const Tensor f3 = hybrid_encode(x, p.henc);
      return wavelet_decode(local, f3, x, p.wdec);
    }
    case LgeVariant::D: {
      const Tensor mid = resolution_bridge(hybrid_encode(x, p.henc), p.bridge_kernel);
      const Tensor f2 = wavelet_encode(mid, p.wenc);
      const Tensor zero_branch = Tensor::zeros(f2.shape(), f2.dtype());
      return wavelet_decode(f2, zero_branch, x, p.wdec);
    }
    case LgeVariant::E: {
      check(h % 4 == 0 && w % 4 == 0,
            "lge_iteration: variant E needs extents divisible by 4");
      const Tensor f2a = wavelet_encode(x, p.wenc);  // [H/2, W/2, C]
      const Tensor deep = hybrid_encode(f2a, p.henc);  // [H/4, W/4, C]
      const Tensor f2 = resolution_bridge(deep, p.bridge_kernel);
      const Tensor zero_branch = Tensor::zeros(f2.shape(), f2.dtype());
      return wavelet_decode(f2, zero_branch, x, p.wdec);
    }
    case LgeVariant::F: {
      const Tensor f2 = wavelet_encode(x, p.wenc);
      const Tensor zero_branch = Tensor::zeros(f2.shape(), f2.dtype());
      const Tensor restored = wavelet_decode(f2, zero_branch, x, p.wdec);
      return hybrid_encode(restored, p.henc);  // stride-1 configuration
    }
    case LgeVariant::G: {
      const Tensor f2 = wavelet_encode(x, p.wenc);
      const Tensor f3 = hybrid_encode(x, p.henc);
      return wavelet_decode(f2, f3, x, p.wdec);
    }
  }
  throw std::invalid_argument("lge_iteration: unknown variant");
}

Tensor lge_forward(const Tensor& f0, const LgeParams& params, LgeVariant variant) {
  check(params.iterations >= 1, "lge_forward: iterations must be >= 1");
  check(static_cast<int>(params.per_iteration.size()) == params.iterations,
        "lge_forward: per-iteration parameter count mismatch");
  Tensor x = f0;
  for (int i = 0; i < params.iterations; ++i)
    x = lge_iteration(x, params.per_iteration[static_cast<size_t>(i)], variant);
  return x;
}

}  // namespace lgedet
