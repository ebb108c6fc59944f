#include "lgedet/wavelet.hpp"

#include <cmath>
#include <stdexcept>

namespace lgedet {

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

template <typename Fn>
void for_dtype(DType dt, Fn&& fn) {
  if (dt == DType::F32) {
    fn.template operator()<float>();
  } else {
    fn.template operator()<double>();
  }
}

// Applies the symmetric orthogonal Haar block stencil between a full
// [2h2, 2w2, c] plane and four [h2, w2, c] subband planes. One side is read
// and the other written, selected by `to_subbands`; the caller passes
// mutable pointers for whichever side is written.
template <typename T>
void haar_block_stencil(T* full, T* ll, T* lh, T* hl, T* hh, int64_t h2, int64_t w2, int64_t c,
                        bool to_subbands) {
  const int64_t w = 2 * w2;
  for (int64_t y = 0; y < h2; ++y) {
    for (int64_t x = 0; x < w2; ++x) {
      const int64_t base = (y * w2 + x) * c;
      T* pll = ll + base;
      T* plh = lh + base;
      T* phl = hl + base;
      T* phh = hh + base;
      T* pa = full + ((2 * y) * w + 2 * x) * c;
      T* pb = pa + c;
      T* pc = full + ((2 * y + 1) * w + 2 * x) * c;
      T* pd = pc + c;
      if (to_subbands) {
        for (int64_t j = 0; j < c; ++j) {
          const T a = pa[j], b = pb[j], cc = pc[j], dd = pd[j];
          pll[j] = (a + b + cc + dd) / 2;
          plh[j] = (a - b + cc - dd) / 2;
          phl[j] = (a + b - cc - dd) / 2;
          phh[j] = (a - b - cc + dd) / 2;
        }
      } else {
        for (int64_t j = 0; j < c; ++j) {
          const T vll = pll[j], vlh = plh[j], vhl = phl[j], vhh = phh[j];
          pa[j] = (vll + vlh + vhl + vhh) / 2;
          pb[j] = (vll - vlh + vhl - vhh) / 2;
          pc[j] = (vll + vlh - vhl - vhh) / 2;
          pd[j] = (vll - vlh - vhl + vhh) / 2;
        }
      }
    }
  }
}

// Same stencil but accumulating (+=) instead of assigning; used by the
// backward passes so fan-out gradients combine correctly.
template <typename T>
void haar_block_stencil_acc(const T* full_in, T* full_out, const T* ll_in, const T* lh_in,
                            const T* hl_in, const T* hh_in, T* ll_out, T* lh_out, T* hl_out,
                            T* hh_out, int64_t h2, int64_t w2, int64_t c, bool to_subbands) {
  const int64_t w = 2 * w2;
  for (int64_t y = 0; y < h2; ++y) {
    for (int64_t x = 0; x < w2; ++x) {
      const int64_t base = (y * w2 + x) * c;
      const int64_t ba = ((2 * y) * w + 2 * x) * c;
      const int64_t bc = ((2 * y + 1) * w + 2 * x) * c;
      if (to_subbands) {
        for (int64_t j = 0; j < c; ++j) {
          const T a = full_in[ba + j], b = full_in[ba + c + j];
          const T cc = full_in[bc + j], dd = full_in[bc + c + j];
          ll_out[base + j] += (a + b + cc + dd) / 2;
          lh_out[base + j] += (a - b + cc - dd) / 2;
          hl_out[base + j] += (a + b - cc - dd) / 2;
          hh_out[base + j] += (a - b - cc + dd) / 2;
        }
      } else {
        for (int64_t j = 0; j < c; ++j) {
          const T vll = ll_in[base + j], vlh = lh_in[base + j];
          const T vhl = hl_in[base + j], vhh = hh_in[base + j];
          full_out[ba + j] += (vll + vlh + vhl + vhh) / 2;
          full_out[ba + c + j] += (vll - vlh + vhl - vhh) / 2;
          full_out[bc + j] += (vll + vlh - vhl - vhh) / 2;
          full_out[bc + c + j] += (vll - vlh - vhl + vhh) / 2;
        }
      }
    }
  }
}

}  // namespace

SubbandSet dwt2_haar(const Tensor& x) {
  check(x.defined(), "dwt2_haar: undefined input");
  check(x.rank() == 3, "dwt2_haar: input must be [H,W,C]");
  const int64_t h = x.extent(0), w = x.extent(1), c = x.extent(2);
  check(h % 2 == 0 && w % 2 == 0,
        "dwt2_haar: spatial extents must be even, got " + std::to_string(h) + "x" +
            std::to_string(w));
  const int64_t h2 = h / 2, w2 = w / 2;
  SubbandSet s;
  s.ll = Tensor::zeros({h2, w2, c}, x.dtype());
  s.lh = Tensor::zeros({h2, w2, c}, x.dtype());
  s.hl = Tensor::zeros({h2, w2, c}, x.dtype());
  s.hh = Tensor::zeros({h2, w2, c}, x.dtype());
  for_dtype(x.dtype(), [&]<typename T>() {
    haar_block_stencil<T>(detail::data_of<T>(x.impl()).data(),
                          detail::data_of<T>(s.ll.impl()).data(),
                          detail::data_of<T>(s.lh.impl()).data(),
                          detail::data_of<T>(s.hl.impl()).data(),
                          detail::data_of<T>(s.hh.impl()).data(), h2, w2, c, true);
  });
  auto xi = x.impl_ptr();
  auto lli = s.ll.impl_ptr();
  auto lhi = s.lh.impl_ptr();
  auto hli = s.hl.impl_ptr();
  auto hhi = s.hh.impl_ptr();
  detail::record({&x}, {&s.ll, &s.lh, &s.hl, &s.hh}, [xi, lli, lhi, hli, hhi, h2, w2, c]() {
    if (!xi->needs_grad) return;
    for_dtype(xi->dtype, [&]<typename T>() {
      // Synthesis stencil applied to the subband gradients.
      haar_block_stencil_acc<T>(nullptr, detail::grad_of<T>(xi.get()).data(),
                                detail::grad_of<T>(lli.get()).data(),
                                detail::grad_of<T>(lhi.get()).data(),
                                detail::grad_of<T>(hli.get()).data(),
                                detail::grad_of<T>(hhi.get()).data(), nullptr, nullptr, nullptr,
                                nullptr, h2, w2, c, false);
    });
  });
  return s;
}

Tensor idwt2_haar(const SubbandSet& s) {
  check(s.ll.defined() && s.lh.defined() && s.hl.defined() && s.hh.defined(),
        "idwt2_haar: undefined subband");
  check(s.ll.rank() == 3, "idwt2_haar: subbands must be [H/2,W/2,C]");
  const bool consistent = s.ll.shape() == s.lh.shape() && s.ll.shape() == s.hl.shape() &&
                          s.ll.shape() == s.hh.shape();
  check(consistent, "idwt2_haar: subband shapes are inconsistent");
  check(s.ll.dtype() == s.lh.dtype() && s.ll.dtype() == s.hl.dtype() &&
            s.ll.dtype() == s.hh.dtype(),
        "idwt2_haar: subband dtypes are inconsistent");
  const int64_t h2 = s.ll.extent(0), w2 = s.ll.extent(1), c = s.ll.extent(2);
  Tensor out = Tensor::zeros({2 * h2, 2 * w2, c}, s.ll.dtype());
  for_dtype(out.dtype(), [&]<typename T>() {
    haar_block_stencil<T>(detail::data_of<T>(out.impl()).data(),
                          detail::data_of<T>(s.ll.impl()).data(),
                          detail::data_of<T>(s.lh.impl()).data(),
                          detail::data_of<T>(s.hl.impl()).data(),
                          detail::data_of<T>(s.hh.impl()).data(), h2, w2, c, false);
  });
  auto lli = s.ll.impl_ptr();
  auto lhi = s.lh.impl_ptr();
  auto hli = s.hl.impl_ptr();
  auto hhi = s.hh.impl_ptr();
  auto oi = out.impl_ptr();
  detail::record({&s.ll, &s.lh, &s.hl, &s.hh}, {&out}, [lli, lhi, hli, hhi, oi, h2, w2, c]() {
    for_dtype(oi->dtype, [&]<typename T>() {
      // Analysis stencil applied to the output gradient. Subbands always
      // share needs_grad in practice; accumulation into non-tracked subband
      // grads is skipped individually.
      std::vector<T> zero;
      auto grad_or_scratch = [&](detail::TensorImpl* impl) -> T* {
        if (impl->needs_grad) return detail::grad_of<T>(impl).data();
        if (zero.empty()) zero.assign(static_cast<size_t>(h2 * w2 * c), T(0));
        return zero.data();
      };
      haar_block_stencil_acc<T>(detail::grad_of<T>(oi.get()).data(), nullptr, nullptr, nullptr,
                                nullptr, nullptr, grad_or_scratch(lli.get()),
                                grad_or_scratch(lhi.get()), grad_or_scratch(hli.get()),
                                grad_or_scratch(hhi.get()), h2, w2, c, true);
    });
  });
  return out;
}

WaveletEncodeParams make_wavelet_encode_params(int64_t channels, Rng& rng, DType dt) {
  check(channels % 4 == 0, "make_wavelet_encode_params: channels must be divisible by 4");
  WaveletEncodeParams p;
  p.reduce_kernel =
      Tensor::randn({1, 1, channels, channels / 4}, rng, std::sqrt(1.0 / channels), dt, true);
  return p;
}

WaveletDecodeParams make_wavelet_decode_params(int64_t channels, Rng& rng, DType dt) {
  check(channels % 2 == 0, "make_wavelet_decode_params: channels must be even");
  const int64_t c = channels;
  WaveletDecodeParams p;
  p.fw_kernel = Tensor::randn({1, 1, c / 2, c}, rng, std::sqrt(2.0 / c), dt, true);
  p.depth_kernel1 = Tensor::randn({3, 3, c, c}, rng, std::sqrt(2.0 / (9 * c)), dt, true);
  p.depth_kernel2 = Tensor::randn({3, 3, c, c}, rng, std::sqrt(2.0 / (9 * c)), dt, true);
  p.decode_kernel = Tensor::randn({1, 1, 2 * c, c}, rng, std::sqrt(1.0 / (2 * c)), dt, true);
  p.fp_projection = Tensor::randn({1, 1, c, c}, rng, std::sqrt(1.0 / c), dt, true);
  return p;
}

Tensor wavelet_encode(const Tensor& f0, const WaveletEncodeParams& p) {
  check(f0.defined(), "wavelet_encode: undefined input");
  check(f0.rank() == 3, "wavelet_encode: input must be [H,W,C]");
  const int64_t c = f0.extent(2);
  check(c % 4 == 0, "wavelet_encode: channels must be divisible by 4, got " + std::to_string(c));
  check(f0.extent(0) % 2 == 0 && f0.extent(1) % 2 == 0,
        "wavelet_encode: spatial extents must be even");
  const Tensor f1 = conv2d(f0, p.reduce_kernel);
  const SubbandSet s = dwt2_haar(f1);
  return concat({s.ll, s.lh, s.hl, s.hh}, 2);
}

Tensor wavelet_decode(const Tensor& f2, const Tensor& f3, const Tensor& f0,
                      const WaveletDecodeParams& p) {
  check(f2.defined() && f3.defined() && f0.defined(), "wavelet_decode: undefined input");
  check(f2.rank() == 3 && f3.rank() == 3 && f0.rank() == 3,
        "wavelet_decode: inputs must be [H,W,C]");
  check(f2.shape() == f3.shape(), "wavelet_decode: half-resolution streams must share a shape");
  const int64_t c = f2.extent(2);
  check(c % 2 == 0, "wavelet_decode: channels must be even");
  check(f0.extent(0) == 2 * f2.extent(0) && f0.extent(1) == 2 * f2.extent(1) &&
            f0.extent(2) == c,
        "wavelet_decode: f0 must be the full-resolution companion of f2/f3");

  const Tensor merged = concat({f2, f3}, 2);  // [H/2, W/2, 2C]
  SubbandSet s;
  const int64_t half = c / 2;
  s.ll = narrow(merged, 2, 0 * half, half);
  s.lh = narrow(merged, 2, 1 * half, half);
  s.hl = narrow(merged, 2, 2 * half, half);
  s.hh = narrow(merged, 2, 3 * half, half);
  const Tensor up = idwt2_haar(s);                // [H, W, C/2]
  const Tensor s2 = conv2d(up, p.fw_kernel);      // [H, W, C]
  const Tensor fp = conv2d(f0, p.fp_projection);  // [H, W, C]
  const Tensor z = add(fp, s2);
  const Tensor f4 = add(z, conv2d(relu(conv2d(z, p.depth_kernel1, 1, 1)), p.depth_kernel2, 1, 1));
  return conv2d(concat({f4, f0}, 2), p.decode_kernel);
}

}  // namespace lgedet
