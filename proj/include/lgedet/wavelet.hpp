#pragma once

#include "lgedet/tensor.hpp"

namespace lgedet {

// Orthonormal Haar analysis output. All four subbands are [H/2, W/2, C] for
// a [H, W, C] input; the transform preserves squared energy.
struct SubbandSet {
  Tensor ll, lh, hl, hh;
};

// Per 2x2 block [[a,b],[c,d]] (row-major):
//   ll=(a+b+c+d)/2  lh=(a-b+c-d)/2  hl=(a+b-c-d)/2  hh=(a-b-c+d)/2
// H and W must be even. Differentiable.
SubbandSet dwt2_haar(const Tensor& x);

// Exact inverse of dwt2_haar (the block matrix is a symmetric orthogonal
// involution, so synthesis applies the same stencil).
Tensor idwt2_haar(const SubbandSet& s);

struct WaveletEncodeParams {
  Tensor reduce_kernel;  // [1,1,C,C/4] pointwise channel reduction
};

struct WaveletDecodeParams {
  Tensor fw_kernel;      // [1,1,C/2,C] pointwise after inverse DWT
  Tensor depth_kernel1;  // [3,3,C,C]
  Tensor depth_kernel2;  // [3,3,C,C]
  Tensor decode_kernel;  // [1,1,2C,C]
  Tensor fp_projection;  // [1,1,C,C] full-resolution skip projection
};

WaveletEncodeParams make_wavelet_encode_params(int64_t channels, Rng& rng,
                                               DType dt = DType::F32);
WaveletDecodeParams make_wavelet_decode_params(int64_t channels, Rng& rng,
                                               DType dt = DType::F32);

// Channel reduction to C/4, Haar analysis, subband concatenation in order
// (LL, LH, HL, HH). [H,W,C] -> [H/2,W/2,C]; C must be divisible by 4.
Tensor wavelet_encode(const Tensor& f0, const WaveletEncodeParams& p);

// Fuses the two half-resolution streams back to full resolution:
// concat(f2,f3) is split into four C/2 subbands and inverse-DWT'd, a
// pointwise projection restores C channels, a projected full-resolution skip
// is added, a two-conv residual block deepens the result, and a final
// pointwise decode reduces concat(result, f0) from 2C to C channels.
Tensor wavelet_decode(const Tensor& f2, const Tensor& f3, const Tensor& f0,
                      const WaveletDecodeParams& p);

}  // namespace lgedet
