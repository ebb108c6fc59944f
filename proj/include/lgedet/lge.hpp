#pragma once

#include <vector>

#include "lgedet/attention.hpp"
#include "lgedet/tensor.hpp"
#include "lgedet/wavelet.hpp"

namespace lgedet {

enum class LgeVariant { A, B, C, D, E, F, G };

LgeVariant lge_variant_from_string(const std::string& s);
const char* lge_variant_name(LgeVariant v);

// Conceptual processing node of an enhancement wiring. Resolution bridges
// (nearest upsample + pointwise conv) used by the serial variants are
// implementation plumbing and are not wiring stages.
enum class LgeStage {
  WaveletEncode,
  HybridEncode,
  HybridEncodeFullRes,
  WaveletDecode,
  UpsampleStub,
  ProjectDownsampled,
};

// Topology of one variant: parallel branches (each a serial stage chain),
// the number of concat merges joining them, and the serial tail consuming
// the merge (or the single branch).
struct VariantWiring {
  LgeVariant id = LgeVariant::G;
  std::vector<std::vector<LgeStage>> branches;
  int merge_count = 0;
  std::vector<LgeStage> tail;
  bool flagged_unstable = false;  // reported non-convergent upstream
  bool needs_resolution_bridge = false;

  int stage_count() const;
};

VariantWiring build_variant(LgeVariant id);

// Weights for one enhancement iteration. Only the fields used by the chosen
// variant are defined; make_lge_iteration_params allocates accordingly.
struct LgeIterationParams {
  WaveletEncodeParams wenc;
  AttentionParams henc;
  WaveletDecodeParams wdec;
  Tensor stub_kernel;     // [1,1,C,C] pointwise after nearest upsample (variant B)
  Tensor s1_projection;   // [1,1,C,C] learned local substitute (variant C)
  Tensor bridge_kernel;   // [1,1,C,C] pointwise after the resolution bridge (D, E)
};

struct LgeParams {
  int iterations = 4;
  std::vector<LgeIterationParams> per_iteration;  // size == iterations
};

LgeIterationParams make_lge_iteration_params(LgeVariant v, int64_t channels, int num_heads,
                                             Rng& rng, DType dt = DType::F32);
LgeParams make_lge_params(LgeVariant v, int64_t channels, int num_heads, int iterations,
                          Rng& rng, DType dt = DType::F32);

// Collects every trainable tensor of the parameter set, in a fixed order.
void collect_lge_tensors(LgeParams& p, std::vector<Tensor>& out);

// Runs `iterations` enhancement passes over a [H,W,C] map. Shape preserving
// for every variant. H, W must be even (divisible by 4 for variant E) and C
// divisible by 4.
Tensor lge_forward(const Tensor& f0, const LgeParams& params, LgeVariant variant);

// Single enhancement pass with one iteration's weights.
Tensor lge_iteration(const Tensor& f0, const LgeIterationParams& p, LgeVariant variant);

}  // namespace lgedet
