#pragma once

#include <string>
#include <vector>

#include "lgedet/geometry.hpp"
#include "lgedet/lge.hpp"
#include "lgedet/tensor.hpp"

namespace lgedet {

// Per-class sigmoid score grid [H, W, c]; every score lies in (0,1).
struct Heatmap {
  Tensor scores;

  int64_t h() const { return scores.extent(0); }
  int64_t w() const { return scores.extent(1); }
  int64_t classes() const { return scores.extent(2); }
};

// Spatial selection mask. Bits only ever transition 1 -> 0 over a run.
struct StageMask {
  std::vector<uint8_t> bits;  // row-major H*W, 1 = selectable
  int64_t h = 0;
  int64_t w = 0;
  int stage_index = 0;

  static StageMask ones(int64_t h, int64_t w);
  bool at(int64_t row, int64_t col) const { return bits[static_cast<size_t>(row * w + col)] != 0; }
  int64_t count_ones() const;
};

struct Query {
  int64_t row = 0;
  int64_t col = 0;
  int class_id = 0;
  double score = 0.0;
  Tensor feature;  // [C] taken from the enhanced map at the cell
  int stage = 0;
};

// Heatmap branch: 3x3 conv, relu, 1x1 conv, sigmoid.
struct HeadParams {
  Tensor conv1;  // [3,3,C,C]
  Tensor conv2;  // [1,1,C,classes], zero-initialized
};

// Query decoder: one cross-attention over a square feature window centered
// at the query cell, then linear regression / classification readouts.
struct DecodeParams {
  int radius = 3;  // window half-extent; window is (2r+1)^2 cells
  int num_heads = 1;
  Tensor wq, wk, wv, wo;   // [C, C]
  Tensor reg_w;            // [C, 8] -> (dx, dy, z, log l, log w, log h, sin yaw, cos yaw)
  Tensor reg_b;            // [1, 8]
  Tensor cls_w;            // [C, classes]
  Tensor cls_b;            // [1, classes]
};

HeadParams make_head_params(int64_t channels, int num_classes, Rng& rng, DType dt = DType::F32);
DecodeParams make_decode_params(int64_t channels, int num_classes, int radius, Rng& rng,
                                DType dt = DType::F32);

// One detection stage: its own enhancement weights and heads.
struct StageParams {
  LgeParams lge;
  HeadParams head;
  DecodeParams decode;
};

Heatmap heatmap_head(const Tensor& f, const HeadParams& p);

struct MaskedTopkResult {
  std::vector<Query> queries;
  StageMask next_mask;
  bool capped = false;  // k exceeded the feasible cells and was capped
};

// Selects the k highest-scoring (cell, class) candidates among mask-1 cells,
// at most one query per spatial cell (best class wins; ties break by
// score desc, row, col, class). The returned mask zeroes the selected cells.
// mask_k limits how many of the selected cells are zeroed (-1 means all k);
// a smaller mask_k keeps the mask schedule of a smaller selection budget so
// widening k at test time leaves downstream stages' candidate sets intact.
MaskedTopkResult masked_topk(const Heatmap& h, const StageMask& m, int64_t k, int64_t mask_k = -1);

// Morphological erosion: every cell within the kernel x kernel window of a
// zero becomes zero. Kernel must be odd and >= 1; 1 is the identity.
StageMask box_pool_mask(const StageMask& m, int kernel);

// One link of the selection chain: masked top-k over the heatmap, then
// erosion seeded by the newly claimed cells only, ANDed into the running
// mask. next_mask carries stage_index + 1. This is the exact update
// run_multistage applies between stages.
struct SelectionStep {
  std::vector<Query> queries;
  StageMask next_mask;
};
SelectionStep advance_selection(const Heatmap& heatmap, const StageMask& mask, int64_t take,
                                int64_t mask_take, int pool_kernel);

// Elementwise product of the target grid [H, W, c] with the spatial mask;
// suppressed cells contribute exactly zero supervision.
Tensor stage_targets(const Tensor& gt, const StageMask& m);

Box3D decode_query(const Query& q, const Tensor& f, const GridSpec& grid, const DecodeParams& p);

std::vector<Box3D> decode_queries(const std::vector<Query>& queries, const Tensor& f,
                                  const GridSpec& grid, const DecodeParams& p);

// Differentiable regression readout for one query cell: [1, 8] tensor of
// (dx, dy, z, log l, log w, log h, sin yaw, cos yaw). decode_query wraps
// this plus the score refinement into a Box3D.
Tensor decode_regression(int64_t row, int64_t col, const Tensor& f, const DecodeParams& p);

// Classification refinement logits [1, classes] for one query cell.
Tensor decode_class_logits(int64_t row, int64_t col, const Tensor& f, const DecodeParams& p);

enum class StageMode { Parallel, Cascaded };

StageMode stage_mode_from_string(const std::string& s);
const char* stage_mode_name(StageMode m);

// Full per-stage outputs, retained for training and evaluation.
struct StageOutput {
  Tensor enhanced;      // [H, W, C]
  Heatmap heatmap;
  StageMask mask_before;  // mask as seen by this stage's selection
  std::vector<Query> queries;
};

struct MultistageResult {
  std::vector<StageOutput> stages;
  StageMask final_mask;
  std::vector<Query> all_queries;  // concatenated in stage order
};

// Runs K = stages.size() detection stages over f0. Parallel mode enhances
// the same f0 per stage; cascaded mode chains each stage on the previous
// enhanced output. Each stage selects n queries under the running mask,
// which is then updated by masked_topk and box_pool_mask erosion around the
// newly claimed cells (erosion is seeded only by the new zeros so earlier
// suppression zones do not compound). mask_n caps how many selections drive
// the mask update (-1: all n), preserving trained mask schedules when n is
// raised at test time.
MultistageResult run_multistage(const Tensor& f0, const std::vector<StageParams>& stages,
                                const std::vector<LgeVariant>& variants, int64_t n,
                                StageMode mode, int pool_kernel = 3, int64_t mask_n = -1);

// Query dump: header then one "stage,row,col,class,score" record per query.
std::string queries_to_csv(const std::vector<Query>& queries);

}  // namespace lgedet
