#include <cmath>
#include <set>
#include <vector>

#include "doctest.h"
#include "lgedet/head.hpp"

using namespace lgedet;

namespace {

StageParams small_stage(uint64_t seed, int64_t channels = 8, int num_classes = 2) {
  Rng rng(seed);
  StageParams sp;
  sp.lge = make_lge_params(LgeVariant::G, channels, 2, 1, rng, DType::F32);
  sp.head = make_head_params(channels, num_classes, rng, DType::F32);
  sp.decode = make_decode_params(channels, num_classes, 2, rng, DType::F32);
  return sp;
}

Heatmap random_heatmap(int64_t h, int64_t w, int64_t classes, Rng& rng) {
  Tensor logits = Tensor::randn({h, w, classes}, rng, 1.0, DType::F64);
  return Heatmap{sigmoid(logits)};
}

}  // namespace

TEST_CASE("zero-initialized final conv yields exactly 0.5 everywhere") {
  Rng rng(17);
  HeadParams p = make_head_params(8, 3, rng, DType::F32);
  Tensor f = Tensor::randn({6, 6, 8}, rng, 1.0, DType::F32);
  const Heatmap h = heatmap_head(f, p);
  REQUIRE(h.h() == 6);
  REQUIRE(h.w() == 6);
  REQUIRE(h.classes() == 3);
  for (double v : h.scores.values()) CHECK(v == 0.5);
}

TEST_CASE("scores stay strictly inside (0,1) for random weights") {
  Rng rng(19);
  HeadParams p = make_head_params(8, 3, rng, DType::F32);
  p.conv2 = Tensor::randn({1, 1, 8, 3}, rng, 0.5, DType::F32, true);
  Tensor f = Tensor::randn({6, 6, 8}, rng, 2.0, DType::F32);
  for (double v : heatmap_head(f, p).scores.values()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("top-k picks the two highest cells and zeroes exactly them") {
  const Heatmap h{Tensor::from_values({2, 2, 1}, {0.9, 0.1, 0.5, 0.3}, DType::F64)};
  const StageMask m = StageMask::ones(2, 2);
  const MaskedTopkResult r = masked_topk(h, m, 2);
  REQUIRE(r.queries.size() == 2);
  CHECK(r.queries[0].row == 0);
  CHECK(r.queries[0].col == 0);
  CHECK(r.queries[0].score == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(r.queries[1].row == 1);
  CHECK(r.queries[1].col == 0);
  CHECK(!r.capped);
  CHECK(!r.next_mask.at(0, 0));
  CHECK(r.next_mask.at(0, 1));
  CHECK(!r.next_mask.at(1, 0));
  CHECK(r.next_mask.at(1, 1));
}

TEST_CASE("an all-zero mask produces an empty capped selection") {
  const Heatmap h{Tensor::from_values({2, 2, 1}, {0.9, 0.1, 0.5, 0.3}, DType::F64)};
  StageMask m = StageMask::ones(2, 2);
  std::fill(m.bits.begin(), m.bits.end(), uint8_t{0});
  const MaskedTopkResult r = masked_topk(h, m, 2);
  CHECK(r.queries.empty());
  CHECK(r.capped);
  CHECK(r.next_mask.bits == m.bits);
}

TEST_CASE("one query per cell, best class wins") {
  // Cell (0,0) peaks on class 1, cell (0,1) on class 0.
  const Heatmap h{Tensor::from_values({1, 2, 2}, {0.4, 0.8, 0.7, 0.2}, DType::F64)};
  const MaskedTopkResult r = masked_topk(h, StageMask::ones(1, 2), 2);
  REQUIRE(r.queries.size() == 2);
  CHECK(r.queries[0].col == 0);
  CHECK(r.queries[0].class_id == 1);
  CHECK(r.queries[1].col == 1);
  CHECK(r.queries[1].class_id == 0);
}

TEST_CASE("query scores equal the heatmap entries they were selected from") {
  Rng rng(23);
  const Heatmap h = random_heatmap(8, 8, 3, rng);
  const MaskedTopkResult r = masked_topk(h, StageMask::ones(8, 8), 10);
  const std::vector<double> vals = h.scores.values();
  for (const Query& q : r.queries) {
    const double direct = vals[static_cast<size_t>((q.row * 8 + q.col) * 3 + q.class_id)];
    CHECK(q.score == direct);
  }
}

TEST_CASE("requesting more than the feasible cells caps the selection") {
  Rng rng(29);
  const Heatmap h = random_heatmap(4, 4, 2, rng);
  const MaskedTopkResult r = masked_topk(h, StageMask::ones(4, 4), 99);
  CHECK(r.capped);
  CHECK(r.queries.size() == 16);
  CHECK(r.next_mask.count_ones() == 0);
}

TEST_CASE("erosion spreads a single zero into a centered block") {
  StageMask m = StageMask::ones(5, 5);
  m.bits[2 * 5 + 2] = 0;
  const StageMask e = box_pool_mask(m, 3);
  for (int64_t r = 0; r < 5; ++r)
    for (int64_t c = 0; c < 5; ++c) {
      const bool in_block = r >= 1 && r <= 3 && c >= 1 && c <= 3;
      CHECK(e.at(r, c) == !in_block);
    }
}

TEST_CASE("erosion identity and edge cases") {
  StageMask m = StageMask::ones(4, 6);
  m.bits[5] = 0;
  const StageMask same = box_pool_mask(m, 1);
  CHECK(same.bits == m.bits);

  const StageMask all1 = box_pool_mask(StageMask::ones(4, 6), 3);
  CHECK(all1.count_ones() == 24);

  CHECK_THROWS_AS(box_pool_mask(m, 2), std::invalid_argument);
  CHECK_THROWS_AS(box_pool_mask(m, 0), std::invalid_argument);
}

TEST_CASE("suppressed cells contribute exactly zero supervision") {
  const Tensor gt =
      Tensor::from_values({2, 2, 2}, {1.0, 0.25, 0.5, 0.125, 0.75, 0.0625, 0.3, 0.2}, DType::F32);
  StageMask m = StageMask::ones(2, 2);

  const Tensor same = stage_targets(gt, m);
  CHECK(same.values() == gt.values());

  m.bits[0] = 0;
  m.bits[3] = 0;
  const Tensor masked = stage_targets(gt, m);
  const std::vector<double> v = masked.values();
  CHECK(v[0] == 0.0);
  CHECK(v[1] == 0.0);
  CHECK(v[6] == 0.0);
  CHECK(v[7] == 0.0);
  const std::vector<double> g = gt.values();
  for (size_t i = 0; i < v.size(); ++i) CHECK(v[i] <= g[i]);
  CHECK(v[2] == g[2]);
  CHECK(v[5] == g[5]);

  const Tensor wrong = Tensor::zeros({3, 2, 2}, DType::F32);
  CHECK_THROWS_AS(stage_targets(wrong, m), std::invalid_argument);
}

TEST_CASE("untrained decoder emits unit boxes centered on the query cell") {
  Rng rng(31);
  DecodeParams p = make_decode_params(8, 2, 2, rng, DType::F32);
  Tensor f = Tensor::randn({8, 8, 8}, rng, 1.0, DType::F32);
  GridSpec grid;
  grid.h = grid.w = 8;

  Query q;
  q.row = 5;
  q.col = 2;
  q.class_id = 1;
  q.score = 0.8;
  const Box3D b = decode_query(q, f, grid, p);
  CHECK(b.cx == doctest::Approx(grid.cell_center_x(2)).epsilon(1e-12));
  CHECK(b.cy == doctest::Approx(grid.cell_center_y(5)).epsilon(1e-12));
  CHECK(b.cz == 0.0);
  CHECK(b.l == 1.0);
  CHECK(b.w == 1.0);
  CHECK(b.h == 1.0);
  CHECK(b.yaw == 0.0);
  CHECK(b.class_id == 1);
  // Untrained classifier refines every score by sigmoid(0).
  CHECK(b.score == doctest::Approx(0.4).epsilon(1e-12));

  Query outside = q;
  outside.row = 9;
  CHECK_THROWS_AS(decode_query(outside, f, grid, p), std::invalid_argument);
}

TEST_CASE("decoded yaw lands in [-pi, pi) and box count matches query count") {
  Rng rng(37);
  DecodeParams p = make_decode_params(8, 2, 2, rng, DType::F32);
  p.reg_w = Tensor::randn({8, 8}, rng, 0.5, DType::F32, true);
  p.reg_b = Tensor::randn({1, 8}, rng, 0.5, DType::F32, true);
  Tensor f = Tensor::randn({8, 8, 8}, rng, 1.0, DType::F32);
  GridSpec grid;
  grid.h = grid.w = 8;

  std::vector<Query> qs;
  for (int i = 0; i < 6; ++i) {
    Query q;
    q.row = i;
    q.col = 7 - i;
    q.score = 0.5;
    qs.push_back(q);
  }
  const std::vector<Box3D> boxes = decode_queries(qs, f, grid, p);
  REQUIRE(boxes.size() == qs.size());
  for (const Box3D& b : boxes) {
    CHECK(b.yaw >= -3.14159265358979323846);
    CHECK(b.yaw < 3.14159265358979323846);
    CHECK(b.l > 0.0);
    CHECK(b.w > 0.0);
    CHECK(b.h > 0.0);
  }
}

TEST_CASE("shifting the grid origin shifts every decoded center by exactly that much") {
  Rng rng(41);
  DecodeParams p = make_decode_params(8, 2, 2, rng, DType::F32);
  p.reg_w = Tensor::randn({8, 8}, rng, 0.5, DType::F32, true);
  Tensor f = Tensor::randn({8, 8, 8}, rng, 1.0, DType::F32);
  GridSpec g1;
  g1.h = g1.w = 8;
  GridSpec g2 = g1;
  g2.origin_x += 3.7;
  g2.origin_y += -2.1;

  Query q;
  q.row = 3;
  q.col = 6;
  q.score = 0.9;
  const Box3D b1 = decode_query(q, f, g1, p);
  const Box3D b2 = decode_query(q, f, g2, p);
  CHECK(b2.cx - b1.cx == doctest::Approx(3.7).epsilon(1e-12));
  CHECK(b2.cy - b1.cy == doctest::Approx(-2.1).epsilon(1e-12));
  CHECK(b2.cz == b1.cz);
  CHECK(b2.yaw == b1.yaw);
  CHECK(b2.l == b1.l);
}

TEST_CASE("selection chain keeps cells disjoint and the mask monotone") {
  Rng rng(43);
  StageMask mask = StageMask::ones(12, 12);
  std::set<std::pair<int64_t, int64_t>> seen;
  for (int stage = 0; stage < 3; ++stage) {
    const Heatmap h = random_heatmap(12, 12, 2, rng);
    const SelectionStep step = advance_selection(h, mask, 8, 8, 3);
    REQUIRE(step.queries.size() == 8);
    for (const Query& q : step.queries) {
      CHECK(q.stage == stage);
      CHECK(mask.at(q.row, q.col));  // was selectable when picked
      CHECK(seen.emplace(q.row, q.col).second);
    }
    // Monotone: no bit returns to 1.
    for (size_t i = 0; i < mask.bits.size(); ++i)
      CHECK(step.next_mask.bits[i] <= mask.bits[i]);
    CHECK(step.next_mask.stage_index == stage + 1);
    mask = step.next_mask;
  }
}

TEST_CASE("cells suppressed for the next stage receive zero targets there") {
  Rng rng(47);
  const Heatmap h = random_heatmap(10, 10, 2, rng);
  const StageMask m0 = StageMask::ones(10, 10);
  const SelectionStep step = advance_selection(h, m0, 6, 6, 3);
  Tensor gt = sigmoid(Tensor::randn({10, 10, 2}, rng, 1.0, DType::F32));
  const Tensor next_targets = stage_targets(gt, step.next_mask);
  const std::vector<double> v = next_targets.values();
  for (int64_t cell = 0; cell < 100; ++cell)
    if (step.next_mask.bits[static_cast<size_t>(cell)] == 0) {
      CHECK(v[static_cast<size_t>(cell * 2)] == 0.0);
      CHECK(v[static_cast<size_t>(cell * 2 + 1)] == 0.0);
    }
}

TEST_CASE("three parallel stages cover distinct cells end to end") {
  Rng rng(53);
  Tensor f0 = Tensor::randn({12, 12, 8}, rng, 1.0, DType::F32);
  std::vector<StageParams> stages = {small_stage(1), small_stage(2), small_stage(3)};
  std::vector<LgeVariant> variants(3, LgeVariant::G);
  const MultistageResult r = run_multistage(f0, stages, variants, 10, StageMode::Parallel);
  REQUIRE(r.all_queries.size() == 30);
  std::set<std::pair<int64_t, int64_t>> cells;
  for (const Query& q : r.all_queries) CHECK(cells.emplace(q.row, q.col).second);
  CHECK(cells.size() == 30);
  REQUIRE(r.stages.size() == 3);
  for (const StageOutput& so : r.stages) CHECK(so.queries.size() == 10);
}

TEST_CASE("parallel stages are isolated from each other's parameters") {
  Rng rng(59);
  Tensor f0 = Tensor::randn({8, 8, 8}, rng, 1.0, DType::F32);
  std::vector<StageParams> stages = {small_stage(11), small_stage(12)};
  std::vector<LgeVariant> variants(2, LgeVariant::G);
  const MultistageResult before = run_multistage(f0, stages, variants, 4, StageMode::Parallel);

  // Replace every stage-1 weight; stage 0's outputs must not move a bit.
  // Heatmaps stay at 0.5 under zero-initialized score convs, so the enhanced
  // feature maps are the discriminating signal here.
  stages[1] = small_stage(99);
  const MultistageResult after = run_multistage(f0, stages, variants, 4, StageMode::Parallel);
  CHECK(before.stages[0].enhanced.values() == after.stages[0].enhanced.values());
  CHECK(before.stages[0].heatmap.scores.values() == after.stages[0].heatmap.scores.values());
  for (size_t i = 0; i < 4; ++i) {
    CHECK(before.stages[0].queries[i].row == after.stages[0].queries[i].row);
    CHECK(before.stages[0].queries[i].col == after.stages[0].queries[i].col);
    CHECK(before.stages[0].queries[i].score == after.stages[0].queries[i].score);
  }
  // The second stage did change behavior (different weights, same input).
  CHECK(before.stages[1].enhanced.values() != after.stages[1].enhanced.values());
}

TEST_CASE("a single stage behaves identically in both modes") {
  Rng rng(61);
  Tensor f0 = Tensor::randn({8, 8, 8}, rng, 1.0, DType::F32);
  std::vector<StageParams> stages = {small_stage(21)};
  std::vector<LgeVariant> variants = {LgeVariant::G};
  const MultistageResult par = run_multistage(f0, stages, variants, 5, StageMode::Parallel);
  const MultistageResult cas = run_multistage(f0, stages, variants, 5, StageMode::Cascaded);
  REQUIRE(par.all_queries.size() == cas.all_queries.size());
  for (size_t i = 0; i < par.all_queries.size(); ++i) {
    CHECK(par.all_queries[i].row == cas.all_queries[i].row);
    CHECK(par.all_queries[i].col == cas.all_queries[i].col);
    CHECK(par.all_queries[i].score == cas.all_queries[i].score);
  }
}

TEST_CASE("widening the selection budget at test time preserves each stage's prefix") {
  Rng rng(67);
  Tensor f0 = Tensor::randn({16, 16, 8}, rng, 1.0, DType::F32);
  std::vector<StageParams> stages = {small_stage(31), small_stage(32), small_stage(33)};
  std::vector<LgeVariant> variants(3, LgeVariant::G);

  const MultistageResult narrow_run =
      run_multistage(f0, stages, variants, 6, StageMode::Parallel, 3, -1);
  const MultistageResult wide_run =
      run_multistage(f0, stages, variants, 12, StageMode::Parallel, 3, 6);

  REQUIRE(narrow_run.stages.size() == wide_run.stages.size());
  for (size_t s = 0; s < narrow_run.stages.size(); ++s) {
    const auto& nq = narrow_run.stages[s].queries;
    const auto& wq = wide_run.stages[s].queries;
    REQUIRE(nq.size() == 6);
    REQUIRE(wq.size() == 12);
    for (size_t i = 0; i < nq.size(); ++i) {
      CHECK(nq[i].row == wq[i].row);
      CHECK(nq[i].col == wq[i].col);
      CHECK(nq[i].class_id == wq[i].class_id);
      CHECK(nq[i].score == wq[i].score);
    }
  }
}

TEST_CASE("query dump is one record per query with a header") {
  std::vector<Query> qs(2);
  qs[0].stage = 0;
  qs[0].row = 3;
  qs[0].col = 4;
  qs[0].class_id = 1;
  qs[0].score = 0.25;
  qs[1].stage = 1;
  qs[1].row = 5;
  qs[1].col = 6;
  qs[1].class_id = 0;
  qs[1].score = 0.75;
  CHECK(queries_to_csv(qs) == "stage,row,col,class,score\n0,3,4,1,0.25\n1,5,6,0,0.75\n");
}
