#include <cmath>
#include <vector>

#include "doctest.h"
#include "lgedet/lge.hpp"

using namespace lgedet;

namespace {

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

constexpr LgeVariant kAll[] = {LgeVariant::A, LgeVariant::B, LgeVariant::C, LgeVariant::D,
                               LgeVariant::E, LgeVariant::F, LgeVariant::G};

}  // namespace

TEST_CASE("wiring cardinalities per variant") {
  const VariantWiring g = build_variant(LgeVariant::G);
  CHECK(g.branches.size() == 2);
  CHECK(g.merge_count == 1);
  CHECK(!g.flagged_unstable);

  const VariantWiring a = build_variant(LgeVariant::A);
  CHECK(a.branches.size() == 1);
  CHECK(a.merge_count == 0);

  // D is a serial pipeline: global encode feeding local encode feeding decode.
  const VariantWiring d = build_variant(LgeVariant::D);
  CHECK(d.stage_count() == 3);
  CHECK(d.branches.size() == 1);
  CHECK(d.merge_count == 0);

  const VariantWiring e = build_variant(LgeVariant::E);
  CHECK(e.flagged_unstable);

  for (LgeVariant v : kAll) CHECK(build_variant(v).id == v);
}

TEST_CASE("variant names round-trip") {
  for (LgeVariant v : kAll) CHECK(lge_variant_from_string(lge_variant_name(v)) == v);
  CHECK_THROWS_AS(lge_variant_from_string("H"), std::invalid_argument);
  CHECK_THROWS_AS(lge_variant_from_string("AB"), std::invalid_argument);
}

TEST_CASE("every variant preserves shape") {
  Rng rng(101);
  Tensor x = Tensor::randn({8, 8, 16}, rng, 1.0, DType::F32);
  for (LgeVariant v : kAll) {
    CAPTURE(lge_variant_name(v));
    Rng prng(Rng::derive(7, static_cast<uint64_t>(v)));
    LgeParams p = make_lge_params(v, 16, 2, 1, prng, DType::F32);
    const Tensor y = lge_forward(x, p, v);
    REQUIRE(y.rank() == 3);
    CHECK(y.extent(0) == 8);
    CHECK(y.extent(1) == 8);
    CHECK(y.extent(2) == 16);
  }
}

TEST_CASE("iterated enhancement preserves shape and grows cost linearly") {
  Rng rng(103);
  Tensor x = Tensor::randn({8, 8, 16}, rng, 1.0, DType::F32);
  Rng prng(11);
  LgeParams p4 = make_lge_params(LgeVariant::G, 16, 2, 4, prng, DType::F32);
  const Tensor y = lge_forward(x, p4, LgeVariant::G);
  CHECK(y.extent(0) == 8);
  CHECK(y.extent(1) == 8);
  CHECK(y.extent(2) == 16);

  // Unshared per-iteration weights: the trainable tensor count is linear in
  // the iteration count for every variant.
  for (LgeVariant v : kAll) {
    CAPTURE(lge_variant_name(v));
    size_t counts[3];
    for (int it = 1; it <= 3; ++it) {
      Rng r(29);
      LgeParams p = make_lge_params(v, 16, 2, it, r, DType::F32);
      std::vector<Tensor> ts;
      collect_lge_tensors(p, ts);
      counts[it - 1] = ts.size();
    }
    CHECK(counts[1] == 2 * counts[0]);
    CHECK(counts[2] == 3 * counts[0]);
  }
}

TEST_CASE("zeroed global branch reduces the parallel wiring to the wavelet-only one") {
  // With the attention output projection and the feed-forward second matrix
  // zeroed, the global branch emits exact zeros, which is precisely what the
  // wavelet-only wiring feeds its decoder. Identical wavelet weights must then
  // give identical outputs.
  Rng xr(211);
  Tensor x = Tensor::randn({8, 8, 16}, xr, 1.0, DType::F64);

  Rng gr(212);
  LgeParams pg = make_lge_params(LgeVariant::G, 16, 2, 1, gr, DType::F64);
  pg.per_iteration[0].henc.wo = Tensor::zeros({16, 16}, DType::F64);
  pg.per_iteration[0].henc.ffn_w2 = Tensor::zeros({64, 16}, DType::F64);

  Rng ar(213);
  LgeParams pa = make_lge_params(LgeVariant::A, 16, 2, 1, ar, DType::F64);
  pa.per_iteration[0].wenc = pg.per_iteration[0].wenc;
  pa.per_iteration[0].wdec = pg.per_iteration[0].wdec;

  const Tensor yg = lge_forward(x, pg, LgeVariant::G);
  const Tensor ya = lge_forward(x, pa, LgeVariant::A);
  CHECK(max_abs_diff(yg.values(), ya.values()) == 0.0);
}

TEST_CASE("forward is deterministic") {
  Rng xr(311);
  Tensor x = Tensor::randn({8, 8, 16}, xr, 1.0, DType::F32);
  Rng pr(312);
  LgeParams p = make_lge_params(LgeVariant::G, 16, 2, 2, pr, DType::F32);
  const std::vector<double> a = lge_forward(x, p, LgeVariant::G).values();
  const std::vector<double> b = lge_forward(x, p, LgeVariant::G).values();
  CHECK(max_abs_diff(a, b) == 0.0);
}

TEST_CASE("invalid configurations are rejected") {
  Rng rng(401);
  CHECK_THROWS_AS(make_lge_params(LgeVariant::G, 16, 2, 0, rng, DType::F32),
                  std::invalid_argument);
  CHECK_THROWS_AS(make_lge_params(LgeVariant::G, 10, 2, 1, rng, DType::F32),
                  std::invalid_argument);

  Rng pr(402);
  LgeParams p = make_lge_params(LgeVariant::G, 16, 2, 1, pr, DType::F32);
  Tensor odd = Tensor::zeros({7, 8, 16}, DType::F32);
  CHECK_THROWS_AS(lge_forward(odd, p, LgeVariant::G), std::invalid_argument);

  // The deep serial wiring halves twice, so it additionally needs extents
  // divisible by 4.
  Rng er(403);
  LgeParams pe = make_lge_params(LgeVariant::E, 16, 2, 1, er, DType::F32);
  Tensor six = Tensor::zeros({6, 6, 16}, DType::F32);
  CHECK_THROWS_AS(lge_forward(six, pe, LgeVariant::E), std::invalid_argument);
  Tensor eight = Tensor::zeros({8, 8, 16}, DType::F32);
  CHECK(lge_forward(eight, pe, LgeVariant::E).extent(0) == 8);
}
