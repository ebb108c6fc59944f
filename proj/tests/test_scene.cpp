#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "lgedet/scene.hpp"

using namespace lgedet;

namespace {

bool same_points(const PointCloud& a, const PointCloud& b) {
  if (a.points.size() != b.points.size()) return false;
  for (size_t i = 0; i < a.points.size(); ++i) {
    const auto& p = a.points[i];
    const auto& q = b.points[i];
    if (p.x != q.x || p.y != q.y || p.z != q.z || p.intensity != q.intensity) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("scene generation is bit-reproducible") {
  SceneSpec spec;
  GridSpec grid;
  const Scene a = generate_scene(spec, grid, 7);
  const Scene b = generate_scene(spec, grid, 7);
  CHECK(same_points(a.cloud, b.cloud));
  REQUIRE(a.boxes.size() == b.boxes.size());
  for (size_t i = 0; i < a.boxes.size(); ++i) {
    CHECK(a.boxes[i].cx == b.boxes[i].cx);
    CHECK(a.boxes[i].yaw == b.boxes[i].yaw);
    CHECK(a.boxes[i].class_id == b.boxes[i].class_id);
  }
  const Scene c = generate_scene(spec, grid, 8);
  CHECK(!same_points(a.cloud, c.cloud));
}

TEST_CASE("zero objects leaves only clutter") {
  SceneSpec spec;
  spec.num_objects = 0;
  GridSpec grid;
  const Scene s = generate_scene(spec, grid, 3);
  CHECK(s.boxes.empty());
  CHECK(s.cloud.points.size() == static_cast<size_t>(spec.clutter_points));
}

TEST_CASE("generated scenes respect their declared envelope") {
  SceneSpec spec;
  GridSpec grid;
  const Scene s = generate_scene(spec, grid, 11);
  REQUIRE(s.boxes.size() == static_cast<size_t>(spec.num_objects));
  for (const Box3D& b : s.boxes) {
    CHECK(b.l > 0.0);
    CHECK(b.w > 0.0);
    CHECK(b.h > 0.0);
    CHECK(b.yaw >= -3.14159265358979323846);
    CHECK(b.yaw < 3.14159265358979323846);
    CHECK(grid.contains(grid.row_of(b.cy), grid.col_of(b.cx)));
  }
  for (const auto& p : s.cloud.points) {
    CHECK(std::isfinite(p.x));
    CHECK(std::isfinite(p.y));
    CHECK(std::isfinite(p.z));
    CHECK(p.intensity >= 0.0f);
    CHECK(p.intensity <= 1.0f);
  }
}

TEST_CASE("weak targets carry strictly fewer points than easy ones") {
  // Toggling only the difficulty flag consumes the same random draws, so both
  // scenes place the identical box; the point budgets must then differ.
  GridSpec grid;
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    SceneSpec weak_spec;
    weak_spec.num_objects = 1;
    weak_spec.weak_fraction = 1.0;
    SceneSpec easy_spec = weak_spec;
    easy_spec.weak_fraction = 0.0;

    const Scene ws = generate_scene(weak_spec, grid, seed);
    const Scene es = generate_scene(easy_spec, grid, seed);
    REQUIRE(ws.boxes.size() == 1);
    REQUIRE(es.boxes.size() == 1);
    CHECK(ws.boxes[0].cx == es.boxes[0].cx);
    CHECK(ws.boxes[0].cy == es.boxes[0].cy);

    const int64_t weak_points =
        static_cast<int64_t>(ws.cloud.points.size()) - weak_spec.clutter_points;
    const int64_t easy_points =
        static_cast<int64_t>(es.cloud.points.size()) - easy_spec.clutter_points;
    CHECK(weak_points >= 1);
    CHECK(weak_points < easy_points);

    // Point budget law: surface area times difficulty density times range
    // decay, floored at one point.
    const Box3D& b = ws.boxes[0];
    const double area = 2.0 * b.h * (b.l + b.w) + b.l * b.w;
    const double srange = std::hypot(b.cx, b.cy) / weak_spec.density_range_scale;
    const double decay = 1.0 / (1.0 + srange * srange);
    CHECK(weak_points ==
          std::max<int64_t>(1, std::llround(weak_spec.weak_density * area * decay)));
    CHECK(easy_points ==
          std::max<int64_t>(1, std::llround(easy_spec.easy_density * area * decay)));
  }
}

TEST_CASE("a vanishing density still yields at least one point per object") {
  SceneSpec spec;
  spec.num_objects = 1;
  spec.weak_fraction = 1.0;
  spec.weak_density = 1e-6;
  spec.clutter_points = 0;
  GridSpec grid;
  const Scene s = generate_scene(spec, grid, 5);
  CHECK(s.cloud.points.size() == 1);
}

TEST_CASE("voxelization conserves every input point") {
  SceneSpec spec;
  GridSpec grid;
  for (uint64_t seed : {1u, 2u, 3u}) {
    Scene s = generate_scene(spec, grid, seed);
    // Force a few guaranteed drops.
    s.cloud.points.push_back({1000.0f, 0.0f, 0.0f, 0.5f});
    s.cloud.points.push_back({0.0f, 0.0f, 99.0f, 0.5f});
    VoxelizeCounts counts;
    voxelize_bev(s.cloud, grid, &counts);
    CHECK(counts.dropped >= 2);
    CHECK(counts.in_cells + counts.dropped == static_cast<int64_t>(s.cloud.points.size()));
  }
}

TEST_CASE("per-cell statistics match direct computation") {
  GridSpec grid;
  PointCloud pc;
  // Two points in the cell centered at the grid origin.
  pc.points.push_back({static_cast<float>(grid.origin_x), static_cast<float>(grid.origin_y),
                       1.0f, 0.2f});
  pc.points.push_back({static_cast<float>(grid.origin_x), static_cast<float>(grid.origin_y),
                       3.0f, 0.4f});
  VoxelizeCounts counts;
  const Tensor v = voxelize_bev(pc, grid, &counts);
  REQUIRE(v.extent(0) == grid.h);
  REQUIRE(v.extent(1) == grid.w);
  REQUIRE(v.extent(2) == kVoxelChannels);
  CHECK(counts.in_cells == 2);
  CHECK(counts.dropped == 0);
  CHECK(v.value_at(0) == doctest::Approx(std::log1p(2.0)).epsilon(1e-6));
  CHECK(v.value_at(1) == doctest::Approx(2.0).epsilon(1e-6));   // mean z
  CHECK(v.value_at(2) == doctest::Approx(3.0).epsilon(1e-6));   // max z
  CHECK(v.value_at(3) == doctest::Approx(0.3).epsilon(1e-6));   // mean intensity
  CHECK(v.value_at(4) == 1.0);                                  // occupancy

  // Everything outside cell (0,0) stays zero.
  const std::vector<double> vals = v.values();
  double off_cell = 0.0;
  for (size_t i = kVoxelChannels; i < vals.size(); ++i) off_cell += std::abs(vals[i]);
  CHECK(off_cell == 0.0);

  const Tensor empty = voxelize_bev(PointCloud{}, grid);
  for (double x : empty.values()) CHECK(x == 0.0);
}

TEST_CASE("gaussian targets peak at exactly one per isolated box") {
  SceneSpec spec;
  GridSpec grid;
  const Scene s = generate_scene(spec, grid, 13);
  const Tensor t = gaussian_heatmap_targets(s.boxes, grid, kNumClasses);
  int64_t ones = 0;
  for (double v : t.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    if (v == 1.0) ++ones;
  }
  CHECK(ones == static_cast<int64_t>(s.boxes.size()));
}

TEST_CASE("gaussian splat takes its closed-form neighbor value") {
  GridSpec grid;
  Box3D b;
  b.cx = grid.cell_center_x(10);
  b.cy = grid.cell_center_y(12);
  b.l = 0.6;  // sigma clamps to 1 cell
  b.w = 0.6;
  b.class_id = 1;
  const Tensor t = gaussian_heatmap_targets({b}, grid, kNumClasses);
  auto at = [&](int64_t r, int64_t c, int cls) {
    return t.value_at((r * grid.w + c) * kNumClasses + cls);
  };
  CHECK(at(12, 10, 1) == 1.0);
  CHECK(at(12, 11, 1) == doctest::Approx(std::exp(-0.5)).epsilon(1e-6));
  CHECK(at(13, 10, 1) == doctest::Approx(std::exp(-0.5)).epsilon(1e-6));
  CHECK(at(13, 11, 1) == doctest::Approx(std::exp(-1.0)).epsilon(1e-6));
  CHECK(at(12, 10, 0) == 0.0);
  CHECK(at(12, 10, 2) == 0.0);
}

TEST_CASE("overlapping same-class splats combine by max and stay bounded") {
  GridSpec grid;
  Box3D a;
  a.cx = grid.cell_center_x(20);
  a.cy = grid.cell_center_y(20);
  a.l = a.w = 0.6;
  Box3D b = a;
  b.cx = grid.cell_center_x(21);
  const Tensor t = gaussian_heatmap_targets({a, b}, grid, kNumClasses);
  auto at = [&](int64_t r, int64_t c) { return t.value_at((r * grid.w + c) * kNumClasses); };
  CHECK(at(20, 20) == 1.0);
  CHECK(at(20, 21) == 1.0);
  for (double v : t.values()) CHECK(v <= 1.0);

  Box3D outside = a;
  outside.cx = grid.max_x() + 50.0;
  CHECK_THROWS_AS(gaussian_heatmap_targets({outside}, grid, kNumClasses),
                  std::invalid_argument);
}

TEST_CASE("doubling the cell size halves each center index within one cell") {
  SceneSpec spec;
  GridSpec grid;
  GridSpec coarse = grid;
  coarse.cell_size = 2.0 * grid.cell_size;
  const Scene s = generate_scene(spec, grid, 17);
  for (const Box3D& b : s.boxes) {
    const int64_t col = grid.col_of(b.cx), col2 = coarse.col_of(b.cx);
    const int64_t row = grid.row_of(b.cy), row2 = coarse.row_of(b.cy);
    CHECK(std::abs(2 * col2 - col) <= 1);
    CHECK(std::abs(2 * row2 - row) <= 1);
  }
}

TEST_CASE("scene files round-trip") {
  SceneSpec spec;
  spec.num_objects = 4;
  GridSpec grid;
  const Scene s = generate_scene(spec, grid, 19);
  const std::string path = "scene_roundtrip.bin";
  save_scene(path, s);
  const Scene r = load_scene(path);
  CHECK(r.seed == s.seed);
  CHECK(r.grid.origin_x == s.grid.origin_x);
  CHECK(r.grid.cell_size == s.grid.cell_size);
  CHECK(r.grid.h == s.grid.h);
  CHECK(same_points(r.cloud, s.cloud));
  REQUIRE(r.boxes.size() == s.boxes.size());
  for (size_t i = 0; i < s.boxes.size(); ++i) {
    // Box fields are stored at single precision.
    CHECK(r.boxes[i].cx == static_cast<double>(static_cast<float>(s.boxes[i].cx)));
    CHECK(r.boxes[i].yaw == static_cast<double>(static_cast<float>(s.boxes[i].yaw)));
    CHECK(r.boxes[i].class_id == s.boxes[i].class_id);
  }
  std::remove(path.c_str());

  const std::string bad = "scene_badmagic.bin";
  {
    std::ofstream os(bad, std::ios::binary);
    os << "NOPE this is not a scene";
  }
  CHECK_THROWS_AS(load_scene(bad), std::runtime_error);
  std::remove(bad.c_str());
}

TEST_CASE("degenerate specs are rejected") {
  GridSpec grid;
  SceneSpec spec;
  spec.num_objects = -1;
  CHECK_THROWS_AS(generate_scene(spec, grid, 1), std::invalid_argument);
  SceneSpec zero_mix;
  zero_mix.class_mix = {0.0, 0.0, 0.0};
  CHECK_THROWS_AS(generate_scene(zero_mix, grid, 1), std::invalid_argument);
  GridSpec bad = grid;
  bad.cell_size = 0.0;
  CHECK_THROWS_AS(generate_scene(SceneSpec{}, bad, 1), std::invalid_argument);
  CHECK_THROWS_AS(voxelize_bev(PointCloud{}, bad), std::invalid_argument);
}
