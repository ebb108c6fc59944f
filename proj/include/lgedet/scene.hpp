#pragma once

#include <array>
#include <string>

#include "lgedet/geometry.hpp"
#include "lgedet/tensor.hpp"

namespace lgedet {

inline constexpr int kNumClasses = 3;       // vehicle-like, pedestrian-like, barrier-like
inline constexpr int kVoxelChannels = 5;    // log1p(count), mean z, max z, mean intensity, occupancy

// Controls for the synthetic scene generator. Point counts are deterministic
// functions of geometry (no Poisson draws) so scenes are bit-reproducible.
struct SceneSpec {
  int num_objects = 8;
  std::array<double, kNumClasses> class_mix = {0.5, 0.3, 0.2};  // relative weights
  double weak_fraction = 0.4;       // chance an object is a weak (sparse) target
  double easy_density = 60.0;       // surface points per m^2 before range decay
  double weak_density = 6.0;
  double density_range_scale = 10.0;  // decay = 1 / (1 + (range/scale)^2)
  int clutter_points = 400;
  uint64_t seed = 42;  // base seed; per-scene streams derive from it
};

struct Scene {
  PointCloud cloud;
  std::vector<Box3D> boxes;
  GridSpec grid;
  uint64_t seed = 0;
};

// Deterministic in (spec, grid, seed): same arguments, bit-identical output.
// Objects are placed without BEV overlap inside the grid (bounded retries,
// error on exhaustion); each contributes surface-sampled points whose count
// decays with range and is >= 1; clutter points are uniform ground litter.
Scene generate_scene(const SceneSpec& spec, const GridSpec& grid, uint64_t seed);

struct VoxelizeCounts {
  int64_t in_cells = 0;
  int64_t dropped = 0;
};

// Per-cell statistics over the cloud: log(1+count), mean z, max z, mean
// intensity, occupancy. Empty cells are all-zero. Out-of-range points are
// dropped and counted. Pure function; the learned stem lives in the model.
Tensor voxelize_bev(const PointCloud& pc, const GridSpec& grid, VoxelizeCounts* counts = nullptr);

// Per box, splats exp(-d^2 / (2 sigma^2)) around the center cell into the
// class channel, sigma = max(1, min(l,w) / (3 cell_size)) in cells, d in cell
// units; overlapping boxes combine by elementwise max; the center cell is
// exactly 1.
Tensor gaussian_heatmap_targets(const std::vector<Box3D>& boxes, const GridSpec& grid,
                                int num_classes);

// Scene files: fixed little-endian binary layout (header with grid, seed and
// counts, then float32 point quadruples, then box records).
void save_scene(const std::string& path, const Scene& scene);
Scene load_scene(const std::string& path);

}  // namespace lgedet
