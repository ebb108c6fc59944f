#pragma once

#include <string>
#include <vector>

#include "lgedet/scene.hpp"
#include "lgedet/tensor.hpp"

namespace lgedet {

// One scene reduced to what training and evaluation consume: constant input
// statistics, the dense score target, and the ground-truth boxes.
struct PreparedScene {
  Tensor voxels;      // [H,W,kVoxelChannels] float32, no gradients
  Tensor heatmap_gt;  // [H,W,kNumClasses] float32, centers exactly 1
  std::vector<Box3D> boxes;
};

struct Dataset {
  GridSpec grid;
  std::vector<PreparedScene> scenes;
};

// Scene i of a batch uses the derived stream (base_seed, start_index + i), so
// disjoint index ranges over the same base seed give disjoint scene pools.
std::vector<Scene> make_scenes(const SceneSpec& spec, const GridSpec& grid, int count,
                               uint64_t base_seed, int64_t start_index = 0);

PreparedScene prepare_scene(const Scene& scene);
Dataset prepare_dataset(const std::vector<Scene>& scenes, const GridSpec& grid);

// Writes scene_<index>.bin files plus a manifest.json describing grid, spec,
// and file list. The directory must already exist.
void write_dataset(const std::string& dir, const SceneSpec& spec, const GridSpec& grid, int count,
                   uint64_t base_seed, int64_t start_index = 0);

// Reads every scene listed by the manifest.
std::vector<Scene> read_dataset(const std::string& dir, GridSpec* grid_out = nullptr);

}  // namespace lgedet
