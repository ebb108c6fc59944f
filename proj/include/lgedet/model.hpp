#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lgedet/head.hpp"
#include "lgedet/lge.hpp"
#include "lgedet/scene.hpp"
#include "lgedet/tensor.hpp"

namespace lgedet {

struct ModelConfig {
  int64_t channels = 32;
  int num_classes = kNumClasses;
  int num_stages = 3;              // K
  LgeVariant variant = LgeVariant::G;
  int lge_iterations = 1;          // enhancement repetitions per stage
  int num_heads = 2;               // attention heads in the global branch
  int decode_radius = 3;
  DType dtype = DType::F32;
};

// Full detector: a two-conv stem lifting voxel statistics to C channels,
// then one enhancement + heatmap + decoder parameter set per stage.
struct Model {
  ModelConfig config;
  Tensor stem1;  // [3,3,kVoxelChannels,C]
  Tensor stem2;  // [3,3,C,C]
  std::vector<StageParams> stages;

  std::vector<LgeVariant> variants() const {
    return std::vector<LgeVariant>(static_cast<size_t>(config.num_stages), config.variant);
  }
};

// Fully seeded initialization; identical (config, seed) gives identical weights.
Model make_model(const ModelConfig& cfg, uint64_t seed);

// [H,W,kVoxelChannels] statistics -> [H,W,C] base feature map.
Tensor forward_stem(const Model& m, const Tensor& voxels);

// Every trainable tensor with a stable dotted name, in a fixed order.
// The same model always enumerates the same names.
std::vector<std::pair<std::string, Tensor>> named_parameters(const Model& m);

// Binary checkpoint of all named parameters (float32 models only).
// Loading requires an identically configured model; names and shapes must match.
void save_checkpoint(const Model& m, const std::string& path);
void load_checkpoint(Model& m, const std::string& path);

}  // namespace lgedet
