#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lgedet/ablate.hpp"
#include "lgedet/eval.hpp"
#include "lgedet/train.hpp"

namespace lgedet {

// Everything the command-line harness needs, assembled from defaults, an
// optional JSON config file, and dotted --key=value overrides (deep-merged
// in that order).
struct HarnessConfig {
  GridSpec grid;
  SceneSpec scene;
  int train_scenes = 500;
  int eval_scenes = 100;
  std::string data_dir;          // when set, scenes are read from/written to disk
  std::string out_dir = ".";
  TrainConfig train;
  EvalConfig eval;
  // Ablation grid axes; the cross product defines the cells.
  std::vector<LgeVariant> ablate_variants = {LgeVariant::G};
  std::vector<int> ablate_iterations = {1};
  std::vector<int> ablate_stages = {3};
  std::vector<StageMode> ablate_modes = {StageMode::Parallel};
  std::vector<uint64_t> ablate_seeds = {42};
};

// The canonical JSON form (also the echo embedded in metrics files).
nlohmann::json harness_config_json(const HarnessConfig& c);
HarnessConfig harness_config_from_json(const nlohmann::json& j);

// overrides entries look like "train.steps=100" or "ablate.variants=[\"B\",\"G\"]";
// scalar values are parsed as JSON when possible and fall back to strings.
HarnessConfig load_harness_config(const std::string& config_path,
                                  const std::vector<std::string>& overrides);

std::vector<TrainConfig> build_ablation_grid(const HarnessConfig& c);

}  // namespace lgedet
