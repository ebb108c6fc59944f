#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "lgedet/dataset.hpp"
#include "lgedet/model.hpp"

namespace lgedet {

struct TrainConfig {
  ModelConfig model;
  int64_t queries_per_stage = 200;  // N, per stage
  StageMode mode = StageMode::Parallel;
  double learning_rate = 1e-4;      // one-cycle peak
  int steps = 2000;
  int batch_size = 1;
  double box_loss_weight = 0.25;
  bool freeze_backbone_phase2 = false;  // freeze the voxel stem for the second half
  int pool_kernel = 3;
  uint64_t seed = 42;
  std::string divergence_dump_path = "diverged.json";
};

struct TrainLogEntry {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<double> loss_per_step;     // every step, in order
  std::vector<TrainLogEntry> log;        // every 10 steps (and the final step)
  double wall_seconds = 0.0;
};

// Raised when the loss turns non-finite; a diagnostic dump of the offending
// batch is written first.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& msg, std::string dump)
      : std::runtime_error(msg), dump_path(std::move(dump)) {}
  std::string dump_path;
};

// One-cycle schedule: linear ramp from peak/25 up to peak over the first 30%
// of steps, then linearly back down to peak/25.
double one_cycle_lr(int step, int total_steps, double peak);

// Mean of the trailing `window` entries ending at index `at` (inclusive).
double trailing_average(const std::vector<double>& values, int window, size_t at);

// Optimizes the summed per-stage score losses plus weighted box regression
// with RMSProp under the one-cycle schedule. Deterministic for a fixed
// (model, config, dataset). steps == 0 leaves the model untouched.
TrainResult train(Model& model, const TrainConfig& cfg, const Dataset& data);

}  // namespace lgedet
