#pragma once

#include <string>
#include <vector>

#include "lgedet/eval.hpp"
#include "lgedet/train.hpp"

namespace lgedet {

struct AblateCellResult {
  TrainConfig cfg;
  EvalReport report;
  double wall_seconds = 0.0;
  bool ok = false;
  std::string status = "ok";  // or the failure reason
};

// Trains and evaluates every config; a failing cell records its error and the
// sweep continues. Evaluation reuses each cell's own N and mode.
std::vector<AblateCellResult> ablate(const std::vector<TrainConfig>& grid,
                                     const Dataset& train_data, const Dataset& eval_data);

// One row per cell:
// variant,iterations,stages,queries,mode,seed,recall_0.5,recall_1,recall_2,recall_4,map,wall_seconds,status
std::string ablate_csv(const std::vector<AblateCellResult>& cells);

}  // namespace lgedet
