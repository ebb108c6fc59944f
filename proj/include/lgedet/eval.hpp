#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lgedet/dataset.hpp"
#include "lgedet/model.hpp"
#include "lgedet/train.hpp"

namespace lgedet {

inline constexpr std::array<double, 4> kMatchThresholds = {0.5, 1.0, 2.0, 4.0};

struct EvalConfig {
  int64_t queries_per_stage = 200;       // N at test time
  int64_t mask_queries_per_stage = -1;   // mask-update cap; -1 means all N
  StageMode mode = StageMode::Parallel;
  int pool_kernel = 3;
};

struct Prediction {
  int64_t scene = 0;
  int stage = 0;
  int64_t row = 0, col = 0;
  Box3D box;
};

struct EvalReport {
  // Indexed [class][threshold]; classes absent from the ground truth carry
  // zeros and are excluded from the mAP mean.
  std::array<std::array<double, 4>, kNumClasses> recall{};
  std::array<std::array<double, 4>, kNumClasses> ap{};
  std::array<int64_t, kNumClasses> gt_count{};
  double map = 0.0;
  double recall_at_2m = 0.0;             // micro recall over all classes at 2 m
  std::vector<double> stage_hit_rate;    // matched-GT share per stage at 2 m
  int64_t total_gt = 0;
  int64_t total_predictions = 0;
};

// Scores an arbitrary prediction set against per-scene ground truth: greedy
// score-descending one-to-one center-distance matching, strict d < threshold,
// nearest unmatched ground truth first (ties to the lowest index). AP
// integrates precision at every true-positive rank over the pooled
// score-ordered list; classes with no ground truth are excluded from mAP.
EvalReport score_predictions(std::vector<Prediction> preds,
                             const std::vector<std::vector<Box3D>>& gt_per_scene, int num_stages,
                             std::vector<Prediction>* predictions_out = nullptr);

// Runs the detector over every scene and scores the decoded queries via
// score_predictions.
EvalReport evaluate(const Model& model, const Dataset& data, const EvalConfig& cfg,
                    std::vector<Prediction>* predictions_out = nullptr);

nlohmann::json eval_report_json(const EvalReport& r);

// "scene,stage,row,col,class,score,cx,cy,cz,l,w,h,yaw" records.
std::string predictions_to_csv(const std::vector<Prediction>& preds);

}  // namespace lgedet
