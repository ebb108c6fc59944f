#include "lgedet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace lgedet {

namespace {

double bev_distance(const Box3D& a, const Box3D& b) {
  return std::hypot(a.cx - b.cx, a.cy - b.cy);
}

// Global deterministic ranking: score descending, then stable identity keys.
bool rank_before(const Prediction& a, const Prediction& b) {
  if (a.box.score != b.box.score) return a.box.score > b.box.score;
  if (a.scene != b.scene) return a.scene < b.scene;
  if (a.stage != b.stage) return a.stage < b.stage;
  if (a.row != b.row) return a.row < b.row;
  return a.col < b.col;
}

}  // namespace

EvalReport score_predictions(std::vector<Prediction> preds,
                             const std::vector<std::vector<Box3D>>& gt_per_scene, int num_stages,
                             std::vector<Prediction>* predictions_out) {
  EvalReport report;
  report.stage_hit_rate.assign(static_cast<size_t>(num_stages), 0.0);
  for (const auto& gts : gt_per_scene) {
    report.total_gt += static_cast<int64_t>(gts.size());
    for (const Box3D& b : gts) ++report.gt_count[static_cast<size_t>(b.class_id)];
  }
  report.total_predictions = static_cast<int64_t>(preds.size());
  std::stable_sort(preds.begin(), preds.end(), rank_before);

  constexpr size_t kTwoMeterIdx = 2;
  double map_sum = 0.0;
  int map_terms = 0;
  int64_t matched_at_2m = 0;
  std::vector<int64_t> stage_hits(static_cast<size_t>(num_stages), 0);

  for (int cls = 0; cls < kNumClasses; ++cls) {
    std::vector<size_t> order;
    for (size_t i = 0; i < preds.size(); ++i)
      if (preds[i].box.class_id == cls) order.push_back(i);
    const int64_t n_gt = report.gt_count[static_cast<size_t>(cls)];

    for (size_t ti = 0; ti < kMatchThresholds.size(); ++ti) {
      const double thr = kMatchThresholds[ti];
      std::vector<std::vector<bool>> taken(gt_per_scene.size());
      for (size_t si = 0; si < gt_per_scene.size(); ++si)
        taken[si].assign(gt_per_scene[si].size(), false);

      int64_t tp = 0;
      double precision_sum = 0.0;
      for (size_t rank = 0; rank < order.size(); ++rank) {
        const Prediction& p = preds[order[rank]];
        const auto& gts = gt_per_scene[static_cast<size_t>(p.scene)];
        // Strict d < threshold; equal distances resolve to the lowest index.
        int64_t best = -1;
        double best_d = thr;
        for (size_t gi = 0; gi < gts.size(); ++gi) {
          if (gts[gi].class_id != cls || taken[static_cast<size_t>(p.scene)][gi]) continue;
          const double d = bev_distance(p.box, gts[gi]);
          if (d < best_d) {
            best = static_cast<int64_t>(gi);
            best_d = d;
          }
        }
        if (best >= 0) {
          taken[static_cast<size_t>(p.scene)][static_cast<size_t>(best)] = true;
          ++tp;
          precision_sum += static_cast<double>(tp) / static_cast<double>(rank + 1);
          if (ti == kTwoMeterIdx) {
            ++matched_at_2m;
            ++stage_hits[static_cast<size_t>(p.stage)];
          }
        }
      }
      if (n_gt > 0) {
        report.recall[static_cast<size_t>(cls)][ti] =
            static_cast<double>(tp) / static_cast<double>(n_gt);
        report.ap[static_cast<size_t>(cls)][ti] = precision_sum / static_cast<double>(n_gt);
        map_sum += report.ap[static_cast<size_t>(cls)][ti];
        ++map_terms;
      }
    }
  }

  report.map = map_terms > 0 ? map_sum / static_cast<double>(map_terms) : 0.0;
  report.recall_at_2m = report.total_gt > 0
                            ? static_cast<double>(matched_at_2m) /
                                  static_cast<double>(report.total_gt)
                            : 0.0;
  for (size_t s = 0; s < stage_hits.size(); ++s)
    report.stage_hit_rate[s] = report.total_gt > 0
                                   ? static_cast<double>(stage_hits[s]) /
                                         static_cast<double>(report.total_gt)
                                   : 0.0;
  if (predictions_out) *predictions_out = std::move(preds);
  return report;
}

EvalReport evaluate(const Model& model, const Dataset& data, const EvalConfig& cfg,
                    std::vector<Prediction>* predictions_out) {
  std::vector<Prediction> preds;
  std::vector<std::vector<Box3D>> gt_per_scene;
  gt_per_scene.reserve(data.scenes.size());
  for (size_t si = 0; si < data.scenes.size(); ++si) {
    const PreparedScene& scene = data.scenes[si];
    const Tensor f0 = forward_stem(model, scene.voxels);
    const MultistageResult ms =
        run_multistage(f0, model.stages, model.variants(), cfg.queries_per_stage, cfg.mode,
                       cfg.pool_kernel, cfg.mask_queries_per_stage);
    for (size_t s = 0; s < ms.stages.size(); ++s) {
      const StageOutput& so = ms.stages[s];
      for (const Query& q : so.queries) {
        Prediction p;
        p.scene = static_cast<int64_t>(si);
        p.stage = static_cast<int>(s);
        p.row = q.row;
        p.col = q.col;
        p.box = decode_query(q, so.enhanced, data.grid, model.stages[s].decode);
        preds.push_back(std::move(p));
      }
    }
    gt_per_scene.push_back(scene.boxes);
  }
  return score_predictions(std::move(preds), gt_per_scene, model.config.num_stages,
                           predictions_out);
}

nlohmann::json eval_report_json(const EvalReport& r) {
  nlohmann::json per_class = nlohmann::json::array();
  for (int c = 0; c < kNumClasses; ++c)
    per_class.push_back({{"class", c},
                         {"gt", r.gt_count[static_cast<size_t>(c)]},
                         {"recall", r.recall[static_cast<size_t>(c)]},
                         {"ap", r.ap[static_cast<size_t>(c)]}});
  return nlohmann::json{{"thresholds", kMatchThresholds},
                        {"per_class", per_class},
                        {"map", r.map},
                        {"recall_at_2m", r.recall_at_2m},
                        {"stage_hit_rate", r.stage_hit_rate},
                        {"total_gt", r.total_gt},
                        {"total_predictions", r.total_predictions}};
}

std::string predictions_to_csv(const std::vector<Prediction>& preds) {
  std::ostringstream os;
  os << "scene,stage,row,col,class,score,cx,cy,cz,l,w,h,yaw\n";
  char buf[256];
  for (const Prediction& p : preds) {
    std::snprintf(buf, sizeof(buf), "%lld,%d,%lld,%lld,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                  static_cast<long long>(p.scene), p.stage, static_cast<long long>(p.row),
                  static_cast<long long>(p.col), p.box.class_id, p.box.score, p.box.cx, p.box.cy,
                  p.box.cz, p.box.l, p.box.w, p.box.h, p.box.yaw);
    os << buf;
  }
  return os.str();
}

}  // namespace lgedet
