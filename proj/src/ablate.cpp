#include "lgedet/ablate.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace lgedet {

namespace {

double micro_recall(const EvalReport& r, size_t threshold_idx) {
  if (r.total_gt == 0) return 0.0;
  double matched = 0.0;
  for (int c = 0; c < kNumClasses; ++c)
    matched += r.recall[static_cast<size_t>(c)][threshold_idx] *
               static_cast<double>(r.gt_count[static_cast<size_t>(c)]);
  return matched / static_cast<double>(r.total_gt);
}

std::string sanitize(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r') c = ';';
  return s;
}

}  // namespace

std::vector<AblateCellResult> ablate(const std::vector<TrainConfig>& grid,
                                     const Dataset& train_data, const Dataset& eval_data) {
  std::vector<AblateCellResult> out;
  out.reserve(grid.size());
  for (const TrainConfig& cfg : grid) {
    AblateCellResult cell;
    cell.cfg = cfg;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      Model model = make_model(cfg.model, cfg.seed);
      train(model, cfg, train_data);
      EvalConfig ec;
      ec.queries_per_stage = cfg.queries_per_stage;
      ec.mode = cfg.mode;
      ec.pool_kernel = cfg.pool_kernel;
      cell.report = evaluate(model, eval_data, ec);
      cell.ok = true;
    } catch (const std::exception& e) {
      cell.ok = false;
      cell.status = sanitize(e.what());
    }
    cell.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(cell));
  }
  return out;
}

std::string ablate_csv(const std::vector<AblateCellResult>& cells) {
  std::ostringstream os;
  os << "variant,iterations,stages,queries,mode,seed,recall_0.5,recall_1,recall_2,recall_4,"
        "map,wall_seconds,status\n";
  char buf[256];
  for (const AblateCellResult& c : cells) {
    os << lge_variant_name(c.cfg.model.variant) << "," << c.cfg.model.lge_iterations << ","
       << c.cfg.model.num_stages << "," << c.cfg.queries_per_stage << ","
       << stage_mode_name(c.cfg.mode) << "," << c.cfg.seed << ",";
    if (c.ok) {
      std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f,%.6f,%.6f,", micro_recall(c.report, 0),
                    micro_recall(c.report, 1), micro_recall(c.report, 2), micro_recall(c.report, 3),
                    c.report.map);
      os << buf;
    } else {
      os << "nan,nan,nan,nan,nan,";
    }
    std::snprintf(buf, sizeof(buf), "%.2f", c.wall_seconds);
    os << buf << "," << c.status << "\n";
  }
  return os.str();
}

}  // namespace lgedet
