#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lgedet/ablate.hpp"
#include "lgedet/config.hpp"
#include "lgedet/dataset.hpp"
#include "lgedet/eval.hpp"
#include "lgedet/gradsuite.hpp"
#include "lgedet/model.hpp"
#include "lgedet/train.hpp"

namespace fs = std::filesystem;
using namespace lgedet;

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  if (!os.good()) throw std::runtime_error("cannot write " + path);
  os << text;
}

// Train and eval splits draw disjoint index ranges from the same scene pool.
Dataset build_split(const HarnessConfig& cfg, bool eval_split) {
  const int count = eval_split ? cfg.eval_scenes : cfg.train_scenes;
  const int64_t start = eval_split ? cfg.train_scenes : 0;
  const std::string sub = eval_split ? "eval" : "train";
  if (!cfg.data_dir.empty() && fs::exists(cfg.data_dir + "/" + sub + "/manifest.json")) {
    GridSpec grid;
    const std::vector<Scene> scenes = read_dataset(cfg.data_dir + "/" + sub, &grid);
    std::printf("loaded %zu %s scenes from %s\n", scenes.size(), sub.c_str(), cfg.data_dir.c_str());
    return prepare_dataset(scenes, grid);
  }
  return prepare_dataset(make_scenes(cfg.scene, cfg.grid, count, cfg.scene.seed, start), cfg.grid);
}

int cmd_gen_data(const HarnessConfig& cfg) {
  if (cfg.data_dir.empty()) {
    std::fprintf(stderr, "gen-data: set data.dir (e.g. --data.dir=data)\n");
    return 1;
  }
  fs::create_directories(cfg.data_dir + "/train");
  fs::create_directories(cfg.data_dir + "/eval");
  write_dataset(cfg.data_dir + "/train", cfg.scene, cfg.grid, cfg.train_scenes, cfg.scene.seed, 0);
  write_dataset(cfg.data_dir + "/eval", cfg.scene, cfg.grid, cfg.eval_scenes, cfg.scene.seed,
                cfg.train_scenes);
  std::printf("wrote %d train + %d eval scenes under %s\n", cfg.train_scenes, cfg.eval_scenes,
              cfg.data_dir.c_str());
  return 0;
}

int cmd_train(const HarnessConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  const Dataset train_data = build_split(cfg, false);
  Model model = make_model(cfg.train.model, cfg.train.seed);
  std::printf("training variant %s, %d stage(s), %d step(s)\n",
              lge_variant_name(cfg.train.model.variant), cfg.train.model.num_stages,
              cfg.train.steps);
  const TrainResult result = train(model, cfg.train, train_data);
  for (const TrainLogEntry& e : result.log)
    std::printf("step %5d  loss %.6f  lr %.3g\n", e.step, e.loss, e.lr);

  const std::string ckpt = cfg.out_dir + "/checkpoint.bin";
  save_checkpoint(model, ckpt);

  nlohmann::json metrics;
  metrics["config"] = harness_config_json(cfg);
  nlohmann::json log = nlohmann::json::array();
  for (const TrainLogEntry& e : result.log)
    log.push_back({{"step", e.step}, {"loss", e.loss}, {"lr", e.lr}});
  metrics["loss_log"] = log;
  if (!result.loss_per_step.empty()) {
    metrics["final_loss"] = result.loss_per_step.back();
    metrics["trailing50_at_step50"] = trailing_average(result.loss_per_step, 50, 49);
    metrics["trailing50_at_end"] =
        trailing_average(result.loss_per_step, 50, result.loss_per_step.size() - 1);
  }
  write_text(cfg.out_dir + "/train_metrics.json", metrics.dump(2) + "\n");
  std::printf("checkpoint: %s  (wall %.1f s)\n", ckpt.c_str(), result.wall_seconds);
  return 0;
}

int cmd_eval(const HarnessConfig& cfg, const std::string& checkpoint) {
  fs::create_directories(cfg.out_dir);
  const Dataset eval_data = build_split(cfg, true);
  Model model = make_model(cfg.train.model, cfg.train.seed);
  if (!checkpoint.empty())
    load_checkpoint(model, checkpoint);
  else
    std::printf("no checkpoint given; evaluating the random initialization\n");

  std::vector<Prediction> preds;
  const EvalReport report = evaluate(model, eval_data, cfg.eval, &preds);
  nlohmann::json metrics;
  metrics["config"] = harness_config_json(cfg);
  metrics["eval"] = eval_report_json(report);
  write_text(cfg.out_dir + "/metrics.json", metrics.dump(2) + "\n");
  write_text(cfg.out_dir + "/detections.csv", predictions_to_csv(preds));
  std::printf("mAP %.4f  recall@2m %.4f  (%lld predictions, %lld gt)\n", report.map,
              report.recall_at_2m, static_cast<long long>(report.total_predictions),
              static_cast<long long>(report.total_gt));
  std::printf("wrote %s/metrics.json and detections.csv\n", cfg.out_dir.c_str());
  return 0;
}

int cmd_ablate(const HarnessConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  const Dataset train_data = build_split(cfg, false);
  const Dataset eval_data = build_split(cfg, true);
  const std::vector<TrainConfig> grid = build_ablation_grid(cfg);
  std::printf("sweeping %zu cell(s)\n", grid.size());
  const std::vector<AblateCellResult> cells = ablate(grid, train_data, eval_data);
  const std::string csv = ablate_csv(cells);
  write_text(cfg.out_dir + "/ablate.csv", csv);
  std::fputs(csv.c_str(), stdout);
  return 0;
}

int cmd_grad_check() {
  int failures = 0;
  for (const GradCheckCase& c : run_gradient_suite()) {
    std::printf("%-18s max rel error %.3e  (tolerance %.0e)  %s\n", c.name.c_str(),
                c.max_rel_error, c.tolerance, c.pass() ? "ok" : "FAIL");
    if (!c.pass()) ++failures;
  }
  return failures == 0 ? 0 : 1;
}

std::vector<std::string> collect_overrides(CLI::App& app, CLI::App* sub,
                                           const std::vector<std::string>& sets) {
  std::vector<std::string> overrides = sets;
  auto absorb = [&overrides](const std::vector<std::string>& extras) {
    for (std::string e : extras) {
      if (e.rfind("--", 0) == 0) e = e.substr(2);
      if (!e.empty()) overrides.push_back(e);
    }
  };
  absorb(app.remaining());
  if (sub) absorb(sub->remaining());
  return overrides;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BEV detector workbench: synthetic scenes, enhancement variants, staged queries"};
  app.require_subcommand(1);
  app.allow_extras();

  std::string config_path;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--set", sets, "override, key.path=value (repeatable)");

  auto shared_flags = [&](CLI::App* s) {
    s->add_option("--config", config_path, "JSON config file");
    s->add_option("--set", sets, "override, key.path=value (repeatable)");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "write scene datasets to data.dir");
  CLI::App* tr = app.add_subcommand("train", "train a detector, write checkpoint and metrics");
  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on the eval split");
  CLI::App* ab = app.add_subcommand("ablate", "train+eval a config grid, write CSV");
  CLI::App* gc = app.add_subcommand("grad-check", "run the 64-bit gradient suite");
  for (CLI::App* s : {gen, tr, ev, ab, gc}) {
    s->allow_extras();
    shared_flags(s);
  }

  std::string checkpoint;
  ev->add_option("--checkpoint", checkpoint, "checkpoint file (defaults to random init)");

  CLI11_PARSE(app, argc, argv);

  try {
    CLI::App* sub = app.get_subcommands().front();
    const HarnessConfig cfg =
        load_harness_config(config_path, collect_overrides(app, sub, sets));
    if (sub == gen) return cmd_gen_data(cfg);
    if (sub == tr) return cmd_train(cfg);
    if (sub == ev) return cmd_eval(cfg, checkpoint);
    if (sub == ab) return cmd_ablate(cfg);
    return cmd_grad_check();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
