#include "lgedet/config.hpp"

#include <fstream>
#include <stdexcept>

namespace lgedet {

namespace {

using nlohmann::json;

json parse_override_value(const std::string& raw) {
  // JSON literals (numbers, bools, arrays, quoted strings) pass through;
  // anything unparsable is a bare string like a variant letter or a path.
  json v = json::parse(raw, nullptr, false);
  if (v.is_discarded()) return json(raw);
  return v;
}

void apply_override(json& root, const std::string& entry) {
  const size_t eq = entry.find('=');
  if (eq == std::string::npos || eq == 0)
    throw std::invalid_argument("override must look like key.path=value, got '" + entry + "'");
  const std::string path = entry.substr(0, eq);
  json* node = &root;
  size_t start = 0;
  while (true) {
    const size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw std::invalid_argument("bad override path '" + path + "'");
    if (dot == std::string::npos) {
      (*node)[key] = parse_override_value(entry.substr(eq + 1));
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

}  // namespace

json harness_config_json(const HarnessConfig& c) {
  json j;
  j["grid"] = {{"origin_x", c.grid.origin_x}, {"origin_y", c.grid.origin_y},
               {"cell_size", c.grid.cell_size}, {"h", c.grid.h}, {"w", c.grid.w},
               {"z_min", c.grid.z_min}, {"z_max", c.grid.z_max}};
  j["scene"] = {{"num_objects", c.scene.num_objects},
                {"class_mix", c.scene.class_mix},
                {"weak_fraction", c.scene.weak_fraction},
                {"easy_density", c.scene.easy_density},
                {"weak_density", c.scene.weak_density},
                {"density_range_scale", c.scene.density_range_scale},
                {"clutter_points", c.scene.clutter_points},
                {"seed", c.scene.seed}};
  j["data"] = {{"train_scenes", c.train_scenes},
               {"eval_scenes", c.eval_scenes},
               {"dir", c.data_dir}};
  j["out"] = {{"dir", c.out_dir}};
  j["model"] = {{"channels", c.train.model.channels},
                {"classes", c.train.model.num_classes},
                {"stages", c.train.model.num_stages},
                {"variant", lge_variant_name(c.train.model.variant)},
                {"iterations", c.train.model.lge_iterations},
                {"heads", c.train.model.num_heads},
                {"decode_radius", c.train.model.decode_radius}};
  j["train"] = {{"queries_per_stage", c.train.queries_per_stage},
                {"mode", stage_mode_name(c.train.mode)},
                {"learning_rate", c.train.learning_rate},
                {"steps", c.train.steps},
                {"batch_size", c.train.batch_size},
                {"box_loss_weight", c.train.box_loss_weight},
                {"freeze_backbone_phase2", c.train.freeze_backbone_phase2},
                {"pool_kernel", c.train.pool_kernel},
                {"seed", c.train.seed},
                {"divergence_dump_path", c.train.divergence_dump_path}};
  j["eval"] = {{"queries_per_stage", c.eval.queries_per_stage},
               {"mask_queries_per_stage", c.eval.mask_queries_per_stage},
               {"mode", stage_mode_name(c.eval.mode)},
               {"pool_kernel", c.eval.pool_kernel}};
  json variants = json::array();
  for (LgeVariant v : c.ablate_variants) variants.push_back(lge_variant_name(v));
  json modes = json::array();
  for (StageMode m : c.ablate_modes) modes.push_back(stage_mode_name(m));
  j["ablate"] = {{"variants", variants},
                 {"iterations", c.ablate_iterations},
                 {"stages", c.ablate_stages},
                 {"modes", modes},
                 {"seeds", c.ablate_seeds}};
  return j;
}

HarnessConfig harness_config_from_json(const json& j) {
  HarnessConfig c;
  const json& g = j.at("grid");
  c.grid.origin_x = g.at("origin_x").get<double>();
  c.grid.origin_y = g.at("origin_y").get<double>();
  c.grid.cell_size = g.at("cell_size").get<double>();
  c.grid.h = g.at("h").get<int64_t>();
  c.grid.w = g.at("w").get<int64_t>();
  c.grid.z_min = g.at("z_min").get<double>();
  c.grid.z_max = g.at("z_max").get<double>();

  const json& s = j.at("scene");
  c.scene.num_objects = s.at("num_objects").get<int>();
  c.scene.class_mix = s.at("class_mix").get<std::array<double, kNumClasses>>();
  c.scene.weak_fraction = s.at("weak_fraction").get<double>();
  c.scene.easy_density = s.at("easy_density").get<double>();
  c.scene.weak_density = s.at("weak_density").get<double>();
  c.scene.density_range_scale = s.at("density_range_scale").get<double>();
  c.scene.clutter_points = s.at("clutter_points").get<int>();
  c.scene.seed = s.at("seed").get<uint64_t>();

  const json& d = j.at("data");
  c.train_scenes = d.at("train_scenes").get<int>();
  c.eval_scenes = d.at("eval_scenes").get<int>();
  c.data_dir = d.at("dir").get<std::string>();
  c.out_dir = j.at("out").at("dir").get<std::string>();

  const json& m = j.at("model");
  c.train.model.channels = m.at("channels").get<int64_t>();
  c.train.model.num_classes = m.at("classes").get<int>();
  c.train.model.num_stages = m.at("stages").get<int>();
  c.train.model.variant = lge_variant_from_string(m.at("variant").get<std::string>());
  c.train.model.lge_iterations = m.at("iterations").get<int>();
  c.train.model.num_heads = m.at("heads").get<int>();
  c.train.model.decode_radius = m.at("decode_radius").get<int>();

  const json& t = j.at("train");
  c.train.queries_per_stage = t.at("queries_per_stage").get<int64_t>();
  c.train.mode = stage_mode_from_string(t.at("mode").get<std::string>());
  c.train.learning_rate = t.at("learning_rate").get<double>();
  c.train.steps = t.at("steps").get<int>();
  c.train.batch_size = t.at("batch_size").get<int>();
  c.train.box_loss_weight = t.at("box_loss_weight").get<double>();
  c.train.freeze_backbone_phase2 = t.at("freeze_backbone_phase2").get<bool>();
  c.train.pool_kernel = t.at("pool_kernel").get<int>();
  c.train.seed = t.at("seed").get<uint64_t>();
  c.train.divergence_dump_path = t.at("divergence_dump_path").get<std::string>();

  const json& e = j.at("eval");
  c.eval.queries_per_stage = e.at("queries_per_stage").get<int64_t>();
  c.eval.mask_queries_per_stage = e.at("mask_queries_per_stage").get<int64_t>();
  c.eval.mode = stage_mode_from_string(e.at("mode").get<std::string>());
  c.eval.pool_kernel = e.at("pool_kernel").get<int>();

  const json& a = j.at("ablate");
  c.ablate_variants.clear();
  for (const auto& v : a.at("variants"))
    c.ablate_variants.push_back(lge_variant_from_string(v.get<std::string>()));
  c.ablate_iterations = a.at("iterations").get<std::vector<int>>();
  c.ablate_stages = a.at("stages").get<std::vector<int>>();
  c.ablate_modes.clear();
  for (const auto& v : a.at("modes"))
    c.ablate_modes.push_back(stage_mode_from_string(v.get<std::string>()));
  c.ablate_seeds = a.at("seeds").get<std::vector<uint64_t>>();
  return c;
}

HarnessConfig load_harness_config(const std::string& config_path,
                                  const std::vector<std::string>& overrides) {
  json merged = harness_config_json(HarnessConfig{});
  if (!config_path.empty()) {
    std::ifstream is(config_path);
    if (!is.good()) throw std::runtime_error("cannot open config file " + config_path);
    json file_cfg;
    is >> file_cfg;
    merged.merge_patch(file_cfg);
  }
  for (const std::string& ov : overrides) apply_override(merged, ov);
  return harness_config_from_json(merged);
}

std::vector<TrainConfig> build_ablation_grid(const HarnessConfig& c) {
  std::vector<TrainConfig> grid;
  for (LgeVariant v : c.ablate_variants)
    for (int it : c.ablate_iterations)
      for (int k : c.ablate_stages)
        for (StageMode mode : c.ablate_modes)
          for (uint64_t seed : c.ablate_seeds) {
            TrainConfig cell = c.train;
            cell.model.variant = v;
            cell.model.lge_iterations = it;
            cell.model.num_stages = k;
            cell.mode = mode;
            cell.seed = seed;
            grid.push_back(cell);
          }
  return grid;
}

}  // namespace lgedet
