#include "lgedet/dataset.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "lgedet/random.hpp"

namespace lgedet {

namespace {

using nlohmann::json;

json grid_to_json(const GridSpec& g) {
  return json{{"origin_x", g.origin_x}, {"origin_y", g.origin_y}, {"cell_size", g.cell_size},
              {"h", g.h},               {"w", g.w},               {"z_min", g.z_min},
              {"z_max", g.z_max}};
}

GridSpec grid_from_json(const json& j) {
  GridSpec g;
  g.origin_x = j.at("origin_x").get<double>();
  g.origin_y = j.at("origin_y").get<double>();
  g.cell_size = j.at("cell_size").get<double>();
  g.h = j.at("h").get<int64_t>();
  g.w = j.at("w").get<int64_t>();
  g.z_min = j.at("z_min").get<double>();
  g.z_max = j.at("z_max").get<double>();
  return g;
}

json spec_to_json(const SceneSpec& s) {
  return json{{"num_objects", s.num_objects},
              {"class_mix", s.class_mix},
              {"weak_fraction", s.weak_fraction},
              {"easy_density", s.easy_density},
              {"weak_density", s.weak_density},
              {"density_range_scale", s.density_range_scale},
              {"clutter_points", s.clutter_points},
              {"seed", s.seed}};
}

}  // namespace

std::vector<Scene> make_scenes(const SceneSpec& spec, const GridSpec& grid, int count,
                               uint64_t base_seed, int64_t start_index) {
  if (count < 0) throw std::invalid_argument("make_scenes: count must be >= 0");
  std::vector<Scene> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i)
    out.push_back(generate_scene(
        spec, grid, Rng::derive(base_seed, static_cast<uint64_t>(start_index + i))));
  return out;
}

PreparedScene prepare_scene(const Scene& scene) {
  PreparedScene p;
  p.voxels = voxelize_bev(scene.cloud, scene.grid);
  p.heatmap_gt = gaussian_heatmap_targets(scene.boxes, scene.grid, kNumClasses);
  p.boxes = scene.boxes;
  return p;
}

Dataset prepare_dataset(const std::vector<Scene>& scenes, const GridSpec& grid) {
  Dataset d;
  d.grid = grid;
  d.scenes.reserve(scenes.size());
  for (const Scene& s : scenes) d.scenes.push_back(prepare_scene(s));
  return d;
}

void write_dataset(const std::string& dir, const SceneSpec& spec, const GridSpec& grid, int count,
                   uint64_t base_seed, int64_t start_index) {
  json manifest;
  manifest["grid"] = grid_to_json(grid);
  manifest["scene_spec"] = spec_to_json(spec);
  manifest["base_seed"] = base_seed;
  manifest["start_index"] = start_index;
  manifest["count"] = count;
  json files = json::array();
  for (int i = 0; i < count; ++i) {
    const Scene scene = generate_scene(
        spec, grid, Rng::derive(base_seed, static_cast<uint64_t>(start_index + i)));
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%05lld.bin",
                  static_cast<long long>(start_index + i));
    save_scene(dir + "/" + name, scene);
    files.push_back(std::string(name));
  }
  manifest["files"] = files;
  std::ofstream os(dir + "/manifest.json");
  if (!os.good()) throw std::runtime_error("write_dataset: cannot open manifest in " + dir);
  os << manifest.dump(2) << "\n";
}

std::vector<Scene> read_dataset(const std::string& dir, GridSpec* grid_out) {
  std::ifstream is(dir + "/manifest.json");
  if (!is.good()) throw std::runtime_error("read_dataset: no manifest.json in " + dir);
  json manifest;
  is >> manifest;
  if (grid_out) *grid_out = grid_from_json(manifest.at("grid"));
  std::vector<Scene> out;
  for (const auto& f : manifest.at("files"))
    out.push_back(load_scene(dir + "/" + f.get<std::string>()));
  return out;
}

}  // namespace lgedet
