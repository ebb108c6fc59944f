#include "lgedet/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "lgedet/loss.hpp"
#include "lgedet/random.hpp"

namespace lgedet {

namespace {

// RMSProp: momentum-free, per-element adaptive step.
constexpr double kRmsDecay = 0.99;
constexpr double kRmsEpsilon = 1e-8;

struct OptimizerSlot {
  Tensor param;
  std::vector<float> v;  // running mean of squared gradients
  bool frozen = false;
};

void rmsprop_step(OptimizerSlot& slot, double lr) {
  if (slot.frozen || !slot.param.has_grad()) return;
  auto w = slot.param.f32();
  auto g = slot.param.grad_f32();
  for (size_t i = 0; i < w.size(); ++i) {
    const float gi = g[i];
    slot.v[i] = static_cast<float>(kRmsDecay * slot.v[i] + (1.0 - kRmsDecay) * gi * gi);
    w[i] -= static_cast<float>(lr * gi / (std::sqrt(static_cast<double>(slot.v[i])) + kRmsEpsilon));
  }
}

struct SceneLossParts {
  Tensor total;
  double focal_value = 0.0;
  double box_value = 0.0;
  int matched_boxes = 0;
};

// Per-scene pipeline loss: summed per-stage focal terms on masked targets,
// plus L1 regression at ground-truth center cells that a stage selected.
SceneLossParts scene_loss(const Model& model, const PreparedScene& scene, const GridSpec& grid,
                          const TrainConfig& cfg) {
  SceneLossParts parts;
  const Tensor f0 = forward_stem(model, scene.voxels);
  const MultistageResult ms = run_multistage(f0, model.stages, model.variants(),
                                             cfg.queries_per_stage, cfg.mode, cfg.pool_kernel);

  Tensor loss;
  for (size_t s = 0; s < ms.stages.size(); ++s) {
    const StageOutput& so = ms.stages[s];
    const Tensor target = stage_targets(scene.heatmap_gt, so.mask_before);
    const Tensor f = focal_loss(so.heatmap, target);
    loss = loss.defined() ? add(loss, f) : f;
  }
  parts.focal_value = loss.item();

  // Cells are claimed by at most one stage, so each ground-truth center maps
  // to at most one (stage, query) pair.
  std::unordered_map<int64_t, int> claimed_by;
  for (size_t s = 0; s < ms.stages.size(); ++s)
    for (const Query& q : ms.stages[s].queries)
      claimed_by.emplace(q.row * grid.w + q.col, static_cast<int>(s));

  std::vector<Tensor> preds;
  std::vector<std::array<double, 8>> targets;
  for (const Box3D& b : scene.boxes) {
    if (!grid.contains(grid.row_of(b.cy), grid.col_of(b.cx))) continue;
    const int64_t row = grid.row_of(b.cy), col = grid.col_of(b.cx);
    const auto it = claimed_by.find(row * grid.w + col);
    if (it == claimed_by.end()) continue;
    const size_t s = static_cast<size_t>(it->second);
    preds.push_back(decode_regression(row, col, ms.stages[s].enhanced,
                                      model.stages[s].decode));
    targets.push_back(make_regression_target(b, grid, row, col));
  }
  parts.matched_boxes = static_cast<int>(preds.size());
  if (!preds.empty()) {
    const Tensor bl = box_loss(preds, targets);
    parts.box_value = bl.item();
    loss = add(loss, mul_scalar(bl, cfg.box_loss_weight));
  }
  parts.total = loss;
  return parts;
}

void write_divergence_dump(const std::string& path, int step, double loss,
                           const std::vector<size_t>& batch,
                           const std::vector<SceneLossParts>& parts) {
  nlohmann::json j;
  j["step"] = step;
  j["loss"] = loss;
  j["batch_scene_indices"] = batch;
  nlohmann::json per_scene = nlohmann::json::array();
  for (const SceneLossParts& p : parts)
    per_scene.push_back({{"focal", p.focal_value},
                         {"box", p.box_value},
                         {"matched_boxes", p.matched_boxes}});
  j["per_scene"] = per_scene;
  std::ofstream os(path);
  if (os.good()) os << j.dump(2) << "\n";
}

}  // namespace

double one_cycle_lr(int step, int total_steps, double peak) {
  const double floor_lr = peak / 25.0;
  if (total_steps <= 1) return peak;
  const int up = std::max(1, static_cast<int>(std::lround(0.3 * total_steps)));
  if (step <= up) return floor_lr + (peak - floor_lr) * static_cast<double>(step) / up;
  const double t = static_cast<double>(step - up) / static_cast<double>(total_steps - up);
  return peak - (peak - floor_lr) * t;
}

double trailing_average(const std::vector<double>& values, int window, size_t at) {
  if (values.empty()) return 0.0;
  at = std::min(at, values.size() - 1);
  const size_t lo = at + 1 >= static_cast<size_t>(window) ? at + 1 - window : 0;
  double s = 0.0;
  for (size_t i = lo; i <= at; ++i) s += values[i];
  return s / static_cast<double>(at + 1 - lo);
}

TrainResult train(Model& model, const TrainConfig& cfg, const Dataset& data) {
  if (data.scenes.empty()) throw std::invalid_argument("train: dataset is empty");
  if (cfg.steps < 0 || cfg.batch_size < 1)
    throw std::invalid_argument("train: steps must be >= 0 and batch_size >= 1");

  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();

  auto params = named_parameters(model);
  std::vector<OptimizerSlot> slots;
  slots.reserve(params.size());
  for (auto& [name, t] : params) {
    OptimizerSlot s;
    s.param = t;
    s.v.assign(static_cast<size_t>(t.numel()), 0.0f);
    slots.push_back(std::move(s));
  }

  // Deterministic epoch shuffling; batches cycle through the permutation.
  Rng order_rng(Rng::derive(cfg.seed, 0x0bdec));
  std::vector<size_t> order(data.scenes.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t cursor = order.size();  // forces a shuffle on first use

  bool frozen = false;
  for (int step = 1; step <= cfg.steps; ++step) {
    if (cfg.freeze_backbone_phase2 && !frozen && step > cfg.steps / 2) {
      frozen = true;
      for (size_t i = 0; i < params.size(); ++i) {
        if (params[i].first.rfind("stem.", 0) == 0) {
          slots[i].frozen = true;
          slots[i].param.impl_ptr()->requires_grad = false;
        }
      }
    }

    std::vector<size_t> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor >= order.size()) {
        for (size_t i = order.size(); i > 1; --i)
          std::swap(order[i - 1], order[static_cast<size_t>(order_rng.uniform_int(
                                      static_cast<int64_t>(i)))]);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }

    Tape tape;
    TapeScope scope(tape);
    Tensor total;
    std::vector<SceneLossParts> parts;
    for (size_t idx : batch) {
      SceneLossParts p = scene_loss(model, data.scenes[idx], data.grid, cfg);
      total = total.defined() ? add(total, p.total) : p.total;
      parts.push_back(std::move(p));
    }
    if (cfg.batch_size > 1) total = mul_scalar(total, 1.0 / cfg.batch_size);

    const double loss_value = total.item();
    if (!std::isfinite(loss_value)) {
      write_divergence_dump(cfg.divergence_dump_path, step, loss_value, batch, parts);
      throw TrainingDiverged("non-finite loss " + std::to_string(loss_value) + " at step " +
                                 std::to_string(step) + "; batch dump written",
                             cfg.divergence_dump_path);
    }

    tape.backward(total);
    const double lr = one_cycle_lr(step, cfg.steps, cfg.learning_rate);
    for (OptimizerSlot& s : slots) rmsprop_step(s, lr);

    result.loss_per_step.push_back(loss_value);
    if (step % 10 == 0 || step == cfg.steps)
      result.log.push_back({step, loss_value, lr});
  }

  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace lgedet
