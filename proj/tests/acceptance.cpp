// Acceptance gate: nine numbered end-to-end checks, one verdict line each.
// Exit status is zero only when every check passes. The directional
// benchmark (checks 5 and 6) trains nine full models and dominates the
// runtime; progress goes to stderr.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include "lgedet/eval.hpp"
#include "lgedet/gradsuite.hpp"
#include "lgedet/wavelet.hpp"
#include "support/oracles.hpp"

using namespace lgedet;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& detail) {
  std::printf("criterion %d: %s - %s\n", criterion, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

void progress(const std::string& msg) {
  std::fprintf(stderr, "[acceptance] %s\n", msg.c_str());
  std::fflush(stderr);
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof(buf), f, args);
  va_end(args);
  return std::string(buf);
}

double median3(double a, double b, double c) {
  std::vector<double> v = {a, b, c};
  std::sort(v.begin(), v.end());
  return v[1];
}

Heatmap random_heatmap(int64_t h, int64_t w, int64_t classes, Rng& rng) {
  std::vector<double> vals(static_cast<size_t>(h * w * classes));
  for (double& v : vals) v = 0.001 + 0.998 * rng.uniform();
  return Heatmap{Tensor::from_values({h, w, classes}, vals)};
}

// ---------------------------------------------------------------------------
// 1. Haar round-trip and energy conservation.

void criterion_1() {
  const auto t0 = Clock::now();
  Rng rng(101);
  const int64_t channel_choices[3] = {1, 4, 16};
  double worst_f32 = 0.0, worst_f64 = 0.0, worst_energy = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const int64_t h = 2 * (1 + rng.uniform_int(32));  // even, 2..64
    const int64_t w = 2 * (1 + rng.uniform_int(32));
    const int64_t c = channel_choices[i % 3];
    for (DType dt : {DType::F32, DType::F64}) {
      const Tensor x = Tensor::randn({h, w, c}, rng, 1.0, dt);
      const SubbandSet s = dwt2_haar(x);
      const Tensor back = idwt2_haar(s);
      const std::vector<double> xv = x.values();
      const std::vector<double> bv = back.values();
      double err = 0.0, energy_in = 0.0, energy_out = 0.0;
      for (size_t j = 0; j < xv.size(); ++j) {
        err = std::max(err, std::fabs(bv[j] - xv[j]));
        energy_in += xv[j] * xv[j];
      }
      for (const Tensor* sb : {&s.ll, &s.lh, &s.hl, &s.hh})
        for (double v : sb->values()) energy_out += v * v;
      const double defect = std::fabs(energy_out - energy_in) / energy_in;
      worst_energy = std::max(worst_energy, defect);
      (dt == DType::F32 ? worst_f32 : worst_f64) = std::max(dt == DType::F32 ? worst_f32 : worst_f64, err);
    }
  }
  const double elapsed = seconds_since(t0);
  const bool pass = worst_f32 < 1e-5 && worst_f64 < 1e-12 && worst_energy < 1e-6 && elapsed < 10.0;
  report(1, pass,
         fmt("haar round-trip over 1000 tensors: max err %.2e (f32, limit 1e-5), %.2e (f64, limit "
             "1e-12), energy defect %.2e (limit 1e-6), %.1fs (limit 10s)",
             worst_f32, worst_f64, worst_energy, elapsed));
}

// ---------------------------------------------------------------------------
// 2. Numeric gradient suite.

void criterion_2() {
  const auto t0 = Clock::now();
  const std::vector<GradCheckCase> cases = run_gradient_suite();
  int failed = 0;
  double worst = 0.0;
  std::string worst_name = "none";
  for (const GradCheckCase& c : cases) {
    if (!c.pass()) ++failed;
    if (c.max_rel_error > worst) {
      worst = c.max_rel_error;
      worst_name = c.name;
    }
  }
  const double elapsed = seconds_since(t0);
  const bool pass = failed == 0 && !cases.empty() && elapsed < 60.0;
  report(2, pass,
         fmt("%zu gradient checks, %d failed, worst %.2e (%s), %.1fs (limit 60s)", cases.size(),
             failed, worst, worst_name.c_str(), elapsed));
}

// ---------------------------------------------------------------------------
// 3. Stage accounting: three stages of 200 claim 600 distinct cells.

void criterion_3() {
  Rng rng(103);
  int violations = 0;
  // The exact between-stage update, driven by explicit random score grids.
  for (int trial = 0; trial < 100; ++trial) {
    StageMask mask = StageMask::ones(64, 64);
    std::set<std::pair<int64_t, int64_t>> cells;
    int64_t total = 0;
    for (int stage = 0; stage < 3; ++stage) {
      const Heatmap h = random_heatmap(64, 64, kNumClasses, rng);
      const SelectionStep step = advance_selection(h, mask, 200, 200, 3);
      total += static_cast<int64_t>(step.queries.size());
      for (const Query& q : step.queries) cells.insert({q.row, q.col});
      mask = step.next_mask;
    }
    if (total != 600 || cells.size() != 600) ++violations;
  }
  // The same accounting through the full pipeline entry point.
  Rng mrng(104);
  ModelConfig mc;
  mc.channels = 32;
  Model model = make_model(mc, 7);
  for (StageParams& sp : model.stages) {
    Tensor random_cls = Tensor::randn(sp.head.conv2.shape(), mrng, 0.5, DType::F32, true);
    for (int64_t i = 0; i < static_cast<int64_t>(sp.head.conv2.values().size()); ++i)
      sp.head.conv2.set_value_at(i, random_cls.value_at(i));
  }
  int pipeline_violations = 0;
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor f0 = Tensor::randn({64, 64, 32}, mrng, 1.0);
    const MultistageResult r =
        run_multistage(f0, model.stages, model.variants(), 200, StageMode::Parallel);
    std::set<std::pair<int64_t, int64_t>> cells;
    for (const Query& q : r.all_queries) cells.insert({q.row, q.col});
    if (r.all_queries.size() != 600 || cells.size() != 600) ++pipeline_violations;
  }
  const bool pass = violations == 0 && pipeline_violations == 0;
  report(3, pass,
         fmt("K=3, N=200: %d/100 selection-chain violations, %d/5 full-pipeline violations "
             "(600 queries on 600 distinct cells required)",
             violations, pipeline_violations));
}

// ---------------------------------------------------------------------------
// 4. Masked cells receive exactly zero supervision at the next stage.

void criterion_4() {
  Rng rng(105);
  const GridSpec grid;
  SceneSpec spec;
  spec.seed = 7;
  int64_t checked_cells = 0, violations = 0;
  for (int i = 0; i < 100; ++i) {
    const Scene scene = generate_scene(spec, grid, 1000 + static_cast<uint64_t>(i));
    const PreparedScene ps = prepare_scene(scene);
    StageMask mask = StageMask::ones(grid.h, grid.w);
    for (int stage = 0; stage < 2; ++stage) {
      const Heatmap h = random_heatmap(grid.h, grid.w, kNumClasses, rng);
      mask = advance_selection(h, mask, 200, 200, 3).next_mask;
      const Tensor t = stage_targets(ps.heatmap_gt, mask);
      const std::vector<double> tv = t.values();
      for (int64_t row = 0; row < grid.h; ++row)
        for (int64_t col = 0; col < grid.w; ++col) {
          if (mask.at(row, col)) continue;
          ++checked_cells;
          const size_t base = static_cast<size_t>((row * grid.w + col) * kNumClasses);
          for (int c = 0; c < kNumClasses; ++c)
            if (tv[base + static_cast<size_t>(c)] != 0.0) ++violations;
        }
    }
  }
  const bool pass = violations == 0 && checked_cells > 0;
  report(4, pass,
         fmt("supervision masking over 100 scenes x 2 stage transitions: %lld suppressed cells "
             "checked, %lld nonzero targets (0 required, bit-exact)",
             static_cast<long long>(checked_cells), static_cast<long long>(violations)));
}

// ---------------------------------------------------------------------------
// 5 and 6. Directional benchmark and training signal.

struct BenchRun {
  double recall2m = 0.0;
  double map = 0.0;
  double untrained_recall2m = 0.0;
  std::vector<double> loss;
};

constexpr double kBenchLearningRate = 1e-3;

BenchRun bench_run(LgeVariant variant, int stages, uint64_t seed, const Dataset& train_data,
                   const Dataset& eval_data, bool want_untrained) {
  TrainConfig cfg;
  cfg.model.channels = 32;
  cfg.model.num_stages = stages;
  cfg.model.variant = variant;
  cfg.model.lge_iterations = 1;
  cfg.model.num_heads = 2;
  cfg.queries_per_stage = 200;
  cfg.mode = StageMode::Parallel;
  cfg.learning_rate = kBenchLearningRate;
  cfg.steps = 2000;
  cfg.batch_size = 1;
  cfg.seed = seed;

  EvalConfig ec;
  ec.queries_per_stage = 200;
  ec.mode = StageMode::Parallel;

  Model model = make_model(cfg.model, seed);
  BenchRun out;
  if (want_untrained) out.untrained_recall2m = evaluate(model, eval_data, ec).recall_at_2m;
  const TrainResult tr = train(model, cfg, train_data);
  out.loss = tr.loss_per_step;
  const EvalReport er = evaluate(model, eval_data, ec);
  out.recall2m = er.recall_at_2m;
  out.map = er.map;
  progress(fmt("%s %d-stage seed %llu: recall@2m %.3f, mAP %.3f, %.0fs train",
               lge_variant_name(variant), stages, static_cast<unsigned long long>(seed),
               out.recall2m, out.map, tr.wall_seconds));
  return out;
}

void criteria_5_and_6() {
  const auto t0 = Clock::now();
  const GridSpec grid;  // 64x64 benchmark grid
  const SceneSpec spec;
  progress("preparing benchmark datasets (500 train / 100 eval scenes)");
  const Dataset train_data = prepare_dataset(make_scenes(spec, grid, 500, 42, 0), grid);
  const Dataset eval_data = prepare_dataset(make_scenes(spec, grid, 100, 42, 500), grid);

  const uint64_t seeds[3] = {42, 43, 44};
  BenchRun g3[3], g1[3], b1[3];
  for (int i = 0; i < 3; ++i) {
    g3[i] = bench_run(LgeVariant::G, 3, seeds[i], train_data, eval_data, i == 0);
    g1[i] = bench_run(LgeVariant::G, 1, seeds[i], train_data, eval_data, false);
    b1[i] = bench_run(LgeVariant::B, 1, seeds[i], train_data, eval_data, false);
  }
  const double elapsed = seconds_since(t0);

  const double g3_recall = median3(g3[0].recall2m, g3[1].recall2m, g3[2].recall2m);
  const double g1_recall = median3(g1[0].recall2m, g1[1].recall2m, g1[2].recall2m);
  const double g_map = median3(g1[0].map, g1[1].map, g1[2].map);
  const double b_map = median3(b1[0].map, b1[1].map, b1[2].map);
  const bool pass5 = g3_recall >= g1_recall && g_map >= b_map && elapsed < 1800.0;
  report(5, pass5,
         fmt("median over 3 seeds: 3-stage recall@2m %.3f vs 1-stage %.3f (>= required); "
             "variant G mAP %.3f vs variant B %.3f (>= required); %.0fs (limit 1800s)",
             g3_recall, g1_recall, g_map, b_map, elapsed));

  // Training signal on the seed-42 three-stage run.
  const BenchRun& ref = g3[0];
  const double gain = ref.recall2m - ref.untrained_recall2m;
  const double early = trailing_average(ref.loss, 50, 49);
  const double late = trailing_average(ref.loss, 50, ref.loss.size() - 1);
  const bool pass6 = gain >= 0.3 && late <= 0.4 * early;
  report(6, pass6,
         fmt("trained recall@2m %.3f vs untrained %.3f (gain %.3f, >= 0.3 required); "
             "trailing-50 loss %.4f at end vs %.4f at step 50 (ratio %.2f, <= 0.40 required)",
             ref.recall2m, ref.untrained_recall2m, gain, late, early,
             early > 0.0 ? late / early : 0.0));
}

// ---------------------------------------------------------------------------
// 7. Test-time query widening keeps earlier selections prefix-stable.

void criterion_7() {
  Rng rng(107);
  ModelConfig mc;
  mc.channels = 32;
  Model model = make_model(mc, 42);
  for (StageParams& sp : model.stages) {
    Tensor random_cls = Tensor::randn(sp.head.conv2.shape(), rng, 0.5, DType::F32, true);
    for (int64_t i = 0; i < static_cast<int64_t>(sp.head.conv2.values().size()); ++i)
      sp.head.conv2.set_value_at(i, random_cls.value_at(i));
  }
  const GridSpec grid;
  const SceneSpec spec;
  const std::vector<Scene> scenes = make_scenes(spec, grid, 10, 42, 500);
  int violations = 0;
  for (const Scene& scene : scenes) {
    const Tensor f0 = forward_stem(model, prepare_scene(scene).voxels);
    const MultistageResult narrow =
        run_multistage(f0, model.stages, model.variants(), 200, StageMode::Parallel, 3, -1);
    const MultistageResult wide =
        run_multistage(f0, model.stages, model.variants(), 400, StageMode::Parallel, 3, 200);
    for (size_t s = 0; s < 3; ++s) {
      const std::vector<Query>& qn = narrow.stages[s].queries;
      const std::vector<Query>& qw = wide.stages[s].queries;
      if (qn.size() != 200 || qw.size() != 400) {
        ++violations;
        continue;
      }
      for (size_t i = 0; i < qn.size(); ++i)
        if (qn[i].row != qw[i].row || qn[i].col != qw[i].col ||
            qn[i].class_id != qw[i].class_id || qn[i].score != qw[i].score)
          ++violations;
    }
  }
  report(7, violations == 0,
         fmt("query budget 600 -> 1200 at test time over 10 scenes: %d prefix violations "
             "(0 required, exact match)",
             violations));
}

// ---------------------------------------------------------------------------
// 8. The evaluation harness agrees exactly with a brute-force reference.

void criterion_8() {
  Rng rng(108);
  int mismatches = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const int64_t num_scenes = 1 + rng.uniform_int(3);
    std::vector<std::vector<Box3D>> gt(static_cast<size_t>(num_scenes));
    std::vector<oracle::FlatGt> flat_gt;
    const int total_gt = 1 + static_cast<int>(rng.uniform_int(50));
    for (int i = 0; i < total_gt; ++i) {
      const int64_t scene = rng.uniform_int(num_scenes);
      Box3D b;
      b.class_id = static_cast<int>(rng.uniform_int(kNumClasses));
      b.cx = rng.uniform(-15.0, 15.0);
      b.cy = rng.uniform(-15.0, 15.0);
      gt[static_cast<size_t>(scene)].push_back(b);
      flat_gt.push_back({b.class_id, scene, b.cx, b.cy});
    }
    std::vector<Prediction> preds;
    std::vector<oracle::FlatPred> flat_preds;
    const int n_preds = 1 + static_cast<int>(rng.uniform_int(50));
    for (int i = 0; i < n_preds; ++i) {
      Prediction p;
      p.scene = rng.uniform_int(num_scenes);
      p.stage = static_cast<int>(rng.uniform_int(3));
      p.row = i;
      p.col = i;
      p.box.class_id = static_cast<int>(rng.uniform_int(kNumClasses));
      p.box.score = rng.uniform();
      if (rng.uniform() < 0.6 && !gt[static_cast<size_t>(p.scene)].empty()) {
        const std::vector<Box3D>& pool = gt[static_cast<size_t>(p.scene)];
        const Box3D& anchor = pool[static_cast<size_t>(rng.uniform_int(
            static_cast<int64_t>(pool.size())))];
        p.box.cx = anchor.cx + rng.uniform(-2.5, 2.5);
        p.box.cy = anchor.cy + rng.uniform(-2.5, 2.5);
      } else {
        p.box.cx = rng.uniform(-15.0, 15.0);
        p.box.cy = rng.uniform(-15.0, 15.0);
      }
      preds.push_back(p);
      flat_preds.push_back({p.box.score, p.box.class_id, p.scene, p.box.cx, p.box.cy, p.stage,
                            p.row, p.col});
    }
    const double harness_map = score_predictions(preds, gt, 3).map;
    const double oracle_map = oracle::brute_force_map(flat_preds, flat_gt);
    if (harness_map != oracle_map) ++mismatches;
  }
  report(8, mismatches == 0,
         fmt("harness mAP vs brute-force reference on 50 random cases: %d mismatches "
             "(0 required, exact equality)",
             mismatches));
}

// ---------------------------------------------------------------------------
// 9. Fixed-seed train + eval is bit-identical across consecutive runs.

std::string determinism_run() {
  const GridSpec grid;
  const SceneSpec spec;
  TrainConfig cfg;
  cfg.model.channels = 16;
  cfg.model.num_stages = 2;
  cfg.model.num_heads = 2;
  cfg.queries_per_stage = 50;
  cfg.steps = 60;
  cfg.seed = 42;
  const Dataset train_data = prepare_dataset(make_scenes(spec, grid, 30, 42, 0), grid);
  const Dataset eval_data = prepare_dataset(make_scenes(spec, grid, 10, 42, 30), grid);
  Model model = make_model(cfg.model, cfg.seed);
  train(model, cfg, train_data);
  EvalConfig ec;
  ec.queries_per_stage = 50;
  const EvalReport r = evaluate(model, eval_data, ec);
  return eval_report_json(r).dump();
}

void criterion_9() {
  progress("determinism: first reduced-scale train + eval run");
  const std::string first = determinism_run();
  progress("determinism: second reduced-scale train + eval run");
  const std::string second = determinism_run();
  const bool pass = first == second && !first.empty();
  report(9, pass,
         fmt("two fixed-seed train+eval runs: metrics JSON %s (%zu bytes)",
             pass ? "bit-identical" : "DIFFER", first.size()));
}

}  // namespace

int main() {
  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criteria_5_and_6();
  criterion_7();
  criterion_8();
  criterion_9();
  if (g_failures == 0) {
    std::printf("acceptance: all 9 criteria passed\n");
    return 0;
  }
  std::printf("acceptance: %d criteria FAILED\n", g_failures);
  return 1;
}
