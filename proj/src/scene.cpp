#include "lgedet/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "lgedet/random.hpp"

namespace lgedet {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

struct ClassShape {
  double l_min, l_max, w_min, w_max, h_min, h_max;
};

// Footprint conventions for the three synthetic classes.
constexpr ClassShape kClassShapes[kNumClasses] = {
    {3.5, 5.0, 1.6, 2.2, 1.4, 1.8},  // vehicle-like
    {0.5, 0.8, 0.5, 0.8, 1.5, 1.9},  // pedestrian-like
    {2.0, 3.0, 0.3, 0.6, 0.9, 1.2},  // barrier-like
};

int sample_class(const std::array<double, kNumClasses>& mix, Rng& rng) {
  double total = 0;
  for (double m : mix) total += m;
  check(total > 0, "generate_scene: class mix weights must sum to a positive value");
  double u = rng.uniform() * total;
  for (int i = 0; i < kNumClasses; ++i) {
    if (u < mix[static_cast<size_t>(i)]) return i;
    u -= mix[static_cast<size_t>(i)];
  }
  return kNumClasses - 1;
}

double bev_radius(const Box3D& b) { return 0.5 * std::hypot(b.l, b.w); }

// Point count for one object: surface area times difficulty density times a
// range decay, rounded, floored at one point.
int64_t object_point_count(const Box3D& b, bool weak, const SceneSpec& spec) {
  const double area = 2.0 * b.h * (b.l + b.w) + b.l * b.w;  // four sides plus top
  const double range = std::hypot(b.cx, b.cy);
  const double s = range / spec.density_range_scale;
  const double decay = 1.0 / (1.0 + s * s);
  const double density = weak ? spec.weak_density : spec.easy_density;
  return std::max<int64_t>(1, std::llround(density * area * decay));
}

// Uniform point on the box surface (four side faces and the top, weighted by
// area), in the box frame, then rotated by yaw and translated.
PointCloud::Point sample_surface_point(const Box3D& b, Rng& rng) {
  const double a_side_l = b.l * b.h;  // two faces normal to y
  const double a_side_w = b.w * b.h;  // two faces normal to x
  const double a_top = b.l * b.w;
  const double total = 2 * a_side_l + 2 * a_side_w + a_top;
  double u = rng.uniform() * total;
  double px, py, pz;
  if (u < 2 * a_side_l) {
    const double sign = u < a_side_l ? 1.0 : -1.0;
    px = rng.uniform(-0.5, 0.5) * b.l;
    py = sign * 0.5 * b.w;
    pz = rng.uniform(0.0, 1.0) * b.h;
  } else if (u < 2 * a_side_l + 2 * a_side_w) {
    const double sign = (u - 2 * a_side_l) < a_side_w ? 1.0 : -1.0;
    px = sign * 0.5 * b.l;
    py = rng.uniform(-0.5, 0.5) * b.w;
    pz = rng.uniform(0.0, 1.0) * b.h;
  } else {
    px = rng.uniform(-0.5, 0.5) * b.l;
    py = rng.uniform(-0.5, 0.5) * b.w;
    pz = b.h;
  }
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  PointCloud::Point p;
  p.x = static_cast<float>(b.cx + c * px - s * py + rng.normal(0.0, 0.02));
  p.y = static_cast<float>(b.cy + s * px + c * py + rng.normal(0.0, 0.02));
  p.z = static_cast<float>(b.cz - 0.5 * b.h + pz + rng.normal(0.0, 0.02));
  p.intensity = static_cast<float>(rng.uniform(0.3, 1.0));
  return p;
}

}  // namespace

int64_t GridSpec::col_of(double x) const {
  return static_cast<int64_t>(std::llround((x - origin_x) / cell_size));
}
int64_t GridSpec::row_of(double y) const {
  return static_cast<int64_t>(std::llround((y - origin_y) / cell_size));
}

double wrap_angle(double yaw) {
  double a = std::fmod(yaw + kPi, 2.0 * kPi);
  if (a < 0) a += 2.0 * kPi;
  return a - kPi;
}

Scene generate_scene(const SceneSpec& spec, const GridSpec& grid, uint64_t seed) {
  check(grid.valid(), "generate_scene: invalid grid");
  check(spec.num_objects >= 0, "generate_scene: num_objects must be >= 0");
  check(spec.clutter_points >= 0, "generate_scene: clutter_points must be >= 0");
  Scene scene;
  scene.grid = grid;
  scene.seed = seed;
  Rng rng(Rng::derive(seed, 0x5ce7e));

  for (int i = 0; i < spec.num_objects; ++i) {
    const int cls = sample_class(spec.class_mix, rng);
    const ClassShape& cs = kClassShapes[static_cast<size_t>(cls)];
    Box3D b;
    b.class_id = cls;
    b.l = rng.uniform(cs.l_min, cs.l_max);
    b.w = rng.uniform(cs.w_min, cs.w_max);
    b.h = rng.uniform(cs.h_min, cs.h_max);
    b.yaw = wrap_angle(rng.uniform(-kPi, kPi));
    b.cz = 0.5 * b.h;
    const bool weak = rng.uniform() < spec.weak_fraction;
    const double margin = bev_radius(b) + grid.cell_size;
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      b.cx = rng.uniform(grid.min_x() + margin, grid.max_x() - margin);
      b.cy = rng.uniform(grid.min_y() + margin, grid.max_y() - margin);
      bool overlaps = false;
      for (const Box3D& other : scene.boxes) {
        const double min_sep = bev_radius(b) + bev_radius(other) + 0.5;
        if (std::hypot(b.cx - other.cx, b.cy - other.cy) < min_sep) {
          overlaps = true;
          break;
        }
      }
      placed = !overlaps;
    }
    if (!placed) {
      throw std::runtime_error("generate_scene: could not place object " + std::to_string(i) +
                               " after 100 attempts; reduce num_objects or enlarge the grid");
    }
    const int64_t n_points = object_point_count(b, weak, spec);
    for (int64_t p = 0; p < n_points; ++p) scene.cloud.points.push_back(sample_surface_point(b, rng));
    scene.boxes.push_back(b);
  }

  for (int i = 0; i < spec.clutter_points; ++i) {
    PointCloud::Point p;
    p.x = static_cast<float>(rng.uniform(grid.min_x(), grid.max_x()));
    p.y = static_cast<float>(rng.uniform(grid.min_y(), grid.max_y()));
    p.z = static_cast<float>(rng.uniform(-0.2, 0.5));
    p.intensity = static_cast<float>(rng.uniform(0.0, 0.3));
    scene.cloud.points.push_back(p);
  }
  return scene;
}

Tensor voxelize_bev(const PointCloud& pc, const GridSpec& grid, VoxelizeCounts* counts) {
  check(grid.valid(), "voxelize_bev: invalid grid");
  const int64_t h = grid.h, w = grid.w;
  Tensor out = Tensor::zeros({h, w, kVoxelChannels}, DType::F32);
  std::vector<int32_t> count(static_cast<size_t>(h * w), 0);
  std::vector<float> sum_z(static_cast<size_t>(h * w), 0.0f);
  std::vector<float> max_z(static_cast<size_t>(h * w), 0.0f);
  std::vector<float> sum_i(static_cast<size_t>(h * w), 0.0f);
  int64_t dropped = 0;
  for (const PointCloud::Point& p : pc.points) {
    const int64_t row = grid.row_of(p.y);
    const int64_t col = grid.col_of(p.x);
    if (!grid.contains(row, col) || p.z < grid.z_min || p.z > grid.z_max) {
      ++dropped;
      continue;
    }
    const size_t cell = static_cast<size_t>(row * w + col);
    if (count[cell] == 0 || p.z > max_z[cell]) max_z[cell] = p.z;
    count[cell] += 1;
    sum_z[cell] += p.z;
    sum_i[cell] += p.intensity;
  }
  auto data = out.f32();
  int64_t occupied = 0;
  for (int64_t cell = 0; cell < h * w; ++cell) {
    const int32_t n = count[static_cast<size_t>(cell)];
    if (n == 0) continue;
    ++occupied;
    float* px = data.data() + cell * kVoxelChannels;
    px[0] = std::log1p(static_cast<float>(n));
    px[1] = sum_z[static_cast<size_t>(cell)] / static_cast<float>(n);
    px[2] = max_z[static_cast<size_t>(cell)];
    px[3] = sum_i[static_cast<size_t>(cell)] / static_cast<float>(n);
    px[4] = 1.0f;
  }
  if (counts != nullptr) {
    counts->in_cells = static_cast<int64_t>(pc.points.size()) - dropped;
    counts->dropped = dropped;
  }
  (void)occupied;
  return out;
}

Tensor gaussian_heatmap_targets(const std::vector<Box3D>& boxes, const GridSpec& grid,
                                int num_classes) {
  check(grid.valid(), "gaussian_heatmap_targets: invalid grid");
  check(num_classes >= 1, "gaussian_heatmap_targets: num_classes must be >= 1");
  Tensor out = Tensor::zeros({grid.h, grid.w, num_classes}, DType::F32);
  auto data = out.f32();
  for (const Box3D& b : boxes) {
    check(b.class_id >= 0 && b.class_id < num_classes,
          "gaussian_heatmap_targets: class_id out of range");
    const int64_t crow = grid.row_of(b.cy);
    const int64_t ccol = grid.col_of(b.cx);
    check(grid.contains(crow, ccol), "gaussian_heatmap_targets: box center outside grid");
    const double sigma = std::max(1.0, std::min(b.l, b.w) / (3.0 * grid.cell_size));
    const int64_t radius = static_cast<int64_t>(std::ceil(3.0 * sigma));
    for (int64_t dr = -radius; dr <= radius; ++dr) {
      for (int64_t dc = -radius; dc <= radius; ++dc) {
        const int64_t r = crow + dr, c = ccol + dc;
        if (!grid.contains(r, c)) continue;
        const double d2 = static_cast<double>(dr * dr + dc * dc);
        const float v = static_cast<float>(std::exp(-d2 / (2.0 * sigma * sigma)));
        float& slot = data[static_cast<size_t>((r * grid.w + c) * num_classes + b.class_id)];
        slot = std::max(slot, v);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// scene files

namespace {

constexpr char kSceneMagic[4] = {'L', 'G', 'S', 'C'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("scene file: truncated");
  return v;
}

}  // namespace

void save_scene(const std::string& path, const Scene& scene) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_scene: cannot open " + path);
  os.write(kSceneMagic, 4);
  write_pod<uint32_t>(os, 1);  // version
  write_pod<double>(os, scene.grid.origin_x);
  write_pod<double>(os, scene.grid.origin_y);
  write_pod<double>(os, scene.grid.cell_size);
  write_pod<uint32_t>(os, static_cast<uint32_t>(scene.grid.h));
  write_pod<uint32_t>(os, static_cast<uint32_t>(scene.grid.w));
  write_pod<double>(os, scene.grid.z_min);
  write_pod<double>(os, scene.grid.z_max);
  write_pod<uint64_t>(os, scene.seed);
  write_pod<uint32_t>(os, static_cast<uint32_t>(scene.cloud.points.size()));
  write_pod<uint32_t>(os, static_cast<uint32_t>(scene.boxes.size()));
  for (const PointCloud::Point& p : scene.cloud.points) {
    write_pod<float>(os, p.x);
    write_pod<float>(os, p.y);
    write_pod<float>(os, p.z);
    write_pod<float>(os, p.intensity);
  }
  for (const Box3D& b : scene.boxes) {
    write_pod<float>(os, static_cast<float>(b.cx));
    write_pod<float>(os, static_cast<float>(b.cy));
    write_pod<float>(os, static_cast<float>(b.cz));
    write_pod<float>(os, static_cast<float>(b.l));
    write_pod<float>(os, static_cast<float>(b.w));
    write_pod<float>(os, static_cast<float>(b.h));
    write_pod<float>(os, static_cast<float>(b.yaw));
    write_pod<uint32_t>(os, static_cast<uint32_t>(b.class_id));
    write_pod<float>(os, static_cast<float>(b.score));
  }
  if (!os) throw std::runtime_error("save_scene: write failed for " + path);
}

Scene load_scene(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_scene: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kSceneMagic, 4) != 0)
    throw std::runtime_error("load_scene: bad magic in " + path);
  const uint32_t version = read_pod<uint32_t>(is);
  if (version != 1) throw std::runtime_error("load_scene: unsupported version");
  Scene scene;
  scene.grid.origin_x = read_pod<double>(is);
  scene.grid.origin_y = read_pod<double>(is);
  scene.grid.cell_size = read_pod<double>(is);
  scene.grid.h = read_pod<uint32_t>(is);
  scene.grid.w = read_pod<uint32_t>(is);
  scene.grid.z_min = read_pod<double>(is);
  scene.grid.z_max = read_pod<double>(is);
  scene.seed = read_pod<uint64_t>(is);
  const uint32_t n_points = read_pod<uint32_t>(is);
  const uint32_t n_boxes = read_pod<uint32_t>(is);
  scene.cloud.points.resize(n_points);
  for (PointCloud::Point& p : scene.cloud.points) {
    p.x = read_pod<float>(is);
    p.y = read_pod<float>(is);
    p.z = read_pod<float>(is);
    p.intensity = read_pod<float>(is);
  }
  scene.boxes.resize(n_boxes);
  for (Box3D& b : scene.boxes) {
    b.cx = read_pod<float>(is);
    b.cy = read_pod<float>(is);
    b.cz = read_pod<float>(is);
    b.l = read_pod<float>(is);
    b.w = read_pod<float>(is);
    b.h = read_pod<float>(is);
    b.yaw = read_pod<float>(is);
    b.class_id = static_cast<int>(read_pod<uint32_t>(is));
    b.score = read_pod<float>(is);
  }
  return scene;
}

}  // namespace lgedet
