#pragma once

#include <cstdint>
#include <vector>

namespace lgedet {

// BEV grid. `origin` is the metric center of cell (0,0); cell (row, col) is
// centered at (origin_x + col*cell_size, origin_y + row*cell_size). Rows
// index y, columns index x. H and W must be even (wavelet requirement).
struct GridSpec {
  double origin_x = -18.9;
  double origin_y = -18.9;
  double cell_size = 0.6;
  int64_t h = 64;
  int64_t w = 64;
  double z_min = -1.0;
  double z_max = 3.0;

  bool valid() const { return cell_size > 0 && h > 0 && w > 0 && h % 2 == 0 && w % 2 == 0; }
  double cell_center_x(int64_t col) const { return origin_x + static_cast<double>(col) * cell_size; }
  double cell_center_y(int64_t row) const { return origin_y + static_cast<double>(row) * cell_size; }
  // Nearest cell; may be out of range, callers bound-check with contains().
  int64_t col_of(double x) const;
  int64_t row_of(double y) const;
  bool contains(int64_t row, int64_t col) const { return row >= 0 && row < h && col >= 0 && col < w; }
  double min_x() const { return origin_x - 0.5 * cell_size; }
  double min_y() const { return origin_y - 0.5 * cell_size; }
  double max_x() const { return origin_x + (static_cast<double>(w) - 0.5) * cell_size; }
  double max_y() const { return origin_y + (static_cast<double>(h) - 0.5) * cell_size; }
};

struct Box3D {
  double cx = 0, cy = 0, cz = 0;  // center, meters
  double l = 1, w = 1, h = 1;     // size, meters, strictly positive
  double yaw = 0;                 // radians, in [-pi, pi)
  int class_id = 0;
  double score = 1.0;
};

// Wraps an angle into [-pi, pi).
double wrap_angle(double yaw);

struct PointCloud {
  struct Point {
    float x, y, z, intensity;
  };
  std::vector<Point> points;
};

}  // namespace lgedet
