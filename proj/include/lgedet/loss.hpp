#pragma once

#include <array>
#include <vector>

#include "lgedet/geometry.hpp"
#include "lgedet/head.hpp"
#include "lgedet/tensor.hpp"

namespace lgedet {

// Penalty-reduced focal loss over a dense score grid.
//
// Cells whose target is exactly 1 are positives; everything else is a
// soft negative weighted by (1 - t)^4. The total is normalized by
// max(1, number of positives), so a single positive predicted at 0.5
// yields 0.25 * ln 2 ~= 0.1733.
Tensor focal_loss(const Heatmap& pred, const Tensor& target);

// Regression target layout: (dx, dy, z, log l, log w, log h, sin yaw, cos yaw).
// dx/dy are the box center's offset from the cell center in cell units,
// in [-0.5, 0.5) when (row, col) is the center cell.
std::array<double, 8> make_regression_target(const Box3D& box, const GridSpec& grid, int64_t row,
                                             int64_t col);

// Mean over boxes of the summed absolute error across all 8 components.
// Predictions are [1,8] rows from the decode head. Empty input gives 0.
Tensor box_loss(const std::vector<Tensor>& preds,
                const std::vector<std::array<double, 8>>& targets);

}  // namespace lgedet
