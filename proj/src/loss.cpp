#include "lgedet/loss.hpp"

#include <cmath>
#include <stdexcept>

namespace lgedet {

Tensor focal_loss(const Heatmap& pred, const Tensor& target) {
  const Tensor& p = pred.scores;
  if (!p.defined() || !target.defined() || p.shape() != target.shape())
    throw std::invalid_argument("focal_loss: prediction and target shapes must match");

  // Constant weight grids; only cells with target exactly 1 count as positive.
  const std::vector<double> t = target.values();
  Tensor wpos = Tensor::zeros(p.shape(), p.dtype());
  Tensor wneg = Tensor::zeros(p.shape(), p.dtype());
  int64_t npos = 0;
  for (size_t i = 0; i < t.size(); ++i) {
    if (t[i] == 1.0) {
      wpos.set_value_at(static_cast<int64_t>(i), 1.0);
      ++npos;
    } else {
      const double u = 1.0 - t[i];
      wneg.set_value_at(static_cast<int64_t>(i), u * u * u * u);
    }
  }

  const Tensor ones = Tensor::full(p.shape(), 1.0, p.dtype());
  const Tensor one_minus_p = sub(ones, p);
  const Tensor pos_term = mul(mul(wpos, square(one_minus_p)), log_floored(p));
  const Tensor neg_term = mul(mul(wneg, square(p)), log_floored(one_minus_p));
  const Tensor total = sum(add(pos_term, neg_term));
  return mul_scalar(total, -1.0 / static_cast<double>(std::max<int64_t>(1, npos)));
}

std::array<double, 8> make_regression_target(const Box3D& box, const GridSpec& grid, int64_t row,
                                             int64_t col) {
  if (box.l <= 0.0 || box.w <= 0.0 || box.h <= 0.0)
    throw std::invalid_argument("make_regression_target: box extents must be positive");
  std::array<double, 8> t;
  t[0] = (box.cx - grid.origin_x) / grid.cell_size - static_cast<double>(col);
  t[1] = (box.cy - grid.origin_y) / grid.cell_size - static_cast<double>(row);
  t[2] = box.cz;
  t[3] = std::log(box.l);
  t[4] = std::log(box.w);
  t[5] = std::log(box.h);
  t[6] = std::sin(box.yaw);
  t[7] = std::cos(box.yaw);
  return t;
}

Tensor box_loss(const std::vector<Tensor>& preds,
                const std::vector<std::array<double, 8>>& targets) {
  if (preds.size() != targets.size())
    throw std::invalid_argument("box_loss: one target row per prediction required");
  if (preds.empty()) return Tensor::zeros({1}, DType::F32);

  Tensor acc;
  for (size_t i = 0; i < preds.size(); ++i) {
    const Tensor& pr = preds[i];
    if (!pr.defined() || pr.rank() != 2 || pr.extent(0) != 1 || pr.extent(1) != 8)
      throw std::invalid_argument("box_loss: predictions must be [1,8] rows");
    Tensor tgt = Tensor::zeros({1, 8}, pr.dtype());
    for (int64_t j = 0; j < 8; ++j) tgt.set_value_at(j, targets[i][static_cast<size_t>(j)]);
    const Tensor term = sum(abs_val(sub(pr, tgt)));
    acc = acc.defined() ? add(acc, term) : term;
  }
  return mul_scalar(acc, 1.0 / static_cast<double>(preds.size()));
}

}  // namespace lgedet
