#include "lgedet/gradsuite.hpp"

#include "lgedet/attention.hpp"
#include "lgedet/lge.hpp"
#include "lgedet/loss.hpp"
#include "lgedet/random.hpp"
#include "lgedet/tensor.hpp"

namespace lgedet {

namespace {

constexpr double kTolerance = 1e-6;
constexpr double kComposedTolerance = 1e-5;

// Asymmetric readout so every output element sees a distinct weight; a plain
// sum would hide transposition mistakes in the backward passes.
Tensor weighted_sum(const Tensor& y, Rng& rng) {
  Tensor w = Tensor::randn(y.shape(), rng, 1.0, DType::F64, false);
  return sum(mul(y, w));
}

}  // namespace

std::vector<GradCheckCase> run_gradient_suite() {
  std::vector<GradCheckCase> cases;
  const DType dt = DType::F64;

  {
    Rng rng(11);
    Tensor a = Tensor::randn({3, 4}, rng, 1.0, dt);
    Tensor b = Tensor::randn({4, 2}, rng, 1.0, dt);
    cases.push_back({"matmul_lhs",
                     grad_check([&](const Tensor& x) { Rng r(12); return weighted_sum(matmul(x, b), r); }, a),
                     kTolerance});
    cases.push_back({"matmul_rhs",
                     grad_check([&](const Tensor& x) { Rng r(13); return weighted_sum(matmul(a, x), r); }, b),
                     kTolerance});
  }
  {
    Rng rng(21);
    Tensor input = Tensor::randn({5, 6, 3}, rng, 1.0, dt);
    Tensor kernel = Tensor::randn({3, 3, 3, 4}, rng, 0.5, dt);
    cases.push_back({"conv2d_input",
                     grad_check([&](const Tensor& x) { Rng r(22); return weighted_sum(conv2d(x, kernel, 1, 1), r); },
                                input),
                     kTolerance});
    cases.push_back({"conv2d_kernel",
                     grad_check([&](const Tensor& x) { Rng r(23); return weighted_sum(conv2d(input, x, 1, 1), r); },
                                kernel),
                     kTolerance});
    Tensor dw = Tensor::randn({3, 3, 1, 3}, rng, 0.5, dt);
    cases.push_back({"conv2d_depthwise",
                     grad_check([&](const Tensor& x) { Rng r(24); return weighted_sum(conv2d(input, x, 2, 1, 3), r); },
                                dw),
                     kTolerance});
  }
  {
    Rng rng(31);
    Tensor x = Tensor::randn({4, 7}, rng, 1.0, dt);
    cases.push_back({"softmax",
                     grad_check([&](const Tensor& t) { Rng r(32); return weighted_sum(softmax_lastdim(t), r); }, x),
                     kTolerance});
  }
  {
    Rng rng(41);
    AttentionParams p = make_attention_params(8, 2, rng, dt);
    Tensor x = Tensor::randn({6, 8}, rng, 1.0, dt);
    cases.push_back({"attention",
                     grad_check(
                         [&](const Tensor& t) {
                           Rng r(42);
                           return weighted_sum(multi_head_self_attention(t, p), r);
                         },
                         x),
                     kTolerance});
    cases.push_back({"ffn",
                     grad_check([&](const Tensor& t) { Rng r(43); return weighted_sum(feed_forward(t, p), r); }, x),
                     kTolerance});
  }
  {
    Rng rng(51);
    // Pre-sigmoid logits around 0 keep the focal loss away from saturation.
    Tensor logits = Tensor::randn({4, 4, 2}, rng, 0.7, dt);
    Tensor target = Tensor::zeros({4, 4, 2}, dt);
    for (int64_t i = 0; i < target.numel(); ++i) {
      const double u = rng.uniform();
      target.set_value_at(i, u > 0.8 ? 1.0 : 0.6 * u);
    }
    cases.push_back({"focal_loss",
                     grad_check(
                         [&](const Tensor& t) {
                           Heatmap h;
                           h.scores = sigmoid(t);
                           return focal_loss(h, target);
                         },
                         logits),
                     kTolerance});
  }
  {
    Rng rng(61);
    LgeIterationParams p = make_lge_iteration_params(LgeVariant::G, 8, 2, rng, dt);
    Tensor x = Tensor::randn({4, 4, 8}, rng, 1.0, dt);
    cases.push_back({"lge_variant_g",
                     grad_check(
                         [&](const Tensor& t) {
                           Rng r(62);
                           return weighted_sum(lge_iteration(t, p, LgeVariant::G), r);
                         },
                         x),
                     kComposedTolerance});
  }
  return cases;
}

}  // namespace lgedet
