#include "lgedet/head.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace lgedet {

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

StageMask StageMask::ones(int64_t h, int64_t w) {
  StageMask m;
  m.h = h;
  m.w = w;
  m.bits.assign(static_cast<size_t>(h * w), 1);
  return m;
}

int64_t StageMask::count_ones() const {
  int64_t n = 0;
  for (uint8_t b : bits) n += b;
  return n;
}

HeadParams make_head_params(int64_t channels, int num_classes, Rng& rng, DType dt) {
  check(num_classes >= 1, "make_head_params: num_classes must be >= 1");
  HeadParams p;
  p.conv1 = Tensor::randn({3, 3, channels, channels}, rng, std::sqrt(2.0 / (9.0 * channels)), dt,
                          true);
  // Zero final conv: initial scores are exactly sigmoid(0) = 0.5.
  p.conv2 = Tensor::zeros({1, 1, channels, num_classes}, dt, true);
  return p;
}

DecodeParams make_decode_params(int64_t channels, int num_classes, int radius, Rng& rng,
                                DType dt) {
  check(radius >= 0, "make_decode_params: radius must be >= 0");
  check(num_classes >= 1, "make_decode_params: num_classes must be >= 1");
  DecodeParams p;
  p.radius = radius;
  p.num_heads = 1;
  const double proj_std = std::sqrt(1.0 / static_cast<double>(channels));
  p.wq = Tensor::randn({channels, channels}, rng, proj_std, dt, true);
  p.wk = Tensor::randn({channels, channels}, rng, proj_std, dt, true);
  p.wv = Tensor::randn({channels, channels}, rng, proj_std, dt, true);
  p.wo = Tensor::randn({channels, channels}, rng, proj_std, dt, true);
  // Zero readouts: an untrained decoder emits centered boxes of unit size.
  p.reg_w = Tensor::zeros({channels, 8}, dt, true);
  p.reg_b = Tensor::zeros({1, 8}, dt, true);
  p.cls_w = Tensor::zeros({channels, num_classes}, dt, true);
  p.cls_b = Tensor::zeros({1, num_classes}, dt, true);
  return p;
}

Heatmap heatmap_head(const Tensor& f, const HeadParams& p) {
  check(f.defined() && f.rank() == 3, "heatmap_head: input must be [H,W,C]");
  Heatmap h;
  h.scores = sigmoid(conv2d(relu(conv2d(f, p.conv1, 1, 1)), p.conv2));
  return h;
}

MaskedTopkResult masked_topk(const Heatmap& h, const StageMask& m, int64_t k, int64_t mask_k) {
  check(h.scores.defined() && h.scores.rank() == 3, "masked_topk: heatmap must be [H,W,c]");
  check(h.h() == m.h && h.w() == m.w, "masked_topk: heatmap and mask disagree on extents");
  check(k >= 0, "masked_topk: k must be >= 0");
  if (mask_k < 0) mask_k = k;
  const int64_t rows = h.h(), cols = h.w(), classes = h.classes();

  struct Candidate {
    double score;
    int64_t row, col;
    int cls;
  };
  std::vector<Candidate> cands;
  cands.reserve(static_cast<size_t>(m.count_ones()));
  const std::vector<double> vals = h.scores.values();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < cols; ++c) {
      if (!m.at(r, c)) continue;
      const double* cell = vals.data() + (r * cols + c) * classes;
      int best = 0;
      for (int cl = 1; cl < classes; ++cl)
        if (cell[cl] > cell[best]) best = cl;
      cands.push_back({cell[best], r, c, best});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.row != b.row) return a.row < b.row;
    if (a.col != b.col) return a.col < b.col;
    return a.cls < b.cls;
  });

  MaskedTopkResult out;
  out.capped = k > static_cast<int64_t>(cands.size());
  const int64_t take = std::min<int64_t>(k, static_cast<int64_t>(cands.size()));
  out.next_mask = m;
  for (int64_t i = 0; i < take; ++i) {
    const Candidate& c = cands[static_cast<size_t>(i)];
    Query q;
    q.row = c.row;
    q.col = c.col;
    q.class_id = c.cls;
    q.score = c.score;
    q.stage = m.stage_index;
    out.queries.push_back(std::move(q));
    if (i < mask_k) out.next_mask.bits[static_cast<size_t>(c.row * cols + c.col)] = 0;
  }
  return out;
}

StageMask box_pool_mask(const StageMask& m, int kernel) {
  check(kernel >= 1 && kernel % 2 == 1, "box_pool_mask: kernel must be odd and >= 1");
  if (kernel == 1) return m;
  const int r = kernel / 2;
  StageMask out = m;
  for (int64_t row = 0; row < m.h; ++row) {
    for (int64_t col = 0; col < m.w; ++col) {
      uint8_t v = 1;
      for (int64_t dr = -r; dr <= r && v; ++dr) {
        const int64_t rr = row + dr;
        if (rr < 0 || rr >= m.h) continue;
        for (int64_t dc = -r; dc <= r; ++dc) {
          const int64_t cc = col + dc;
          if (cc < 0 || cc >= m.w) continue;
          if (m.bits[static_cast<size_t>(rr * m.w + cc)] == 0) {
            v = 0;
            break;
          }
        }
      }
      out.bits[static_cast<size_t>(row * m.w + col)] = v;
    }
  }
  return out;
}

Tensor stage_targets(const Tensor& gt, const StageMask& m) {
  check(gt.defined() && gt.rank() == 3, "stage_targets: target grid must be [H,W,c]");
  check(gt.extent(0) == m.h && gt.extent(1) == m.w,
        "stage_targets: target grid and mask disagree on extents");
  Tensor out = gt.detached_copy();
  const int64_t classes = gt.extent(2);
  // Direct zero assignment keeps suppression bit-exact.
  if (out.dtype() == DType::F32) {
    auto d = out.f32();
    for (int64_t cell = 0; cell < m.h * m.w; ++cell)
      if (m.bits[static_cast<size_t>(cell)] == 0)
        for (int64_t c = 0; c < classes; ++c) d[static_cast<size_t>(cell * classes + c)] = 0.0f;
  } else {
    auto d = out.f64();
    for (int64_t cell = 0; cell < m.h * m.w; ++cell)
      if (m.bits[static_cast<size_t>(cell)] == 0)
        for (int64_t c = 0; c < classes; ++c) d[static_cast<size_t>(cell * classes + c)] = 0.0;
  }
  return out;
}

namespace {

// Shared cross-attention readout: the query cell token attends over its
// clamped (2r+1)^2 window, with a residual connection.
Tensor attended_feature(int64_t row, int64_t col, const Tensor& f, const DecodeParams& p) {
  check(f.defined() && f.rank() == 3, "decode: feature map must be [H,W,C]");
  const int64_t h = f.extent(0), w = f.extent(1), c = f.extent(2);
  check(row >= 0 && row < h && col >= 0 && col < w, "decode: query cell outside grid");
  check(p.num_heads >= 1 && c % p.num_heads == 0, "decode: invalid head count");
  const int64_t r0 = std::max<int64_t>(0, row - p.radius);
  const int64_t r1 = std::min<int64_t>(h, row + p.radius + 1);
  const int64_t c0 = std::max<int64_t>(0, col - p.radius);
  const int64_t c1 = std::min<int64_t>(w, col + p.radius + 1);
  const Tensor q_tok = reshape(narrow(narrow(f, 0, row, 1), 1, col, 1), {1, c});
  const Tensor window =
      reshape(narrow(narrow(f, 0, r0, r1 - r0), 1, c0, c1 - c0), {(r1 - r0) * (c1 - c0), c});
  const Tensor q = matmul(q_tok, p.wq);
  const Tensor k = matmul(window, p.wk);
  const Tensor v = matmul(window, p.wv);
  const int64_t d = c / p.num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<Tensor> heads;
  for (int hix = 0; hix < p.num_heads; ++hix) {
    const int64_t off = hix * d;
    const Tensor qh = narrow(q, 1, off, d);
    const Tensor kh = narrow(k, 1, off, d);
    const Tensor vh = narrow(v, 1, off, d);
    const Tensor weights = softmax_lastdim(mul_scalar(matmul(qh, transpose2d(kh)), scale));
    heads.push_back(matmul(weights, vh));
  }
  const Tensor merged = p.num_heads == 1 ? heads.front() : concat(heads, 1);
  return add(q_tok, matmul(merged, p.wo));
}

}  // namespace

Tensor decode_regression(int64_t row, int64_t col, const Tensor& f, const DecodeParams& p) {
  const Tensor z = attended_feature(row, col, f, p);
  return add(matmul(z, p.reg_w), p.reg_b);
}

Tensor decode_class_logits(int64_t row, int64_t col, const Tensor& f, const DecodeParams& p) {
  const Tensor z = attended_feature(row, col, f, p);
  return add(matmul(z, p.cls_w), p.cls_b);
}

Box3D decode_query(const Query& q, const Tensor& f, const GridSpec& grid, const DecodeParams& p) {
  check(grid.contains(q.row, q.col), "decode_query: query outside grid");
  const Tensor reg = decode_regression(q.row, q.col, f, p);
  const Tensor logits = decode_class_logits(q.row, q.col, f, p);
  const std::vector<double> r = reg.values();
  Box3D b;
  b.cx = grid.origin_x + (static_cast<double>(q.col) + r[0]) * grid.cell_size;
  b.cy = grid.origin_y + (static_cast<double>(q.row) + r[1]) * grid.cell_size;
  b.cz = r[2];
  b.l = std::exp(r[3]);
  b.w = std::exp(r[4]);
  b.h = std::exp(r[5]);
  b.yaw = wrap_angle(std::atan2(r[6], r[7]));
  b.class_id = q.class_id;
  // Multiplicative refinement keeps heatmap ranking intact when the
  // classifier is untrained (sigmoid(0) scales every score by 0.5).
  const double logit = logits.value_at(q.class_id);
  b.score = q.score * (1.0 / (1.0 + std::exp(-logit)));
  return b;
}

std::vector<Box3D> decode_queries(const std::vector<Query>& queries, const Tensor& f,
                                  const GridSpec& grid, const DecodeParams& p) {
  std::vector<Box3D> out;
  out.reserve(queries.size());
  for (const Query& q : queries) out.push_back(decode_query(q, f, grid, p));
  return out;
}

StageMode stage_mode_from_string(const std::string& s) {
  if (s == "parallel") return StageMode::Parallel;
  if (s == "cascaded") return StageMode::Cascaded;
  throw std::invalid_argument("stage mode must be 'parallel' or 'cascaded', got '" + s + "'");
}

const char* stage_mode_name(StageMode m) {
  return m == StageMode::Parallel ? "parallel" : "cascaded";
}

namespace {

Tensor cell_feature(const Tensor& f, int64_t row, int64_t col) {
  const int64_t c = f.extent(2);
  Tensor out = Tensor::zeros({c}, f.dtype());
  const int64_t base = (row * f.extent(1) + col) * c;
  for (int64_t i = 0; i < c; ++i) out.set_value_at(i, f.value_at(base + i));
  return out;
}

}  // namespace

SelectionStep advance_selection(const Heatmap& heatmap, const StageMask& mask, int64_t take,
                                int64_t mask_take, int pool_kernel) {
  const int64_t h = heatmap.h(), w = heatmap.w();
  MaskedTopkResult sel = masked_topk(heatmap, mask, take, mask_take);

  // Erosion seeded only by the newly claimed cells; combined with the running
  // mask so suppression never compounds over old zeros.
  StageMask new_zeros = StageMask::ones(h, w);
  for (int64_t cell = 0; cell < h * w; ++cell)
    if (mask.bits[static_cast<size_t>(cell)] != 0 &&
        sel.next_mask.bits[static_cast<size_t>(cell)] == 0)
      new_zeros.bits[static_cast<size_t>(cell)] = 0;
  const StageMask pooled = box_pool_mask(new_zeros, pool_kernel);

  SelectionStep step;
  step.queries = std::move(sel.queries);
  step.next_mask = std::move(sel.next_mask);
  step.next_mask.stage_index = mask.stage_index + 1;
  for (int64_t cell = 0; cell < h * w; ++cell)
    step.next_mask.bits[static_cast<size_t>(cell)] =
        step.next_mask.bits[static_cast<size_t>(cell)] & pooled.bits[static_cast<size_t>(cell)];
  return step;
}

MultistageResult run_multistage(const Tensor& f0, const std::vector<StageParams>& stages,
                                const std::vector<LgeVariant>& variants, int64_t n,
                                StageMode mode, int pool_kernel, int64_t mask_n) {
  check(!stages.empty(), "run_multistage: at least one stage required");
  check(variants.size() == stages.size(), "run_multistage: one variant per stage required");
  check(n >= 1, "run_multistage: n must be >= 1");
  check(f0.defined() && f0.rank() == 3, "run_multistage: f0 must be [H,W,C]");
  const int64_t h = f0.extent(0), w = f0.extent(1);
  const int64_t k = static_cast<int64_t>(stages.size());
  check(k * n <= h * w, "run_multistage: K*N exceeds the grid's maskable cells");
  if (mask_n < 0) mask_n = n;

  MultistageResult result;
  StageMask mask = StageMask::ones(h, w);
  Tensor current = f0;
  for (int64_t i = 0; i < k; ++i) {
    const StageParams& sp = stages[static_cast<size_t>(i)];
    const Tensor input = mode == StageMode::Parallel ? f0 : current;
    StageOutput so;
    so.enhanced = lge_forward(input, sp.lge, variants[static_cast<size_t>(i)]);
    so.heatmap = heatmap_head(so.enhanced, sp.head);
    so.mask_before = mask;
    SelectionStep step = advance_selection(so.heatmap, mask, n, mask_n, pool_kernel);
    for (Query& q : step.queries) q.feature = cell_feature(so.enhanced, q.row, q.col);
    so.queries = std::move(step.queries);
    mask = std::move(step.next_mask);

    current = so.enhanced;
    result.stages.push_back(std::move(so));
  }
  result.final_mask = mask;
  for (const StageOutput& so : result.stages)
    for (const Query& q : so.queries) result.all_queries.push_back(q);
  return result;
}

std::string queries_to_csv(const std::vector<Query>& queries) {
  std::ostringstream os;
  os << "stage,row,col,class,score\n";
  for (const Query& q : queries) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", q.score);
    os << q.stage << "," << q.row << "," << q.col << "," << q.class_id << "," << buf << "\n";
  }
  return os.str();
}

}  // namespace lgedet
