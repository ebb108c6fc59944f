#include "lgedet/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace lgedet {

namespace {

thread_local Tape* g_active_tape = nullptr;

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

std::string shape_str(const std::vector<int64_t>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t e : shape) {
    check(e > 0, "tensor extents must be positive, got " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::shared_ptr<detail::TensorImpl> make_impl(std::vector<int64_t> shape, DType dt) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->numel = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->dtype = dt;
  if (dt == DType::F32) {
    impl->data32.assign(static_cast<size_t>(impl->numel), 0.0f);
  } else {
    impl->data64.assign(static_cast<size_t>(impl->numel), 0.0);
  }
  return impl;
}

void check_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor operand");
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  check(a.dtype() == b.dtype(), std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) +
                                    " vs " + dtype_name(b.dtype()) + ")");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

template <typename Fn>
void for_dtype(DType dt, Fn&& fn) {
  if (dt == DType::F32) {
    fn.template operator()<float>();
  } else {
    fn.template operator()<double>();
  }
}

// exp(x) for the f32 softmax/sigmoid paths. Round-to-nearest split
// x = n*ln2 + r, degree-6 polynomial on r in [-ln2/2, ln2/2], scale by 2^n
// through the exponent bits. Max relative error is about 1 ulp; branch-free
// so the surrounding loops vectorize.
inline float fast_expf(float x) {
  x = x < -87.0f ? -87.0f : (x > 88.0f ? 88.0f : x);
  const float t = x * 1.442695040888963f;
  const float big = 12582912.0f;  // 1.5 * 2^23 forces round-to-nearest
  const float nf = (t + big) - big;
  const int n = static_cast<int>(nf);
  float r = x - nf * 0.693359375f;
  r -= nf * -2.12194440e-4f;
  float p = 1.0f / 720.0f;
  p = p * r + 1.0f / 120.0f;
  p = p * r + 1.0f / 24.0f;
  p = p * r + 1.0f / 6.0f;
  p = p * r + 0.5f;
  p = p * r + 1.0f;
  p = p * r + 1.0f;
  const uint32_t bits = static_cast<uint32_t>(n + 127) << 23;
  return p * std::bit_cast<float>(bits);
}

inline float exp_of(float x) { return fast_expf(x); }
inline double exp_of(double x) { return std::exp(x); }

#if defined(__AVX512F__)
// fast_expf, 16 lanes at a time; the compiler declines to auto-vectorize the
// scalar form, and softmax rows are the hottest loop in the attention path.
inline __m512 fast_expf_vec(__m512 x) {
  x = _mm512_min_ps(_mm512_max_ps(x, _mm512_set1_ps(-87.0f)), _mm512_set1_ps(88.0f));
  const __m512 big = _mm512_set1_ps(12582912.0f);
  const __m512 t = _mm512_mul_ps(x, _mm512_set1_ps(1.442695040888963f));
  const __m512 nf = _mm512_sub_ps(_mm512_add_ps(t, big), big);
  const __m512i n = _mm512_cvtps_epi32(nf);
  __m512 r = _mm512_fnmadd_ps(nf, _mm512_set1_ps(0.693359375f), x);
  r = _mm512_fnmadd_ps(nf, _mm512_set1_ps(-2.12194440e-4f), r);
  __m512 p = _mm512_set1_ps(1.0f / 720.0f);
  p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.0f / 120.0f));
  p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.0f / 24.0f));
  p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.0f / 6.0f));
  p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(0.5f));
  p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.0f));
  p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.0f));
  const __m512i bits = _mm512_slli_epi32(_mm512_add_epi32(n, _mm512_set1_epi32(127)), 23);
  return _mm512_mul_ps(p, _mm512_castsi512_ps(bits));
}

inline void exp_span(float* dst, const float* src, int64_t n) {
  int64_t i = 0;
  for (; i + 16 <= n; i += 16)
    _mm512_storeu_ps(dst + i, fast_expf_vec(_mm512_loadu_ps(src + i)));
  for (; i < n; ++i) dst[i] = fast_expf(src[i]);
}
#else
inline void exp_span(float* dst, const float* src, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dst[i] = fast_expf(src[i]);
}
#endif

inline void exp_span(double* dst, const double* src, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dst[i] = std::exp(src[i]);
}

// Reductions below run over 16 fixed partial lanes: the order is still
// deterministic, but the loops vectorize without reassociation flags.
template <typename T>
T sum_span(const T* x, int64_t n) {
  T lanes[16] = {};
  int64_t i = 0;
  for (; i + 16 <= n; i += 16)
    for (int l = 0; l < 16; ++l) lanes[l] += x[i + l];
  T s = 0;
  for (int l = 0; l < 16; ++l) s += lanes[l];
  for (; i < n; ++i) s += x[i];
  return s;
}

template <typename T>
T dot_span(const T* x, const T* y, int64_t n) {
  T lanes[16] = {};
  int64_t i = 0;
  for (; i + 16 <= n; i += 16)
    for (int l = 0; l < 16; ++l) lanes[l] += x[i + l] * y[i + l];
  T s = 0;
  for (int l = 0; l < 16; ++l) s += lanes[l];
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

template <typename T>
T max_span(const T* x, int64_t n) {
  if (n >= 16) {
    T lanes[16];
    for (int l = 0; l < 16; ++l) lanes[l] = x[l];
    int64_t i = 16;
    for (; i + 16 <= n; i += 16)
      for (int l = 0; l < 16; ++l) lanes[l] = std::max(lanes[l], x[i + l]);
    T m = lanes[0];
    for (int l = 1; l < 16; ++l) m = std::max(m, lanes[l]);
    for (; i < n; ++i) m = std::max(m, x[i]);
    return m;
  }
  T m = x[0];
  for (int64_t i = 1; i < n; ++i) m = std::max(m, x[i]);
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::wrap(std::shared_ptr<detail::TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

Tensor Tensor::zeros(std::vector<int64_t> shape, DType dt, bool requires_grad) {
  auto impl = make_impl(std::move(shape), dt);
  impl->requires_grad = requires_grad;
  impl->needs_grad = requires_grad;
  return wrap(std::move(impl));
}

Tensor Tensor::full(std::vector<int64_t> shape, double value, DType dt, bool requires_grad) {
  Tensor t = zeros(std::move(shape), dt, requires_grad);
  for_dtype(dt, [&]<typename T>() {
    auto d = detail::data_of<T>(t.impl());
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::from_values(std::vector<int64_t> shape, const std::vector<double>& values,
                           DType dt, bool requires_grad) {
  Tensor t = zeros(std::move(shape), dt, requires_grad);
  check(static_cast<int64_t>(values.size()) == t.numel(),
        "from_values: value count does not match shape");
  for_dtype(dt, [&]<typename T>() {
    auto d = detail::data_of<T>(t.impl());
    for (size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::randn(std::vector<int64_t> shape, Rng& rng, double stddev, DType dt,
                     bool requires_grad) {
  Tensor t = zeros(std::move(shape), dt, requires_grad);
  for_dtype(dt, [&]<typename T>() {
    auto d = detail::data_of<T>(t.impl());
    for (auto& v : d) v = static_cast<T>(rng.normal() * stddev);
  });
  return t;
}

int64_t Tensor::extent(int axis) const {
  check(impl_ != nullptr, "extent: undefined tensor");
  check(axis >= 0 && axis < rank(), "extent: axis out of range");
  return impl_->shape[static_cast<size_t>(axis)];
}

double Tensor::value_at(int64_t flat) const {
  check(impl_ && flat >= 0 && flat < numel(), "value_at: index out of range");
  return impl_->dtype == DType::F32 ? static_cast<double>(impl_->data32[static_cast<size_t>(flat)])
                                    : impl_->data64[static_cast<size_t>(flat)];
}

void Tensor::set_value_at(int64_t flat, double v) {
  check(impl_ && flat >= 0 && flat < numel(), "set_value_at: index out of range");
  if (impl_->dtype == DType::F32) {
    impl_->data32[static_cast<size_t>(flat)] = static_cast<float>(v);
  } else {
    impl_->data64[static_cast<size_t>(flat)] = v;
  }
}

std::vector<double> Tensor::values() const {
  std::vector<double> out(static_cast<size_t>(numel()));
  for_dtype(dtype(), [&]<typename T>() {
    auto d = detail::data_of<T>(impl());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(d[i]);
  });
  return out;
}

double Tensor::grad_at(int64_t flat) const {
  check(impl_ && flat >= 0 && flat < numel(), "grad_at: index out of range");
  if (!has_grad()) return 0.0;
  return impl_->dtype == DType::F32 ? static_cast<double>(impl_->grad32[static_cast<size_t>(flat)])
                                    : impl_->grad64[static_cast<size_t>(flat)];
}

std::vector<double> Tensor::grad_values() const {
  std::vector<double> out(static_cast<size_t>(numel()), 0.0);
  if (!has_grad()) return out;
  for_dtype(dtype(), [&]<typename T>() {
    auto g = detail::grad_of<T>(impl());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(g[i]);
  });
  return out;
}

double Tensor::item() const {
  check(impl_ && numel() == 1, "item: tensor is not a scalar");
  return value_at(0);
}

std::span<float> Tensor::f32() {
  check(impl_ && impl_->dtype == DType::F32, "f32: dtype mismatch");
  return {impl_->data32.data(), impl_->data32.size()};
}
std::span<const float> Tensor::f32() const {
  check(impl_ && impl_->dtype == DType::F32, "f32: dtype mismatch");
  return {impl_->data32.data(), impl_->data32.size()};
}
std::span<double> Tensor::f64() {
  check(impl_ && impl_->dtype == DType::F64, "f64: dtype mismatch");
  return {impl_->data64.data(), impl_->data64.size()};
}
std::span<const double> Tensor::f64() const {
  check(impl_ && impl_->dtype == DType::F64, "f64: dtype mismatch");
  return {impl_->data64.data(), impl_->data64.size()};
}
std::span<float> Tensor::grad_f32() {
  ensure_grad();
  check(impl_->dtype == DType::F32, "grad_f32: dtype mismatch");
  return {impl_->grad32.data(), impl_->grad32.size()};
}
std::span<double> Tensor::grad_f64() {
  ensure_grad();
  check(impl_->dtype == DType::F64, "grad_f64: dtype mismatch");
  return {impl_->grad64.data(), impl_->grad64.size()};
}

bool Tensor::has_grad() const {
  if (!impl_) return false;
  return impl_->dtype == DType::F32 ? !impl_->grad32.empty() : !impl_->grad64.empty();
}

void Tensor::ensure_grad() {
  check(impl_ != nullptr, "ensure_grad: undefined tensor");
  if (impl_->dtype == DType::F32) {
    if (impl_->grad32.empty()) impl_->grad32.assign(static_cast<size_t>(numel()), 0.0f);
  } else {
    if (impl_->grad64.empty()) impl_->grad64.assign(static_cast<size_t>(numel()), 0.0);
  }
}

void Tensor::zero_grad() {
  if (!impl_) return;
  std::fill(impl_->grad32.begin(), impl_->grad32.end(), 0.0f);
  std::fill(impl_->grad64.begin(), impl_->grad64.end(), 0.0);
}

Tensor Tensor::to(DType dt) const {
  check(impl_ != nullptr, "to: undefined tensor");
  Tensor out = zeros(shape(), dt);
  if (dt == dtype()) {
    if (dt == DType::F32) {
      out.impl()->data32 = impl_->data32;
    } else {
      out.impl()->data64 = impl_->data64;
    }
    return out;
  }
  const auto vals = values();
  for_dtype(dt, [&]<typename T>() {
    auto d = detail::data_of<T>(out.impl());
    for (size_t i = 0; i < vals.size(); ++i) d[i] = static_cast<T>(vals[i]);
  });
  return out;
}

Tensor Tensor::detached_copy() const { return to(dtype()); }

Tensor Tensor::with_requires_grad() const {
  Tensor out = detached_copy();
  out.impl()->requires_grad = true;
  out.impl()->needs_grad = true;
  return out;
}

// ---------------------------------------------------------------------------
// Tape

void Tape::track(const std::shared_ptr<detail::TensorImpl>& t) {
  if (tracked_set_.insert(t.get()).second) tracked_.push_back(t);
}

void Tape::push_node(std::function<void()> bw) { nodes_.push_back(std::move(bw)); }

void Tape::backward(const Tensor& root) {
  check_defined(root, "backward");
  check(root.impl()->producer == this, "backward: root was not produced by this tape");
  check(root.numel() == 1, "backward: root must be a scalar");
  for (auto& impl : tracked_) {
    if (impl->dtype == DType::F32) {
      impl->grad32.assign(static_cast<size_t>(impl->numel), 0.0f);
    } else {
      impl->grad64.assign(static_cast<size_t>(impl->numel), 0.0);
    }
  }
  if (root.dtype() == DType::F32) {
    root.impl()->grad32[0] = 1.0f;
  } else {
    root.impl()->grad64[0] = 1.0;
  }
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

void Tape::clear() {
  nodes_.clear();
  tracked_.clear();
  tracked_set_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

namespace detail {

void record(std::initializer_list<const Tensor*> inputs, std::initializer_list<Tensor*> outputs,
            std::function<void()> bw) {
  bool need = false;
  for (const Tensor* in : inputs) {
    if (in->needs_grad()) {
      need = true;
      break;
    }
  }
  Tape* tape = g_active_tape;
  for (Tensor* out : outputs) out->impl()->needs_grad = need && tape != nullptr;
  if (tape == nullptr || !need) return;
  for (const Tensor* in : inputs) tape->track(in->impl_ptr());
  for (Tensor* out : outputs) {
    out->impl()->producer = tape;
    tape->track(out->impl_ptr());
  }
  tape->push_node(std::move(bw));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

namespace {

using detail::TensorImpl;

// Shared skeleton for binary elementwise ops with per-element backward
// weights that depend only on the inputs and output.
template <typename FwdFn, typename BwdFn>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* name, FwdFn fwd,
                          BwdFn bwd) {
  check_defined(a, name);
  check_defined(b, name);
  check_same_dtype(a, b, name);
  check_same_shape(a, b, name);
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  for_dtype(a.dtype(), [&]<typename T>() {
    auto pa = detail::data_of<T>(a.impl());
    auto pb = detail::data_of<T>(b.impl());
    auto po = detail::data_of<T>(out.impl());
    for (size_t i = 0; i < po.size(); ++i) po[i] = fwd(pa[i], pb[i]);
  });
  auto ai = a.impl_ptr();
  auto bi = b.impl_ptr();
  auto oi = out.impl_ptr();
  detail::record({&a, &b}, {&out}, [ai, bi, oi, bwd]() {
    for_dtype(oi->dtype, [&]<typename T>() {
      auto g = detail::grad_of<T>(oi.get());
      auto pa = detail::data_of<T>(ai.get());
      auto pb = detail::data_of<T>(bi.get());
      if (ai->needs_grad) {
        auto ga = detail::grad_of<T>(ai.get());
        for (size_t i = 0; i < g.size(); ++i) ga[i] += bwd(pa[i], pb[i], g[i], true);
      }
      if (bi->needs_grad) {
        auto gb = detail::grad_of<T>(bi.get());
        for (size_t i = 0; i < g.size(); ++i) gb[i] += bwd(pa[i], pb[i], g[i], false);
      }
    });
  });
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "add", [](auto x, auto y) { return x + y; },
      [](auto, auto, auto g, bool) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "sub", [](auto x, auto y) { return x - y; },
      [](auto, auto, auto g, bool first) { return first ? g : -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "mul", [](auto x, auto y) { return x * y; },
      [](auto x, auto y, auto g, bool first) { return first ? g * y : g * x; });
}

namespace {

template <typename FwdFn, typename BwdFn>
Tensor unary_elementwise(const Tensor& a, const char* name, FwdFn fwd, BwdFn bwd) {
  check_defined(a, name);
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  for_dtype(a.dtype(), [&]<typename T>() {
    auto pa = detail::data_of<T>(a.impl());
    auto po = detail::data_of<T>(out.impl());
    for (size_t i = 0; i < po.size(); ++i) po[i] = fwd(pa[i]);
  });
  auto ai = a.impl_ptr();
  auto oi = out.impl_ptr();
  detail::record({&a}, {&out}, [ai, oi, bwd]() {
    if (!ai->needs_grad) return;
    for_dtype(oi->dtype, [&]<typename T>() {
      auto g = detail::grad_of<T>(oi.get());
      auto pa = detail::data_of<T>(ai.get());
      auto po = detail::data_of<T>(oi.get());
      auto ga = detail::grad_of<T>(ai.get());
      for (size_t i = 0; i < g.size(); ++i) ga[i] += bwd(pa[i], po[i], g[i]);
    });
  });
  return out;
}

}  // namespace

Tensor neg(const Tensor& a) {
  return unary_elementwise(
      a, "neg", [](auto x) { return -x; }, [](auto, auto, auto g) { return -g; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_elementwise(
      a, "add_scalar", [s](auto x) { return static_cast<decltype(x)>(x + s); },
      [](auto, auto, auto g) { return g; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_elementwise(
      a, "mul_scalar", [s](auto x) { return static_cast<decltype(x)>(x * s); },
      [s](auto, auto, auto g) { return static_cast<decltype(g)>(g * s); });
}

Tensor relu(const Tensor& a) {
  // Subgradient 0 at exactly 0.
  return unary_elementwise(
      a, "relu", [](auto x) { return x > 0 ? x : decltype(x)(0); },
      [](auto x, auto, auto g) { return x > 0 ? g : decltype(g)(0); });
}

Tensor sigmoid(const Tensor& a) {
  return unary_elementwise(
      a, "sigmoid",
      [](auto x) {
        using T = decltype(x);
        const T z = exp_of(x >= 0 ? -x : x);
        return x >= 0 ? T(1) / (T(1) + z) : z / (T(1) + z);
      },
      [](auto, auto y, auto g) { return g * y * (1 - y); });
}

Tensor log_floored(const Tensor& a, double floor) {
  check(floor > 0.0, "log_floored: floor must be positive");
  return unary_elementwise(
      a, "log_floored",
      [floor](auto x) {
        using T = decltype(x);
        return std::log(std::max(x, static_cast<T>(floor)));
      },
      [floor](auto x, auto, auto g) {
        using T = decltype(g);
        return x > static_cast<T>(floor) ? g / x : T(0);
      });
}

Tensor abs_val(const Tensor& a) {
  return unary_elementwise(
      a, "abs_val", [](auto x) { return x < 0 ? -x : x; },
      [](auto x, auto, auto g) { return x > 0 ? g : (x < 0 ? -g : decltype(g)(0)); });
}

Tensor square(const Tensor& a) {
  return unary_elementwise(
      a, "square", [](auto x) { return x * x; }, [](auto x, auto, auto g) { return 2 * g * x; });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  check_defined(a, "sum");
  Tensor out = Tensor::zeros({1}, a.dtype());
  for_dtype(a.dtype(), [&]<typename T>() {
    auto pa = detail::data_of<T>(a.impl());
    T acc = 0;
    for (size_t i = 0; i < pa.size(); ++i) acc += pa[i];
    detail::data_of<T>(out.impl())[0] = acc;
  });
  auto ai = a.impl_ptr();
  auto oi = out.impl_ptr();
  detail::record({&a}, {&out}, [ai, oi]() {
    if (!ai->needs_grad) return;
    for_dtype(oi->dtype, [&]<typename T>() {
      const T g = detail::grad_of<T>(oi.get())[0];
      auto ga = detail::grad_of<T>(ai.get());
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  });
  return out;
}

Tensor mean(const Tensor& a) {
  check_defined(a, "mean");
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// ---------------------------------------------------------------------------
// Shape ops

Tensor reshape(const Tensor& a, std::vector<int64_t> shape) {
  check_defined(a, "reshape");
  const int64_t n = shape_numel(shape);
  check(n == a.numel(), "reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
                            shape_str(shape));
  Tensor out = Tensor::zeros(std::move(shape), a.dtype());
  for_dtype(a.dtype(), [&]<typename T>() {
    auto pa = detail::data_of<T>(a.impl());
    auto po = detail::data_of<T>(out.impl());
    std::copy(pa.begin(), pa.end(), po.begin());
  });
  auto ai = a.impl_ptr();
  auto oi = out.impl_ptr();
  detail::record({&a}, {&out}, [ai, oi]() {
    if (!ai->needs_grad) return;
    for_dtype(oi->dtype, [&]<typename T>() {
      auto g = detail::grad_of<T>(oi.get());
      auto ga = detail::grad_of<T>(ai.get());
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  });
  return out;
}

namespace {

// Decomposes a shape around one axis into (outer, extent, inner) so a slice
// along that axis is outer contiguous block copies.
struct AxisSplit {
  int64_t outer = 1;
  int64_t extent = 1;
  int64_t inner = 1;
};

AxisSplit split_axis(const std::vector<int64_t>& shape, int axis) {
  AxisSplit s;
  s.extent = shape[static_cast<size_t>(axis)];
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor narrow(const Tensor& a, int axis, int64_t start, int64_t length) {
  check_defined(a, "narrow");
  check(axis >= 0 && axis < a.rank(), "narrow: axis out of range");
  check(start >= 0 && length > 0 && start + length <= a.extent(axis),
        "narrow: slice [" + std::to_string(start) + "," + std::to_string(start + length) +
            ") out of range for extent " + std::to_string(a.extent(axis)));
  std::vector<int64_t> out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = length;
  Tensor out = Tensor::zeros(std::move(out_shape), a.dtype());
  const AxisSplit s = split_axis(a.shape(), axis);
  for_dtype(a.dtype(), [&]<typename T>() {
    auto pa = detail::data_of<T>(a.impl());
    auto po = detail::data_of<T>(out.impl());
    for (int64_t o = 0; o < s.outer; ++o) {
      const T* src = pa.data() + (o * s.extent + start) * s.inner;
      T* dst = po.data() + o * length * s.inner;
      std::copy(src, src + length * s.inner, dst);
    }
  });
  auto ai = a.impl_ptr();
  auto oi = out.impl_ptr();
  detail::record({&a}, {&out}, [ai, oi, s, axis, start, length]() {
    (void)axis;
    if (!ai->needs_grad) return;
    for_dtype(oi->dtype, [&]<typename T>() {
      auto g = detail::grad_of<T>(oi.get());
      auto ga = detail::grad_of<T>(ai.get());
      for (int64_t o = 0; o < s.outer; ++o) {
        const T* src = g.data() + o * length * s.inner;
        T* dst = ga.data() + (o * s.extent + start) * s.inner;
        for (int64_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
      }
    });
  });
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  check(!parts.empty(), "concat: no operands");
  for (const Tensor& p : parts) check_defined(p, "concat");
  const Tensor& first = parts.front();
  check(axis >= 0 && axis < first.rank(), "concat: axis out of range");
  int64_t total = 0;
  for (const Tensor& p : parts) {
    check_same_dtype(first, p, "concat");
    check(p.rank() == first.rank(), "concat: rank mismatch");
    for (int i = 0; i < first.rank(); ++i) {
      if (i == axis) continue;
      check(p.extent(i) == first.extent(i),
            "concat: extent mismatch on axis " + std::to_string(i));
    }
    total += p.extent(axis);
  }
  std::vector<int64_t> out_shape = first.shape();
  out_shape[static_cast<size_t>(axis)] = total;
  Tensor out = Tensor::zeros(std::move(out_shape), first.dtype());
  const AxisSplit so = split_axis(out.shape(), axis);

  std::vector<std::shared_ptr<detail::TensorImpl>> part_impls;
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const Tensor& p : parts) {
    part_impls.push_back(p.impl_ptr());
    offsets.push_back(off);
    const int64_t ext = p.extent(axis);
    for_dtype(first.dtype(), [&]<typename T>() {
      auto pp = detail::data_of<T>(p.impl());
      auto po = detail::data_of<T>(out.impl());
      for (int64_t o = 0; o < so.outer; ++o) {
        const T* src = pp.data() + o * ext * so.inner;
        T* dst = po.data() + (o * so.extent + off) * so.inner;
        std::copy(src, src + ext * so.inner, dst);
      }
    });
    off += ext;
  }

  std::vector<const Tensor*> input_ptrs;
  for (const Tensor& p : parts) input_ptrs.push_back(&p);
  auto oi = out.impl_ptr();
  auto bw = [part_impls, offsets, oi, so, axis]() {
    for_dtype(oi->dtype, [&]<typename T>() {
      auto g = detail::grad_of<T>(oi.get());
      for (size_t pi = 0; pi < part_impls.size(); ++pi) {
        auto& impl = part_impls[pi];
        if (!impl->needs_grad) continue;
        const int64_t ext = impl->shape[static_cast<size_t>(axis)];
        auto gp = detail::grad_of<T>(impl.get());
        for (int64_t o = 0; o < so.outer; ++o) {
          const T* src = g.data() + (o * so.extent + offsets[pi]) * so.inner;
          T* dst = gp.data() + o * ext * so.inner;
          for (int64_t i = 0; i < ext * so.inner; ++i) dst[i] += src[i];
        }
      }
    });
  };
  // record() takes initializer lists; concat has a runtime operand count, so
  // registration is expanded inline here.
  bool need = false;
  for (const Tensor* in : input_ptrs) need = need || in->needs_grad();
  Tape* tape = active_tape();
  out.impl()->needs_grad = need && tape != nullptr;
  if (tape != nullptr && need) {
    for (const Tensor* in : input_ptrs) tape->track(in->impl_ptr());
    out.impl()->producer = tape;
    tape->track(out.impl_ptr());
    tape->push_node(std::move(bw));
  }
  return out;
}

Tensor transpose2d(const Tensor& a) {
  check_defined(a, "transpose2d");
  check(a.rank() == 2, "transpose2d: rank-2 tensor required, got " + shape_str(a.shape()));
  const int64_t m = a.extent(0), n = a.extent(1);
  Tensor out = Tensor::zeros({n, m}, a.dtype());
  for_dtype(a.dtype(), [&]<typename T>() {
    auto pa = detail::data_of<T>(a.impl());
    auto po = detail::data_of<T>(out.impl());
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
  });
  auto ai = a.impl_ptr();
  auto oi = out.impl_ptr();
  detail::record({&a}, {&out}, [ai, oi, m, n]() {
    if (!ai->needs_grad) return;
    for_dtype(oi->dtype, [&]<typename T>() {
      auto g = detail::grad_of<T>(oi.get());
      auto ga = detail::grad_of<T>(ai.get());
      for (int64_t j = 0; j < n; ++j)
        for (int64_t i = 0; i < m; ++i) ga[i * n + j] += g[j * m + i];
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// Matmul

namespace {

// c += a*b with a wide row: stream b rows, lane-parallel over n.
template <typename T>
void matmul_acc_wide(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    T* cr = c + i * n;
    const T* ar = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const T av = ar[p];
      const T* br = b + p * n;
      for (int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// Narrow outputs (n <= 64): the whole c row fits in vector registers, so
// block four a rows per pass and keep their accumulators live across k.
// Reloading c per k step is what makes the wide kernel crawl here.
template <typename T, int NB>
void matmul_acc_narrow(const T* a, const T* b, T* c, int64_t m, int64_t k) {
  int64_t i = 0;
  if constexpr (NB <= 16) {
    // One accumulator vector per row is too shallow a dependency chain to
    // hide FMA latency; eight rows keep the units busy.
    for (; i + 8 <= m; i += 8) {
      T acc0[NB] = {}, acc1[NB] = {}, acc2[NB] = {}, acc3[NB] = {};
      T acc4[NB] = {}, acc5[NB] = {}, acc6[NB] = {}, acc7[NB] = {};
      const T* a0 = a + i * k;
      const T* a1 = a0 + k;
      const T* a2 = a1 + k;
      const T* a3 = a2 + k;
      const T* a4 = a3 + k;
      const T* a5 = a4 + k;
      const T* a6 = a5 + k;
      const T* a7 = a6 + k;
      for (int64_t p = 0; p < k; ++p) {
        const T* br = b + p * NB;
        const T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
        const T v4 = a4[p], v5 = a5[p], v6 = a6[p], v7 = a7[p];
        for (int j = 0; j < NB; ++j) {
          const T bv = br[j];
          acc0[j] += v0 * bv;
          acc1[j] += v1 * bv;
          acc2[j] += v2 * bv;
          acc3[j] += v3 * bv;
          acc4[j] += v4 * bv;
          acc5[j] += v5 * bv;
          acc6[j] += v6 * bv;
          acc7[j] += v7 * bv;
        }
      }
      T* c0 = c + i * NB;
      for (int j = 0; j < NB; ++j) {
        c0[j] += acc0[j];
        c0[NB + j] += acc1[j];
        c0[2 * NB + j] += acc2[j];
        c0[3 * NB + j] += acc3[j];
        c0[4 * NB + j] += acc4[j];
        c0[5 * NB + j] += acc5[j];
        c0[6 * NB + j] += acc6[j];
        c0[7 * NB + j] += acc7[j];
      }
    }
  }
  for (; i + 4 <= m; i += 4) {
    T acc0[NB] = {}, acc1[NB] = {}, acc2[NB] = {}, acc3[NB] = {};
    const T* a0 = a + i * k;
    const T* a1 = a0 + k;
    const T* a2 = a1 + k;
    const T* a3 = a2 + k;
    for (int64_t p = 0; p < k; ++p) {
      const T* br = b + p * NB;
      const T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
      for (int j = 0; j < NB; ++j) {
        const T bv = br[j];
        acc0[j] += v0 * bv;
        acc1[j] += v1 * bv;
        acc2[j] += v2 * bv;
        acc3[j] += v3 * bv;
      }
    }
    T* c0 = c + i * NB;
    for (int j = 0; j < NB; ++j) {
      c0[j] += acc0[j];
      c0[NB + j] += acc1[j];
      c0[2 * NB + j] += acc2[j];
      c0[3 * NB + j] += acc3[j];
    }
  }
  for (; i < m; ++i) {
    T acc[NB] = {};
    const T* ar = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const T av = ar[p];
      const T* br = b + p * NB;
      for (int j = 0; j < NB; ++j) acc[j] += av * br[j];
    }
    T* cr = c + i * NB;
    for (int j = 0; j < NB; ++j) cr[j] += acc[j];
  }
}

// Runtime-n variant of the narrow path for odd widths (class counts, head
// slices of small test models).
template <typename T>
void matmul_acc_narrow_any(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  T acc[64];
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) acc[j] = T(0);
    const T* ar = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const T av = ar[p];
      const T* br = b + p * n;
      for (int64_t j = 0; j < n; ++j) acc[j] += av * br[j];
    }
    T* cr = c + i * n;
    for (int64_t j = 0; j < n; ++j) cr[j] += acc[j];
  }
}

// Few output rows over a long inner extent: stream b exactly once and keep
// the whole (small) c block cache-hot instead of re-reading b per row.
template <typename T>
void matmul_acc_pouter(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t p = 0; p < k; ++p) {
    const T* br = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      const T av = a[i * k + p];
      T* cr = c + i * n;
      for (int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// c += a[m,k] * b[k,n]; callers pass zeroed buffers for plain products.
template <typename T>
void matmul_acc_kernel(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  switch (n) {
    case 8: matmul_acc_narrow<T, 8>(a, b, c, m, k); return;
    case 16: matmul_acc_narrow<T, 16>(a, b, c, m, k); return;
    case 32: matmul_acc_narrow<T, 32>(a, b, c, m, k); return;
    case 48: matmul_acc_narrow<T, 48>(a, b, c, m, k); return;
    case 64: matmul_acc_narrow<T, 64>(a, b, c, m, k); return;
    default: break;
  }
  if (n < 64) {
    matmul_acc_narrow_any(a, b, c, m, k, n);
    return;
  }
  if (m * n * static_cast<int64_t>(sizeof(T)) <= (1 << 18) && k >= 4 * m) {
    matmul_acc_pouter(a, b, c, m, k, n);
    return;
  }
  matmul_acc_wide(a, b, c, m, k, n);
}

template <typename T>
std::vector<T> transposed_copy(const T* src, int64_t rows, int64_t cols) {
  std::vector<T> out(static_cast<size_t>(rows * cols));
  constexpr int64_t kTile = 32;
  for (int64_t r0 = 0; r0 < rows; r0 += kTile)
    for (int64_t c0 = 0; c0 < cols; c0 += kTile) {
      const int64_t r1 = std::min(rows, r0 + kTile);
      const int64_t c1 = std::min(cols, c0 + kTile);
      for (int64_t r = r0; r < r1; ++r)
        for (int64_t c = c0; c < c1; ++c) out[static_cast<size_t>(c * rows + r)] = src[r * cols + c];
    }
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  check_same_dtype(a, b, "matmul");
  check(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 operands required");
  check(a.extent(1) == b.extent(0), "matmul: inner extent mismatch " + shape_str(a.shape()) +
                                        " x " + shape_str(b.shape()));
  const int64_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor out = Tensor::zeros({m, n}, a.dtype());
  for_dtype(a.dtype(), [&]<typename T>() {
    matmul_acc_kernel(detail::data_of<T>(a.impl()).data(), detail::data_of<T>(b.impl()).data(),
                      detail::data_of<T>(out.impl()).data(), m, k, n);
  });
  auto ai = a.impl_ptr();
  auto bi = b.impl_ptr();
  auto oi = out.impl_ptr();
  detail::record({&a, &b}, {&out}, [ai, bi, oi, m, k, n]() {
    // Both grads route through the forward kernel on explicit transposes;
    // strict-FP reductions never appear and narrow shapes stay blocked.
    for_dtype(oi->dtype, [&]<typename T>() {
      const T* g = detail::grad_of<T>(oi.get()).data();
      if (ai->needs_grad) {
        // dA += dC * B^T
        const std::vector<T> bt =
            transposed_copy(detail::data_of<T>(bi.get()).data(), k, n);
        matmul_acc_kernel(g, bt.data(), detail::grad_of<T>(ai.get()).data(), m, n, k);
      }
      if (bi->needs_grad) {
        // dB += A^T * dC
        const std::vector<T> at =
            transposed_copy(detail::data_of<T>(ai.get()).data(), m, k);
        matmul_acc_kernel(at.data(), g, detail::grad_of<T>(bi.get()).data(), k, m, n);
      }
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

constexpr int kMaxAccChannels = 256;

struct ConvDims {
  int64_t h, w, cin, kh, kw, cpg, cout, ho, wo;
  int stride, padding, groups;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, int stride, int padding,
                   int groups) {
  check(input.rank() == 3, "conv2d: input must be [H,W,C], got " + shape_str(input.shape()));
  check(kernel.rank() == 4,
        "conv2d: kernel must be [kh,kw,Cin/groups,Cout], got " + shape_str(kernel.shape()));
  check(stride >= 1, "conv2d: stride must be >= 1");
  check(padding >= 0, "conv2d: padding must be >= 0");
  check(groups >= 1, "conv2d: groups must be >= 1");
  ConvDims d;
  d.h = input.extent(0);
  d.w = input.extent(1);
  d.cin = input.extent(2);
  d.kh = kernel.extent(0);
  d.kw = kernel.extent(1);
  d.cpg = kernel.extent(2);
  d.cout = kernel.extent(3);
  d.stride = stride;
  d.padding = padding;
  d.groups = groups;
  check(d.cin % groups == 0, "conv2d: input channels not divisible by groups");
  check(d.cout % groups == 0, "conv2d: output channels not divisible by groups");
  check(d.cpg == d.cin / groups, "conv2d: kernel channel extent does not match Cin/groups");
  d.ho = (d.h + 2 * padding - d.kh) / stride + 1;
  d.wo = (d.w + 2 * padding - d.kw) / stride + 1;
  check(d.h + 2 * padding >= d.kh && d.w + 2 * padding >= d.kw && d.ho >= 1 && d.wo >= 1,
        "conv2d: kernel does not fit padded input");
  return d;
}

// Bounds-checked accumulation for one output pixel. Shared by edge pixels
// and the generic fallback; handles padding and any stride.
template <typename T>
void conv_accum_px(const T* in, const T* k, T* acc, const ConvDims& d, int64_t iy0, int64_t ix0) {
  for (int64_t ky = 0; ky < d.kh; ++ky) {
    const int64_t iy = iy0 + ky;
    if (iy < 0 || iy >= d.h) continue;
    for (int64_t kx = 0; kx < d.kw; ++kx) {
      const int64_t ix = ix0 + kx;
      if (ix < 0 || ix >= d.w) continue;
      const T* px = in + (iy * d.w + ix) * d.cin;
      const T* kcol = k + ((ky * d.kw + kx) * d.cpg) * d.cout;
      for (int64_t ci = 0; ci < d.cin; ++ci) {
        const T v = px[ci];
        const T* kr = kcol + ci * d.cout;
        for (int64_t co = 0; co < d.cout; ++co) acc[co] += v * kr[co];
      }
    }
  }
}

template <bool ACC, typename T>
void store_px(T* op, const T* acc, int64_t n) {
  if (ACC) {
    for (int64_t c = 0; c < n; ++c) op[c] += acc[c];
  } else {
    for (int64_t c = 0; c < n; ++c) op[c] = acc[c];
  }
}

// Dense (groups == 1) forward for channel counts without a fixed-width
// kernel. ACC adds into out instead of overwriting; the input-gradient pass
// relies on that.
template <typename T, bool ACC>
void conv_fwd_dense(const T* in, const T* k, T* out, const ConvDims& d) {
  T acc[kMaxAccChannels];
  for (int64_t oy = 0; oy < d.ho; ++oy) {
    const int64_t iy0 = oy * d.stride - d.padding;
    for (int64_t ox = 0; ox < d.wo; ++ox) {
      for (int64_t c = 0; c < d.cout; ++c) acc[c] = 0;
      conv_accum_px(in, k, acc, d, iy0, ox * d.stride - d.padding);
      store_px<ACC>(out + (oy * d.wo + ox) * d.cout, acc, d.cout);
    }
  }
}

// Interior pixels with a compile-time output width: the P*COUT accumulators
// stay in registers across the whole receptive-field reduction, and the P
// pixels share each kernel row load while giving the FMA units independent
// chains. The kx and ci loops fuse because window pixels are contiguous.
template <typename T, int COUT, int P, bool ACC>
void conv_fwd_px_block(const T* in0, const T* k, T* op, const ConvDims& d) {
  T acc[P][COUT] = {};
  const int64_t kwcin = d.kw * d.cin;
  const int64_t row_stride = d.w * d.cin;
  const int64_t px_stride = d.stride * d.cin;
  for (int64_t ky = 0; ky < d.kh; ++ky) {
    const T* row = in0 + ky * row_stride;
    const T* krow = k + ky * kwcin * COUT;
    for (int64_t q = 0; q < kwcin; ++q) {
      const T* kr = krow + q * COUT;
      for (int pp = 0; pp < P; ++pp) {
        const T v = row[pp * px_stride + q];
        for (int c = 0; c < COUT; ++c) acc[pp][c] += v * kr[c];
      }
    }
  }
  for (int pp = 0; pp < P; ++pp) store_px<ACC>(op + pp * COUT, acc[pp], COUT);
}

template <typename T, int COUT, bool ACC>
void conv_fwd_dense_n(const T* in, const T* k, T* out, const ConvDims& d) {
  constexpr int P = COUT <= 32 ? 4 : 2;
  T acc[COUT];
  // ox range whose kernel window lies fully inside the row.
  int64_t xa = (d.padding + d.stride - 1) / d.stride;
  int64_t xb = d.w - d.kw + d.padding >= 0 ? (d.w - d.kw + d.padding) / d.stride + 1 : 0;
  xb = std::min(xb, d.wo);
  xa = std::min(xa, xb);
  for (int64_t oy = 0; oy < d.ho; ++oy) {
    const int64_t iy0 = oy * d.stride - d.padding;
    T* orow = out + oy * d.wo * COUT;
    if (iy0 < 0 || iy0 + d.kh > d.h) {
      for (int64_t ox = 0; ox < d.wo; ++ox) {
        for (int c = 0; c < COUT; ++c) acc[c] = 0;
        conv_accum_px(in, k, acc, d, iy0, ox * d.stride - d.padding);
        store_px<ACC>(orow + ox * COUT, acc, COUT);
      }
      continue;
    }
    int64_t ox = 0;
    for (; ox < xa; ++ox) {
      for (int c = 0; c < COUT; ++c) acc[c] = 0;
      conv_accum_px(in, k, acc, d, iy0, ox * d.stride - d.padding);
      store_px<ACC>(orow + ox * COUT, acc, COUT);
    }
    for (; ox + P <= xb; ox += P)
      conv_fwd_px_block<T, COUT, P, ACC>(in + (iy0 * d.w + ox * d.stride - d.padding) * d.cin, k,
                                         orow + ox * COUT, d);
    for (; ox < xb; ++ox)
      conv_fwd_px_block<T, COUT, 1, ACC>(in + (iy0 * d.w + ox * d.stride - d.padding) * d.cin, k,
                                         orow + ox * COUT, d);
    for (; ox < d.wo; ++ox) {
      for (int c = 0; c < COUT; ++c) acc[c] = 0;
      conv_accum_px(in, k, acc, d, iy0, ox * d.stride - d.padding);
      store_px<ACC>(orow + ox * COUT, acc, COUT);
    }
  }
}

template <typename T, bool ACC>
void conv_fwd_dense_any(const T* in, const T* k, T* out, const ConvDims& d) {
  switch (d.cout) {
    case 8: conv_fwd_dense_n<T, 8, ACC>(in, k, out, d); return;
    case 16: conv_fwd_dense_n<T, 16, ACC>(in, k, out, d); return;
    case 32: conv_fwd_dense_n<T, 32, ACC>(in, k, out, d); return;
    case 64: conv_fwd_dense_n<T, 64, ACC>(in, k, out, d); return;
    default: conv_fwd_dense<T, ACC>(in, k, out, d); return;
  }
}

// Depthwise (groups == Cin == Cout) forward, lane-parallel over channels.
template <typename T>
void conv_fwd_depthwise(const T* in, const T* k, T* out, const ConvDims& d) {
  for (int64_t oy = 0; oy < d.ho; ++oy) {
    const int64_t iy0 = oy * d.stride - d.padding;
    for (int64_t ox = 0; ox < d.wo; ++ox) {
      const int64_t ix0 = ox * d.stride - d.padding;
      T* op = out + (oy * d.wo + ox) * d.cout;
      for (int64_t c = 0; c < d.cout; ++c) op[c] = 0;
      for (int64_t ky = 0; ky < d.kh; ++ky) {
        const int64_t iy = iy0 + ky;
        if (iy < 0 || iy >= d.h) continue;
        for (int64_t kx = 0; kx < d.kw; ++kx) {
          const int64_t ix = ix0 + kx;
          if (ix < 0 || ix >= d.w) continue;
          const T* px = in + (iy * d.w + ix) * d.cin;
          const T* kr = k + (ky * d.kw + kx) * d.cout;
          for (int64_t c = 0; c < d.cout; ++c) op[c] += px[c] * kr[c];
        }
      }
    }
  }
}

// Fully general grouped forward. Slow path; used only for layouts the
// specialized kernels do not cover.
template <typename T>
void conv_fwd_grouped(const T* in, const T* k, T* out, const ConvDims& d) {
  const int64_t copg = d.cout / d.groups;
  for (int64_t oy = 0; oy < d.ho; ++oy) {
    for (int64_t ox = 0; ox < d.wo; ++ox) {
      T* op = out + (oy * d.wo + ox) * d.cout;
      for (int64_t c = 0; c < d.cout; ++c) op[c] = 0;
      for (int64_t ky = 0; ky < d.kh; ++ky) {
        const int64_t iy = oy * d.stride + ky - d.padding;
        if (iy < 0 || iy >= d.h) continue;
        for (int64_t kx = 0; kx < d.kw; ++kx) {
          const int64_t ix = ox * d.stride + kx - d.padding;
          if (ix < 0 || ix >= d.w) continue;
          const T* px = in + (iy * d.w + ix) * d.cin;
          for (int64_t g = 0; g < d.groups; ++g) {
            for (int64_t ci = 0; ci < d.cpg; ++ci) {
              const T v = px[g * d.cpg + ci];
              const T* kr = k + ((ky * d.kw + kx) * d.cpg + ci) * d.cout + g * copg;
              for (int64_t co = 0; co < copg; ++co) op[g * copg + co] += v * kr[co];
            }
          }
        }
      }
    }
  }
}

// Input gradient, dense case. For stride 1 the scatter through the window is
// the same as convolving the output gradient with the kernel flipped in both
// spatial axes and transposed in channels, which rides the fast forward
// kernels in accumulate mode. Strided layouts take the explicit scatter.
template <typename T>
void conv_bwd_input_dense(const T* k, const T* gout, T* gin, const ConvDims& d) {
  if (d.stride == 1 && d.kh == d.kw && d.padding <= d.kh - 1) {
    std::vector<T> kt(static_cast<size_t>(d.kh * d.kw * d.cout * d.cin));
    for (int64_t ky = 0; ky < d.kh; ++ky)
      for (int64_t kx = 0; kx < d.kw; ++kx) {
        const T* src = k + ((ky * d.kw + kx) * d.cpg) * d.cout;
        T* dst = kt.data() + ((d.kh - 1 - ky) * d.kw + (d.kw - 1 - kx)) * d.cout * d.cin;
        for (int64_t ci = 0; ci < d.cin; ++ci)
          for (int64_t co = 0; co < d.cout; ++co) dst[co * d.cin + ci] = src[ci * d.cout + co];
      }
    ConvDims r;
    r.h = d.ho;
    r.w = d.wo;
    r.cin = d.cout;
    r.kh = d.kh;
    r.kw = d.kw;
    r.cpg = d.cout;
    r.cout = d.cin;
    r.ho = d.h;
    r.wo = d.w;
    r.stride = 1;
    r.padding = static_cast<int>(d.kh - 1) - d.padding;
    r.groups = 1;
    conv_fwd_dense_any<T, true>(gout, kt.data(), gin, r);
    return;
  }
  std::vector<T> kt(static_cast<size_t>(d.kh * d.kw * d.cout * d.cin));
  for (int64_t ky = 0; ky < d.kh; ++ky)
    for (int64_t kx = 0; kx < d.kw; ++kx)
      for (int64_t ci = 0; ci < d.cin; ++ci)
        for (int64_t co = 0; co < d.cout; ++co)
          kt[static_cast<size_t>(((ky * d.kw + kx) * d.cout + co) * d.cin + ci)] =
              k[((ky * d.kw + kx) * d.cpg + ci) * d.cout + co];
  for (int64_t oy = 0; oy < d.ho; ++oy) {
    for (int64_t ox = 0; ox < d.wo; ++ox) {
      const T* gp = gout + (oy * d.wo + ox) * d.cout;
      for (int64_t ky = 0; ky < d.kh; ++ky) {
        const int64_t iy = oy * d.stride + ky - d.padding;
        if (iy < 0 || iy >= d.h) continue;
        for (int64_t kx = 0; kx < d.kw; ++kx) {
          const int64_t ix = ox * d.stride + kx - d.padding;
          if (ix < 0 || ix >= d.w) continue;
          T* dip = gin + (iy * d.w + ix) * d.cin;
          const T* ktp = kt.data() + (ky * d.kw + kx) * d.cout * d.cin;
          for (int64_t co = 0; co < d.cout; ++co) {
            const T v = gp[co];
            const T* ktr = ktp + co * d.cin;
            for (int64_t ci = 0; ci < d.cin; ++ci) dip[ci] += v * ktr[ci];
          }
        }
      }
    }
  }
}

// Kernel gradient with compile-time output width: for each tap and small
// block of input channels the accumulators live in registers across a whole
// output row, and the gradient row stays cache-hot for every tap.
template <typename T, int COUT>
void conv_bwd_kernel_blocked(const T* in, const T* gout, T* gk, const ConvDims& d) {
  constexpr int CB = COUT <= 32 ? 4 : 2;
  const int64_t s = d.stride;
  for (int64_t oy = 0; oy < d.ho; ++oy) {
    const T* grow = gout + oy * d.wo * COUT;
    for (int64_t ky = 0; ky < d.kh; ++ky) {
      const int64_t iy = oy * s + ky - d.padding;
      if (iy < 0 || iy >= d.h) continue;
      const T* irow = in + iy * d.w * d.cin;
      for (int64_t kx = 0; kx < d.kw; ++kx) {
        const int64_t off = kx - d.padding;
        int64_t x0 = 0;
        if (off < 0) x0 = (-off + s - 1) / s;
        const int64_t last = d.w - 1 - off;
        if (last < 0) continue;
        const int64_t x1 = std::min(d.wo, last / s + 1);
        if (x0 >= x1) continue;
        T* gkp = gk + (ky * d.kw + kx) * d.cpg * COUT;
        int64_t ci = 0;
        for (; ci + CB <= d.cin; ci += CB) {
          T acc[CB][COUT] = {};
          const T* ip = irow + (x0 * s + off) * d.cin + ci;
          const T* gp = grow + x0 * COUT;
          for (int64_t ox = x0; ox < x1; ++ox, ip += s * d.cin, gp += COUT) {
            for (int b = 0; b < CB; ++b) {
              const T v = ip[b];
              for (int c = 0; c < COUT; ++c) acc[b][c] += v * gp[c];
            }
          }
          for (int b = 0; b < CB; ++b) {
            T* gkr = gkp + (ci + b) * COUT;
            for (int c = 0; c < COUT; ++c) gkr[c] += acc[b][c];
          }
        }
        for (; ci < d.cin; ++ci) {
          T acc[COUT] = {};
          const T* ip = irow + (x0 * s + off) * d.cin + ci;
          const T* gp = grow + x0 * COUT;
          for (int64_t ox = x0; ox < x1; ++ox, ip += s * d.cin, gp += COUT) {
            const T v = *ip;
            for (int c = 0; c < COUT; ++c) acc[c] += v * gp[c];
          }
          T* gkr = gkp + ci * COUT;
          for (int c = 0; c < COUT; ++c) gkr[c] += acc[c];
        }
      }
    }
  }
}

template <typename T>
void conv_bwd_kernel_dense(const T* in, const T* gout, T* gk, const ConvDims& d) {
  for (int64_t oy = 0; oy < d.ho; ++oy) {
    for (int64_t ox = 0; ox < d.wo; ++ox) {
      const T* gp = gout + (oy * d.wo + ox) * d.cout;
      for (int64_t ky = 0; ky < d.kh; ++ky) {
        const int64_t iy = oy * d.stride + ky - d.padding;
        if (iy < 0 || iy >= d.h) continue;
        for (int64_t kx = 0; kx < d.kw; ++kx) {
          const int64_t ix = ox * d.stride + kx - d.padding;
          if (ix < 0 || ix >= d.w) continue;
          const T* px = in + (iy * d.w + ix) * d.cin;
          T* gkp = gk + (ky * d.kw + kx) * d.cpg * d.cout;
          for (int64_t ci = 0; ci < d.cin; ++ci) {
            const T v = px[ci];
            T* gkr = gkp + ci * d.cout;
            for (int64_t co = 0; co < d.cout; ++co) gkr[co] += v * gp[co];
          }
        }
      }
    }
  }
}

template <typename T>
void conv_bwd_depthwise(const T* in, const T* k, const T* gout, T* gin, T* gk,
                        const ConvDims& d) {
  for (int64_t oy = 0; oy < d.ho; ++oy) {
    for (int64_t ox = 0; ox < d.wo; ++ox) {
      const T* gp = gout + (oy * d.wo + ox) * d.cout;
      for (int64_t ky = 0; ky < d.kh; ++ky) {
        const int64_t iy = oy * d.stride + ky - d.padding;
        if (iy < 0 || iy >= d.h) continue;
        for (int64_t kx = 0; kx < d.kw; ++kx) {
          const int64_t ix = ox * d.stride + kx - d.padding;
          if (ix < 0 || ix >= d.w) continue;
          const T* px = in + (iy * d.w + ix) * d.cin;
          const T* kr = k + (ky * d.kw + kx) * d.cout;
          if (gin != nullptr) {
            T* dip = gin + (iy * d.w + ix) * d.cin;
            for (int64_t c = 0; c < d.cout; ++c) dip[c] += gp[c] * kr[c];
          }
          if (gk != nullptr) {
            T* gkr = gk + (ky * d.kw + kx) * d.cout;
            for (int64_t c = 0; c < d.cout; ++c) gkr[c] += gp[c] * px[c];
          }
        }
      }
    }
  }
}

template <typename T>
void conv_bwd_grouped(const T* in, const T* k, const T* gout, T* gin, T* gk, const ConvDims& d) {
  const int64_t copg = d.cout / d.groups;
  for (int64_t oy = 0; oy < d.ho; ++oy) {
    for (int64_t ox = 0; ox < d.wo; ++ox) {
      const T* gp = gout + (oy * d.wo + ox) * d.cout;
      for (int64_t ky = 0; ky < d.kh; ++ky) {
        const int64_t iy = oy * d.stride + ky - d.padding;
        if (iy < 0 || iy >= d.h) continue;
        for (int64_t kx = 0; kx < d.kw; ++kx) {
          const int64_t ix = ox * d.stride + kx - d.padding;
          if (ix < 0 || ix >= d.w) continue;
          const int64_t px_off = (iy * d.w + ix) * d.cin;
          for (int64_t g = 0; g < d.groups; ++g) {
            for (int64_t ci = 0; ci < d.cpg; ++ci) {
              const int64_t kr_off = ((ky * d.kw + kx) * d.cpg + ci) * d.cout + g * copg;
              const T v = in[px_off + g * d.cpg + ci];
              for (int64_t co = 0; co < copg; ++co) {
                if (gin != nullptr) gin[px_off + g * d.cpg + ci] += gp[g * copg + co] * k[kr_off + co];
                if (gk != nullptr) gk[kr_off + co] += gp[g * copg + co] * v;
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding, int groups) {
  check_defined(input, "conv2d");
  check_defined(kernel, "conv2d");
  check_same_dtype(input, kernel, "conv2d");
  const ConvDims d = conv_dims(input, kernel, stride, padding, groups);
  Tensor out = Tensor::zeros({d.ho, d.wo, d.cout}, input.dtype());
  const bool dense = groups == 1 && d.cout <= kMaxAccChannels;
  const bool depthwise = groups == d.cin && d.cout == d.cin && d.cpg == 1;
  for_dtype(input.dtype(), [&]<typename T>() {
    const T* in = detail::data_of<T>(input.impl()).data();
    const T* k = detail::data_of<T>(kernel.impl()).data();
    T* o = detail::data_of<T>(out.impl()).data();
    if (dense) {
      conv_fwd_dense_any<T, false>(in, k, o, d);
    } else if (depthwise) {
      conv_fwd_depthwise(in, k, o, d);
    } else {
      conv_fwd_grouped(in, k, o, d);
    }
  });
  auto ii = input.impl_ptr();
  auto ki = kernel.impl_ptr();
  auto oi = out.impl_ptr();
  detail::record({&input, &kernel}, {&out}, [ii, ki, oi, d, dense, depthwise]() {
    for_dtype(oi->dtype, [&]<typename T>() {
      const T* in = detail::data_of<T>(ii.get()).data();
      const T* k = detail::data_of<T>(ki.get()).data();
      const T* g = detail::grad_of<T>(oi.get()).data();
      T* gin = ii->needs_grad ? detail::grad_of<T>(ii.get()).data() : nullptr;
      T* gk = ki->needs_grad ? detail::grad_of<T>(ki.get()).data() : nullptr;
      if (dense) {
        if (gin != nullptr) conv_bwd_input_dense(k, g, gin, d);
        if (gk != nullptr) {
          switch (d.cout) {
            case 8: conv_bwd_kernel_blocked<T, 8>(in, g, gk, d); break;
            case 16: conv_bwd_kernel_blocked<T, 16>(in, g, gk, d); break;
            case 32: conv_bwd_kernel_blocked<T, 32>(in, g, gk, d); break;
            case 64: conv_bwd_kernel_blocked<T, 64>(in, g, gk, d); break;
            default: conv_bwd_kernel_dense(in, g, gk, d); break;
          }
        }
      } else if (depthwise) {
        conv_bwd_depthwise(in, k, g, gin, gk, d);
      } else {
        conv_bwd_grouped(in, k, g, gin, gk, d);
      }
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// softmax / layer norm

Tensor softmax_lastdim(const Tensor& a) {
  check_defined(a, "softmax_lastdim");
  check(a.rank() >= 1, "softmax_lastdim: rank must be >= 1");
  const int64_t n = a.extent(a.rank() - 1);
  const int64_t rows = a.numel() / n;
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  for_dtype(a.dtype(), [&]<typename T>() {
    const T* pa = detail::data_of<T>(a.impl()).data();
    T* po = detail::data_of<T>(out.impl()).data();
    for (int64_t r = 0; r < rows; ++r) {
      const T* x = pa + r * n;
      T* y = po + r * n;
      const T m = max_span(x, n);
      for (int64_t j = 0; j < n; ++j) y[j] = x[j] - m;
      exp_span(y, y, n);
      const T inv = T(1) / sum_span(y, n);
      for (int64_t j = 0; j < n; ++j) y[j] *= inv;
    }
  });
  auto ai = a.impl_ptr();
  auto oi = out.impl_ptr();
  detail::record({&a}, {&out}, [ai, oi, rows, n]() {
    if (!ai->needs_grad) return;
    for_dtype(oi->dtype, [&]<typename T>() {
      const T* y = detail::data_of<T>(oi.get()).data();
      const T* g = detail::grad_of<T>(oi.get()).data();
      T* ga = detail::grad_of<T>(ai.get()).data();
      for (int64_t r = 0; r < rows; ++r) {
        const T* yr = y + r * n;
        const T* gr = g + r * n;
        T* gar = ga + r * n;
        const T dot = dot_span(gr, yr, n);
        for (int64_t j = 0; j < n; ++j) gar[j] += yr[j] * (gr[j] - dot);
      }
    });
  });
  return out;
}

Tensor layer_norm_lastdim(const Tensor& a, double eps) {
  check_defined(a, "layer_norm_lastdim");
  check(a.rank() >= 1, "layer_norm_lastdim: rank must be >= 1");
  check(eps > 0.0, "layer_norm_lastdim: eps must be positive");
  const int64_t n = a.extent(a.rank() - 1);
  const int64_t rows = a.numel() / n;
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  // Inverse stddev per row is stashed for the backward pass.
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  for_dtype(a.dtype(), [&]<typename T>() {
    const T* pa = detail::data_of<T>(a.impl()).data();
    T* po = detail::data_of<T>(out.impl()).data();
    for (int64_t r = 0; r < rows; ++r) {
      const T* x = pa + r * n;
      T* y = po + r * n;
      T mu = 0;
      for (int64_t j = 0; j < n; ++j) mu += x[j];
      mu /= static_cast<T>(n);
      T var = 0;
      for (int64_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
      var /= static_cast<T>(n);
      const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
      (*inv_std)[static_cast<size_t>(r)] = static_cast<double>(inv);
      for (int64_t j = 0; j < n; ++j) y[j] = (x[j] - mu) * inv;
    }
  });
  auto ai = a.impl_ptr();
  auto oi = out.impl_ptr();
  detail::record({&a}, {&out}, [ai, oi, inv_std, rows, n]() {
    if (!ai->needs_grad) return;
    for_dtype(oi->dtype, [&]<typename T>() {
      const T* y = detail::data_of<T>(oi.get()).data();
      const T* g = detail::grad_of<T>(oi.get()).data();
      T* ga = detail::grad_of<T>(ai.get()).data();
      for (int64_t r = 0; r < rows; ++r) {
        const T* yr = y + r * n;
        const T* gr = g + r * n;
        T* gar = ga + r * n;
        T m1 = 0, m2 = 0;
        for (int64_t j = 0; j < n; ++j) {
          m1 += gr[j];
          m2 += gr[j] * yr[j];
        }
        m1 /= static_cast<T>(n);
        m2 /= static_cast<T>(n);
        const T inv = static_cast<T>((*inv_std)[static_cast<size_t>(r)]);
        for (int64_t j = 0; j < n; ++j) gar[j] += inv * (gr[j] - m1 - yr[j] * m2);
      }
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// upsample

Tensor upsample2x_nearest(const Tensor& a) {
  check_defined(a, "upsample2x_nearest");
  check(a.rank() == 3, "upsample2x_nearest: input must be [H,W,C]");
  const int64_t h = a.extent(0), w = a.extent(1), c = a.extent(2);
  Tensor out = Tensor::zeros({2 * h, 2 * w, c}, a.dtype());
  for_dtype(a.dtype(), [&]<typename T>() {
    const T* pa = detail::data_of<T>(a.impl()).data();
    T* po = detail::data_of<T>(out.impl()).data();
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        const T* src = pa + (y * w + x) * c;
        for (int64_t dy = 0; dy < 2; ++dy) {
          for (int64_t dx = 0; dx < 2; ++dx) {
            T* dst = po + ((2 * y + dy) * 2 * w + (2 * x + dx)) * c;
            std::copy(src, src + c, dst);
          }
        }
      }
    }
  });
  auto ai = a.impl_ptr();
  auto oi = out.impl_ptr();
  detail::record({&a}, {&out}, [ai, oi, h, w, c]() {
    if (!ai->needs_grad) return;
    for_dtype(oi->dtype, [&]<typename T>() {
      const T* g = detail::grad_of<T>(oi.get()).data();
      T* ga = detail::grad_of<T>(ai.get()).data();
      for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
          T* dst = ga + (y * w + x) * c;
          for (int64_t dy = 0; dy < 2; ++dy) {
            for (int64_t dx = 0; dx < 2; ++dx) {
              const T* src = g + ((2 * y + dy) * 2 * w + (2 * x + dx)) * c;
              for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
            }
          }
        }
      }
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// grad check

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  check_defined(x, "grad_check");
  check(x.dtype() == DType::F64, "grad_check: input must be f64");
  check(eps > 0.0, "grad_check: eps must be positive");
  Tensor xg = x.with_requires_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor y = f(xg);
    check(y.numel() == 1, "grad_check: objective must return a scalar");
    tape.backward(y);
  }
  const std::vector<double> analytic = xg.grad_values();
  // Errors are judged against the gradient's overall scale, not each element
  // alone; near-zero components would otherwise amplify difference noise.
  double gmax = 0.0;
  for (double a : analytic) gmax = std::max(gmax, std::abs(a));
  const double floor = std::max(1e-2 * gmax, 1e-8);

  Tensor xp = x.detached_copy();
  auto buf = xp.f64();
  double max_rel = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double orig = buf[static_cast<size_t>(i)];
    buf[static_cast<size_t>(i)] = orig + eps;
    const double yp = f(xp).item();
    buf[static_cast<size_t>(i)] = orig - eps;
    const double ym = f(xp).item();
    buf[static_cast<size_t>(i)] = orig;
    const double numeric = (yp - ym) / (2.0 * eps);
    const double a = analytic[static_cast<size_t>(i)];
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
  }
  return max_rel;
}

// ---------------------------------------------------------------------------
// serialization

void save_tensor(std::ostream& os, const Tensor& t) {
  check_defined(t, "save_tensor");
  check(t.dtype() == DType::F32, "save_tensor: f32 tensors only");
  check(t.rank() >= 1 && t.rank() <= 7, "save_tensor: rank must be in [1,7]");
  uint16_t header[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  header[0] = static_cast<uint16_t>(t.rank());
  for (int i = 0; i < t.rank(); ++i) {
    const int64_t e = t.extent(i);
    check(e <= 0xffff, "save_tensor: extent exceeds u16 range");
    header[i + 1] = static_cast<uint16_t>(e);
  }
  os.write(reinterpret_cast<const char*>(header), sizeof(header));
  auto d = t.f32();
  os.write(reinterpret_cast<const char*>(d.data()),
           static_cast<std::streamsize>(d.size() * sizeof(float)));
  if (!os) throw std::runtime_error("save_tensor: write failed");
}

Tensor load_tensor(std::istream& is) {
  uint16_t header[8];
  is.read(reinterpret_cast<char*>(header), sizeof(header));
  if (!is) throw std::runtime_error("load_tensor: truncated header");
  const int rank = header[0];
  if (rank < 1 || rank > 7) throw std::runtime_error("load_tensor: invalid rank");
  std::vector<int64_t> shape;
  for (int i = 0; i < rank; ++i) {
    if (header[i + 1] == 0) throw std::runtime_error("load_tensor: zero extent");
    shape.push_back(header[i + 1]);
  }
  Tensor t = Tensor::zeros(std::move(shape), DType::F32);
  auto d = t.f32();
  is.read(reinterpret_cast<char*>(d.data()),
          static_cast<std::streamsize>(d.size() * sizeof(float)));
  if (!is) throw std::runtime_error("load_tensor: truncated payload");
  return t;
}

void save_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_tensor_file: cannot open " + path);
  save_tensor(os, t);
}

Tensor load_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_tensor_file: cannot open " + path);
  return load_tensor(is);
}

}  // namespace lgedet
