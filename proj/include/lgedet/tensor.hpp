#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "lgedet/random.hpp"

namespace lgedet {

enum class DType : uint8_t { F32 = 0, F64 = 1 };

inline const char* dtype_name(DType dt) { return dt == DType::F32 ? "f32" : "f64"; }

class Tape;

namespace detail {

// Dense contiguous storage. Exactly one of data32/data64 is populated,
// selected by dtype. Gradient buffers share the dtype and are allocated
// lazily by the tape before a backward pass.
struct TensorImpl {
  std::vector<int64_t> shape;
  int64_t numel = 0;
  DType dtype = DType::F32;
  std::vector<float> data32;
  std::vector<double> data64;
  std::vector<float> grad32;
  std::vector<double> grad64;
  bool requires_grad = false;  // set on leaves only
  bool needs_grad = false;     // leaf flag, or derived from a needs_grad input
  Tape* producer = nullptr;    // tape that recorded the producing op, if any
};

}  // namespace detail

// Value-semantics handle over shared dense storage. Copying a Tensor aliases
// the same buffer; use detached_copy() for an independent clone.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape, DType dt = DType::F32,
                      bool requires_grad = false);
  static Tensor full(std::vector<int64_t> shape, double value, DType dt = DType::F32,
                     bool requires_grad = false);
  static Tensor from_values(std::vector<int64_t> shape, const std::vector<double>& values,
                            DType dt = DType::F32, bool requires_grad = false);
  // I.i.d. normal(0, stddev) entries drawn in flat index order.
  static Tensor randn(std::vector<int64_t> shape, Rng& rng, double stddev = 1.0,
                      DType dt = DType::F32, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int64_t>& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t extent(int axis) const;
  int64_t numel() const { return impl_ ? impl_->numel : 0; }
  DType dtype() const { return impl_->dtype; }
  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  bool needs_grad() const { return impl_ && impl_->needs_grad; }

  // Converting element access (any dtype).
  double value_at(int64_t flat) const;
  void set_value_at(int64_t flat, double v);
  std::vector<double> values() const;
  double grad_at(int64_t flat) const;
  std::vector<double> grad_values() const;
  double item() const;  // numel()==1

  // Typed raw access for hot paths. Dtype must match.
  std::span<float> f32();
  std::span<const float> f32() const;
  std::span<double> f64();
  std::span<const double> f64() const;
  std::span<float> grad_f32();
  std::span<double> grad_f64();
  bool has_grad() const;
  void ensure_grad();  // allocates and zeroes the gradient buffer if absent
  void zero_grad();

  Tensor to(DType dt) const;      // converting detached copy (identity dtype copies too)
  Tensor detached_copy() const;   // same dtype, fresh buffer, no grad history
  Tensor with_requires_grad() const;  // detached copy marked as a differentiable leaf

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }
  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Records one backward closure per forward op, in execution order. Append
// order is a topological order of the dataflow graph, so backward() is a
// single reverse sweep that visits each node exactly once. Node payloads and
// the sweep are free of any pointer-keyed iteration, which makes repeated
// backward passes bit-identical.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  size_t node_count() const { return nodes_.size(); }

  // Seeds d(root)/d(root) = 1 and propagates to every tracked tensor.
  // root must be a scalar produced by an op recorded on this tape.
  void backward(const Tensor& root);

  void clear();

  // Registration interface used by op implementations.
  void track(const std::shared_ptr<detail::TensorImpl>& t);
  void push_node(std::function<void()> bw);

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<std::shared_ptr<detail::TensorImpl>> tracked_;
  std::unordered_set<detail::TensorImpl*> tracked_set_;
};

// RAII activation of a tape. Ops record onto the innermost active tape;
// with no active tape they run as pure functions.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

namespace detail {

// Shared registration helper for ops defined outside tensor.cpp. Sets
// out.needs_grad from the inputs, and if a tape is active and any input
// needs a gradient, tracks all operands and records bw.
void record(std::initializer_list<const Tensor*> inputs, std::initializer_list<Tensor*> outputs,
            std::function<void()> bw);

template <typename T>
std::span<T> data_of(TensorImpl* impl);
template <>
inline std::span<float> data_of<float>(TensorImpl* impl) {
  return {impl->data32.data(), impl->data32.size()};
}
template <>
inline std::span<double> data_of<double>(TensorImpl* impl) {
  return {impl->data64.data(), impl->data64.size()};
}

template <typename T>
std::span<T> grad_of(TensorImpl* impl);
template <>
inline std::span<float> grad_of<float>(TensorImpl* impl) {
  return {impl->grad32.data(), impl->grad32.size()};
}
template <>
inline std::span<double> grad_of<double>(TensorImpl* impl) {
  return {impl->grad64.data(), impl->grad64.size()};
}

}  // namespace detail

// ---- Elementwise and scalar ops ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
// Natural log with a floor: log(max(x, floor)). Keeps saturated sigmoid
// outputs finite in f32.
Tensor log_floored(const Tensor& a, double floor = 1e-30);
Tensor abs_val(const Tensor& a);
Tensor square(const Tensor& a);

// ---- Reductions ----
Tensor sum(const Tensor& a);   // scalar [1]
Tensor mean(const Tensor& a);  // scalar [1]

// ---- Shape ops ----
Tensor reshape(const Tensor& a, std::vector<int64_t> shape);
// Slice along one axis: indices [start, start+length).
Tensor narrow(const Tensor& a, int axis, int64_t start, int64_t length);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor transpose2d(const Tensor& a);  // rank-2 [M,N] -> [N,M]

// ---- Linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);  // [M,K]x[K,N] -> [M,N]

// ---- Neural net ops (channel-last spatial layout [H,W,C]) ----
// kernel [kh,kw,Cin/groups,Cout], no bias. Output [H',W',Cout] with
// H' = (H + 2*padding - kh)/stride + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride = 1, int padding = 0,
              int groups = 1);
// Row-wise softmax along the last axis.
Tensor softmax_lastdim(const Tensor& a);
// Parameter-free layer norm over the last axis: (x - mu) / sqrt(var + eps).
Tensor layer_norm_lastdim(const Tensor& a, double eps = 1e-5);
// Nearest-neighbour 2x spatial upsampling of [H,W,C].
Tensor upsample2x_nearest(const Tensor& a);

// ---- Gradient checking ----
// Central-difference check of d(f(x))/dx against the tape gradient.
// f must map a tensor to a scalar tensor and be evaluated under the caller's
// control only through x (parameters may be captured). x must be F64.
// Returns the maximum relative error over all coordinates.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps = 1e-5);

// ---- Serialization ----
// Binary layout: 16-byte header of eight little-endian u16 words
// [rank, extent0..extent6-padded-with-0], then the payload as a flat
// little-endian float32 buffer. F32 tensors only; extents must fit u16.
void save_tensor(std::ostream& os, const Tensor& t);
Tensor load_tensor(std::istream& is);
void save_tensor_file(const std::string& path, const Tensor& t);
Tensor load_tensor_file(const std::string& path);

}  // namespace lgedet
