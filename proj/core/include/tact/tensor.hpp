#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tact/errors.hpp"

namespace tact {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename S>
struct TensorStorage {
  Shape shape;
  std::vector<S> values;
  std::vector<S> grad;  // empty until a backward pass touches this tensor
  bool requires_grad = false;
};

// Dense row-major tensor handle. Copies alias the same storage, so a copied
// handle is the same parameter (gradient accumulation across fan-out relies
// on this identity); use clone() for an independent tensor.
//
// Scalar type S is float (training precision) or double (verification
// precision); both instantiations are compiled into the library.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, S value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<S> values, bool requires_grad = false);
  static Tensor scalar(S value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  int rank() const { return static_cast<int>(s_->shape.size()); }
  int dim(int axis) const { return s_->shape[static_cast<std::size_t>(axis)]; }
  std::size_t size() const { return s_->values.size(); }
  bool is_scalar() const { return defined() && s_->values.size() == 1; }

  std::span<S> values() { return s_->values; }
  std::span<const S> values() const { return s_->values; }
  // Value of a one-element tensor.
  S item() const;

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool v) { s_->requires_grad = v; }

  bool has_grad() const { return defined() && !s_->grad.empty(); }
  std::span<S> grad() { return s_->grad; }
  std::span<const S> grad() const { return s_->grad; }
  // Allocates a zero gradient buffer if absent.
  void ensure_grad();
  // Drops the gradient buffer.
  void clear_grad() { s_->grad.clear(); }

  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return s_ == other.s_; }
  const void* storage_id() const { return s_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorStorage<S>> s) : s_(std::move(s)) {}
  std::shared_ptr<TensorStorage<S>> s_;
};

// Records one backward rule per forward operation. Append-only during the
// forward pass; backward() replays the rules in reverse recording order.
// The tape owns references to every tensor it touches, so activations stay
// alive until clear().
template <typename S>
class Tape {
 public:
  void record(const char* op, std::function<void()> backward_fn) {
    entries_.push_back(Entry{op, std::move(backward_fn)});
  }

  // Seeds d(loss)/d(loss) = 1 and replays all rules in reverse. Gradients
  // accumulate additively across fan-out and across forward/backward rounds;
  // call once per recorded forward, then clear().
  void backward(Tensor<S> loss);

  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    const char* op;
    std::function<void()> fn;
  };
  std::vector<Entry> entries_;
};

// ---------------------------------------------------------------------------
// Operations. Every op validates shapes, computes the forward value and, when
// any input requires a gradient, records its backward rule on the tape.
// ---------------------------------------------------------------------------

// [M x K] * [K x P] -> [M x P]
template <typename S>
Tensor<S> matmul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b);

// 2-D transpose.
template <typename S>
Tensor<S> transpose_last_two(Tape<S>& tape, const Tensor<S>& x);

// Same-shape elementwise add, or a rank-1 bias added over the last axis
// (the only broadcast supported).
template <typename S>
Tensor<S> add(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& y);

// Same-shape Hadamard product.
template <typename S>
Tensor<S> mul(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& y);

template <typename S>
Tensor<S> scale(Tape<S>& tape, const Tensor<S>& x, S c);

template <typename S>
Tensor<S> relu(Tape<S>& tape, const Tensor<S>& x);

// Row-wise softmax of a 2-D tensor, computed with max subtraction.
template <typename S>
Tensor<S> softmax_rows(Tape<S>& tape, const Tensor<S>& x);

// Normalizes over the last axis: per slice, (x - mean) / sqrt(var + eps),
// then gain and bias (both rank-1 of the last extent).
template <typename S>
Tensor<S> layer_norm(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& gain,
                     const Tensor<S>& bias, S eps = static_cast<S>(1e-5));

template <typename S>
Tensor<S> concat(Tape<S>& tape, const std::vector<Tensor<S>>& parts, int axis);

// Inverse of concat; sizes must sum to the axis extent.
template <typename S>
std::vector<Tensor<S>> split(Tape<S>& tape, const Tensor<S>& x,
                             const std::vector<int>& sizes, int axis);

// Removes the axis, averaging over it.
template <typename S>
Tensor<S> mean_over_axis(Tape<S>& tape, const Tensor<S>& x, int axis);

template <typename S>
Tensor<S> reshape(Tape<S>& tape, const Tensor<S>& x, Shape shape);

// Sum of all entries -> rank-0 scalar.
template <typename S>
Tensor<S> sum_all(Tape<S>& tape, const Tensor<S>& x);

// Throws NumericError if any value is non-finite (used unconditionally by
// the training loop; ops call it per-result in debug builds only).
template <typename S>
void check_finite(const Tensor<S>& t, const char* what);

}  // namespace tact
