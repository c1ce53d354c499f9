#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "sgat/error.hpp"

namespace sgat {

enum class DType : std::uint8_t { F32, F64 };

/// Element type used by factory functions when none is given. Process-wide;
/// switch to F64 for finite-difference verification.
DType default_dtype();
void set_default_dtype(DType dtype);

/// RAII switch of the default element type.
class DTypeScope {
 public:
  explicit DTypeScope(DType dtype) : saved_(default_dtype()) { set_default_dtype(dtype); }
  ~DTypeScope() { set_default_dtype(saved_); }
  DTypeScope(const DTypeScope&) = delete;
  DTypeScope& operator=(const DTypeScope&) = delete;

 private:
  DType saved_;
};

/// When enabled, every primitive screens its output for NaN/Inf and throws
/// NumericError.
bool checked_mode();
void set_checked_mode(bool enabled);

/// Process-wide malloc settings that avoid page-fault churn from large,
/// short-lived tensor buffers. Call once at startup; no-op off glibc.
void tune_allocator();

/// Thread-local switch controlling whether operations are recorded for
/// differentiation.
bool grad_enabled();
void set_grad_enabled(bool enabled);

class NoGradGuard {
 public:
  NoGradGuard() : saved_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(saved_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled) : saved_(grad_enabled()) { set_grad_enabled(enabled); }
  ~GradModeGuard() { set_grad_enabled(saved_); }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool saved_;
};

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;
struct Node;

using Storage = std::variant<std::vector<float>, std::vector<double>>;

struct TensorImpl {
  Shape shape;
  std::shared_ptr<Storage> storage;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

/// Dense row-major N-dimensional array. Copies are shallow: two Tensor
/// handles may refer to the same storage and graph node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dtype = default_dtype());
  static Tensor ones(Shape shape, DType dtype = default_dtype());
  static Tensor full(Shape shape, double value, DType dtype = default_dtype());
  static Tensor scalar(double value, DType dtype = default_dtype());
  static Tensor from(Shape shape, std::span<const double> values, DType dtype = default_dtype());
  static Tensor from(Shape shape, std::initializer_list<double> values,
                     DType dtype = default_dtype());
  static Tensor from_floats(Shape shape, std::span<const float> values,
                            DType dtype = default_dtype());
  template <class T>
  static Tensor adopt(Shape shape, std::vector<T> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::int64_t dim(int axis) const;
  std::int64_t numel() const;
  DType dtype() const;

  bool requires_grad() const;
  /// Only valid on leaves.
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const;
  const std::shared_ptr<Node>& grad_fn() const;

  template <class T>
  std::span<const T> data() const {
    return std::get<std::vector<T>>(*impl_->storage);
  }
  /// Direct element access for in-place updates (optimizer steps, data
  /// assembly). The caller guarantees no live graph depends on the values.
  template <class T>
  std::span<T> mutable_data() {
    return std::get<std::vector<T>>(*impl_->storage);
  }

  double item() const;
  double value(std::int64_t flat_index) const;
  std::vector<double> values() const;
  std::vector<float> to_floats() const;

  /// Same values, shared storage, no graph linkage.
  Tensor detach() const;
  /// Deep copy without graph linkage.
  Tensor clone() const;
  Tensor to(DType dtype) const;

  /// Identity of the underlying tensor object (stable across copies).
  const void* id() const { return impl_.get(); }

  static Tensor from_impl(std::shared_ptr<TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

template <class T>
Tensor Tensor::adopt(Shape shape, std::vector<T> values) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
    throw ShapeError("element count " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->storage = std::make_shared<Storage>(std::move(values));
  return from_impl(std::move(impl));
}

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) {
    return DType::F32;
  } else {
    return DType::F64;
  }
}

/// Calls fn with a value-initialized float or double matching dtype.
template <class F>
decltype(auto) visit_dtype(DType dtype, F&& fn) {
  if (dtype == DType::F32) {
    return fn(float{});
  }
  return fn(double{});
}

}  // namespace sgat
