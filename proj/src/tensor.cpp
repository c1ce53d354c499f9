#include "sgat/tensor.hpp"

#include <atomic>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <sstream>

#include "sgat/autograd.hpp"

namespace sgat {

namespace {
std::atomic<DType> g_default_dtype{DType::F32};
std::atomic<bool> g_checked{false};
thread_local bool t_grad_enabled = true;

Tensor make_filled(Shape shape, DType dtype, double value) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return visit_dtype(dtype, [&](auto tag) {
    using T = decltype(tag);
    return Tensor::adopt<T>(std::move(shape), std::vector<T>(n, static_cast<T>(value)));
  });
}
}  // namespace

DType default_dtype() { return g_default_dtype.load(); }
void set_default_dtype(DType dtype) { g_default_dtype.store(dtype); }
bool checked_mode() { return g_checked.load(); }
void set_checked_mode(bool enabled) { g_checked.store(enabled); }
bool grad_enabled() { return t_grad_enabled; }
void set_grad_enabled(bool enabled) { t_grad_enabled = enabled; }

void tune_allocator() {
#if defined(__GLIBC__)
  // Keep freed tensor buffers in the heap instead of returning them to the
  // kernel; every step allocates and frees the same large blocks.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) {
    if (e <= 0) {
      throw ShapeError("non-positive extent in shape " + shape_str(shape));
    }
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? ", " : "") << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return make_filled(std::move(shape), dtype, 0.0); }
Tensor Tensor::ones(Shape shape, DType dtype) { return make_filled(std::move(shape), dtype, 1.0); }
Tensor Tensor::full(Shape shape, double value, DType dtype) {
  return make_filled(std::move(shape), dtype, value);
}
Tensor Tensor::scalar(double value, DType dtype) { return make_filled({}, dtype, value); }

Tensor Tensor::from(Shape shape, std::span<const double> values, DType dtype) {
  return visit_dtype(dtype, [&](auto tag) {
    using T = decltype(tag);
    return Tensor::adopt<T>(std::move(shape), std::vector<T>(values.begin(), values.end()));
  });
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, DType dtype) {
  return from(std::move(shape), std::span<const double>(values.begin(), values.size()), dtype);
}

Tensor Tensor::from_floats(Shape shape, std::span<const float> values, DType dtype) {
  return visit_dtype(dtype, [&](auto tag) {
    using T = decltype(tag);
    return Tensor::adopt<T>(std::move(shape), std::vector<T>(values.begin(), values.end()));
  });
}

const Shape& Tensor::shape() const {
  if (!impl_) {
    throw ContractError("use of undefined tensor");
  }
  return impl_->shape;
}

std::int64_t Tensor::dim(int axis) const {
  const auto& s = shape();
  if (axis < 0) {
    axis += static_cast<int>(s.size());
  }
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw ShapeError("axis out of range for shape " + shape_str(s));
  }
  return s[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::numel() const { return shape_numel(shape()); }

DType Tensor::dtype() const {
  if (!impl_) {
    throw ContractError("use of undefined tensor");
  }
  return std::holds_alternative<std::vector<float>>(*impl_->storage) ? DType::F32 : DType::F64;
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  if (!is_leaf()) {
    throw ContractError("requires_grad can only be set on leaf tensors");
  }
  impl_->requires_grad = value;
  return *this;
}

bool Tensor::is_leaf() const { return impl_ && impl_->grad_fn == nullptr; }

const std::shared_ptr<Node>& Tensor::grad_fn() const {
  static const std::shared_ptr<Node> none;
  return impl_ ? impl_->grad_fn : none;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  }
  return value(0);
}

double Tensor::value(std::int64_t i) const {
  return visit_dtype(dtype(), [&](auto tag) -> double {
    using T = decltype(tag);
    return static_cast<double>(data<T>()[static_cast<std::size_t>(i)]);
  });
}

std::vector<double> Tensor::values() const {
  return visit_dtype(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

std::vector<float> Tensor::to_floats() const {
  return visit_dtype(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto d = data<T>();
    return std::vector<float>(d.begin(), d.end());
  });
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape();
  impl->storage = impl_->storage;
  return from_impl(std::move(impl));
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape();
  impl->storage = std::make_shared<Storage>(*impl_->storage);
  return from_impl(std::move(impl));
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) {
    return clone();
  }
  return visit_dtype(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto d = data<T>();
    return visit_dtype(target, [&](auto out_tag) {
      using U = decltype(out_tag);
      return Tensor::adopt<U>(shape(), std::vector<U>(d.begin(), d.end()));
    });
  });
}

}  // namespace sgat
