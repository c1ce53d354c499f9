#include "sgat/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "sgat/autograd.hpp"

namespace sgat {

namespace {

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ShapeError(std::string(op) + ": mixed element types");
  }
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::int64_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::int64_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Output-contiguous iteration plan over a broadcast, with adjacent
// compatible axes merged so inner runs are as long as possible.
struct BroadcastPlan {
  std::vector<std::int64_t> sizes;
  std::vector<std::int64_t> stride_a;
  std::vector<std::int64_t> stride_b;
};

std::vector<std::int64_t> aligned_strides(const Shape& out, const Shape& in) {
  const std::size_t rank = out.size();
  if (in.size() > rank) {
    throw ShapeError("cannot broadcast " + shape_str(in) + " to " + shape_str(out));
  }
  std::vector<std::int64_t> strides(rank, 0);
  std::int64_t s = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i_in = in.size() - 1 - k;
    const std::size_t i_out = rank - 1 - k;
    if (in[i_in] == out[i_out]) {
      strides[i_out] = out[i_out] == 1 ? 0 : s;
    } else if (in[i_in] == 1) {
      strides[i_out] = 0;
    } else {
      throw ShapeError("cannot broadcast " + shape_str(in) + " to " + shape_str(out));
    }
    s *= in[i_in];
  }
  return strides;
}

BroadcastPlan make_plan(const Shape& out, const Shape& a, const Shape& b) {
  auto sa = aligned_strides(out, a);
  auto sb = aligned_strides(out, b);
  BroadcastPlan plan;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] == 1) {
      continue;
    }
    plan.sizes.push_back(out[i]);
    plan.stride_a.push_back(sa[i]);
    plan.stride_b.push_back(sb[i]);
  }
  if (plan.sizes.empty()) {
    plan.sizes = {1};
    plan.stride_a = {0};
    plan.stride_b = {0};
    return plan;
  }
  // Merge from the innermost axis outwards.
  BroadcastPlan merged;
  merged.sizes = {plan.sizes.back()};
  merged.stride_a = {plan.stride_a.back()};
  merged.stride_b = {plan.stride_b.back()};
  for (std::size_t k = plan.sizes.size() - 1; k-- > 0;) {
    const auto inner_size = merged.sizes.front();
    const bool ok_a = plan.stride_a[k] == merged.stride_a.front() * inner_size;
    const bool ok_b = plan.stride_b[k] == merged.stride_b.front() * inner_size;
    if (ok_a && ok_b) {
      merged.sizes.front() *= plan.sizes[k];
    } else {
      merged.sizes.insert(merged.sizes.begin(), plan.sizes[k]);
      merged.stride_a.insert(merged.stride_a.begin(), plan.stride_a[k]);
      merged.stride_b.insert(merged.stride_b.begin(), plan.stride_b[k]);
    }
  }
  return merged;
}

// Calls run(out_offset, a_offset, b_offset, length, inner_stride_a,
// inner_stride_b) for each innermost run in output order.
template <class Run>
void for_each_run(const BroadcastPlan& p, Run&& run) {
  const std::size_t outer = p.sizes.size() - 1;
  const std::int64_t len = p.sizes.back();
  if (outer == 0) {
    run(0, 0, 0, len, p.stride_a.back(), p.stride_b.back());
    return;
  }
  std::vector<std::int64_t> idx(outer, 0);
  std::int64_t out_off = 0;
  std::int64_t a_off = 0;
  std::int64_t b_off = 0;
  while (true) {
    run(out_off, a_off, b_off, len, p.stride_a.back(), p.stride_b.back());
    out_off += len;
    std::size_t d = outer - 1;
    while (true) {
      ++idx[d];
      a_off += p.stride_a[d];
      b_off += p.stride_b[d];
      if (idx[d] < p.sizes[d]) {
        break;
      }
      a_off -= p.stride_a[d] * p.sizes[d];
      b_off -= p.stride_b[d] * p.sizes[d];
      idx[d] = 0;
      if (d == 0) {
        return;
      }
      --d;
    }
  }
}

template <class T>
Tensor new_tensor(const Shape& shape) {
  return Tensor::adopt<T>(shape, std::vector<T>(static_cast<std::size_t>(shape_numel(shape))));
}

template <class Op>
Tensor binary_values(const Tensor& a, const Tensor& b, const char* name, Op op) {
  require_same_dtype(a, b, name);
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  return visit_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Tensor out = new_tensor<T>(out_shape);
    T* o = out.mutable_data<T>().data();
    const T* pa = a.data<T>().data();
    const T* pb = b.data<T>().data();
    if (a.shape() == b.shape()) {
      const auto n = out.numel();
      for (std::int64_t i = 0; i < n; ++i) {
        o[i] = op(pa[i], pb[i]);
      }
      return out;
    }
    auto plan = make_plan(out_shape, a.shape(), b.shape());
    for_each_run(plan, [&](std::int64_t oo, std::int64_t ao, std::int64_t bo, std::int64_t len,
                           std::int64_t sa, std::int64_t sb) {
      T* __restrict dst = o + oo;
      const T* xa = pa + ao;
      const T* xb = pb + bo;
      if (sa == 1 && sb == 1) {
        for (std::int64_t i = 0; i < len; ++i) dst[i] = op(xa[i], xb[i]);
      } else if (sa == 1) {
        const T vb = *xb;
        for (std::int64_t i = 0; i < len; ++i) dst[i] = op(xa[i], vb);
      } else if (sb == 1) {
        const T va = *xa;
        for (std::int64_t i = 0; i < len; ++i) dst[i] = op(va, xb[i]);
      } else {
        const T r = op(*xa, *xb);
        for (std::int64_t i = 0; i < len; ++i) dst[i] = r;
      }
    });
    return out;
  });
}

template <class Op>
Tensor unary_values(const Tensor& a, Op op) {
  return visit_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Tensor out = new_tensor<T>(a.shape());
    T* __restrict o = out.mutable_data<T>().data();
    const T* x = a.data<T>().data();
    const auto n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) {
      o[i] = op(x[i]);
    }
    return out;
  });
}

Tensor sum_to_values(const Tensor& a, const Shape& target) {
  if (a.shape() == target) {
    return a.detach();
  }
  // Validates that target broadcasts to a's shape.
  auto plan = make_plan(a.shape(), target, target);
  std::vector<double> acc(static_cast<std::size_t>(shape_numel(target)), 0.0);
  visit_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* src = a.data<T>().data();
    for_each_run(plan, [&](std::int64_t oo, std::int64_t to, std::int64_t, std::int64_t len,
                           std::int64_t st, std::int64_t) {
      const T* s = src + oo;
      if (st == 0) {
        double r = 0.0;
        for (std::int64_t i = 0; i < len; ++i) r += static_cast<double>(s[i]);
        acc[static_cast<std::size_t>(to)] += r;
      } else {
        double* d = acc.data() + to;
        for (std::int64_t i = 0; i < len; ++i) d[i] += static_cast<double>(s[i]);
      }
    });
  });
  return Tensor::from(target, acc, a.dtype());
}

Tensor expand_values(const Tensor& a, const Shape& target) {
  if (a.shape() == target) {
    return a.detach();
  }
  auto plan = make_plan(target, a.shape(), a.shape());
  return visit_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Tensor out = new_tensor<T>(target);
    T* o = out.mutable_data<T>().data();
    const T* src = a.data<T>().data();
    for_each_run(plan, [&](std::int64_t oo, std::int64_t ao, std::int64_t, std::int64_t len,
                           std::int64_t sa, std::int64_t) {
      if (sa == 0) {
        std::fill(o + oo, o + oo + len, src[ao]);
      } else {
        std::copy(src + ao, src + ao + len, o + oo);
      }
    });
    return out;
  });
}

Tensor constant_mask(const Tensor& a, double (*pred)(double)) {
  return unary_values(a, [pred](auto v) {
    using T = decltype(v);
    return static_cast<T>(pred(static_cast<double>(v)));
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor v = binary_values(a, b, "add", [](auto x, auto y) { return x + y; });
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  return record(std::move(v), "add", {a, b}, [sa, sb](const Tensor& g, const std::vector<bool>& n) {
    return std::vector<Tensor>{n[0] ? sum_to(g, sa) : Tensor(), n[1] ? sum_to(g, sb) : Tensor()};
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tensor v = binary_values(a, b, "sub", [](auto x, auto y) { return x - y; });
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  return record(std::move(v), "sub", {a, b}, [sa, sb](const Tensor& g, const std::vector<bool>& n) {
    return std::vector<Tensor>{n[0] ? sum_to(g, sa) : Tensor(),
                               n[1] ? sum_to(neg(g), sb) : Tensor()};
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tensor v = binary_values(a, b, "mul", [](auto x, auto y) { return x * y; });
  return record(std::move(v), "mul", {a, b}, [a, b](const Tensor& g, const std::vector<bool>& n) {
    return std::vector<Tensor>{n[0] ? sum_to(mul(g, b), a.shape()) : Tensor(),
                               n[1] ? sum_to(mul(g, a), b.shape()) : Tensor()};
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  Tensor v = binary_values(a, b, "div", [](auto x, auto y) { return x / y; });
  return record(std::move(v), "div", {a, b}, [a, b](const Tensor& g, const std::vector<bool>& n) {
    Tensor ga;
    Tensor gb;
    if (n[0]) {
      ga = sum_to(div(g, b), a.shape());
    }
    if (n[1]) {
      gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape());
    }
    return std::vector<Tensor>{ga, gb};
  });
}

Tensor neg(const Tensor& a) {
  Tensor v = unary_values(a, [](auto x) { return -x; });
  return record(std::move(v), "neg", {a}, [](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{neg(g)};
  });
}

Tensor mul_scalar(const Tensor& a, double s) {
  Tensor v = unary_values(a, [s](auto x) { return x * static_cast<decltype(x)>(s); });
  return record(std::move(v), "mul_scalar", {a}, [s](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{mul_scalar(g, s)};
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  Tensor v = unary_values(a, [s](auto x) { return x + static_cast<decltype(x)>(s); });
  return record(std::move(v), "add_scalar", {a}, [](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{g};
  });
}

Tensor pow_scalar(const Tensor& a, double p) {
  Tensor v;
  if (p == 2.0) {
    v = unary_values(a, [](auto x) { return x * x; });
  } else if (p == -0.5) {
    v = unary_values(a, [](auto x) { return decltype(x)(1) / std::sqrt(x); });
  } else {
    v = unary_values(a, [p](auto x) { return static_cast<decltype(x)>(std::pow(x, p)); });
  }
  return record(std::move(v), "pow_scalar", {a}, [a, p](const Tensor& g, const std::vector<bool>&) {
    if (p == 1.0) {
      return std::vector<Tensor>{g};
    }
    if (p == 0.0) {
      return std::vector<Tensor>{mul_scalar(g, 0.0)};
    }
    Tensor d = p == 2.0 ? mul_scalar(a, 2.0) : mul_scalar(pow_scalar(a, p - 1.0), p);
    return std::vector<Tensor>{mul(g, d)};
  });
}

Tensor square(const Tensor& a) { return pow_scalar(a, 2.0); }

Tensor exp(const Tensor& a) {
  Tensor v = unary_values(a, [](auto x) { return std::exp(x); });
  return record(std::move(v), "exp", {a}, [a](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{mul(g, exp(a))};
  });
}

Tensor log(const Tensor& a) {
  Tensor v = unary_values(a, [](auto x) { return std::log(x); });
  return record(std::move(v), "log", {a}, [a](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{div(g, a)};
  });
}

Tensor relu(const Tensor& a) {
  Tensor v = unary_values(a, [](auto x) { return x > decltype(x)(0) ? x : decltype(x)(0); });
  return record(std::move(v), "relu", {a}, [a](const Tensor& g, const std::vector<bool>&) {
    // The mask is locally constant; its own derivative is zero a.e.
    Tensor mask = constant_mask(a, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
    return std::vector<Tensor>{mul(g, mask)};
  });
}

Tensor abs(const Tensor& a) {
  Tensor v = unary_values(a, [](auto x) { return std::abs(x); });
  return record(std::move(v), "abs", {a}, [a](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{mul(g, sign_of(a))};
  });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  Tensor v = unary_values(a, [lo, hi](auto x) {
    using T = decltype(x);
    return std::clamp(x, static_cast<T>(lo), static_cast<T>(hi));
  });
  return record(std::move(v), "clamp", {a}, [a, lo, hi](const Tensor& g, const std::vector<bool>&) {
    Tensor mask = unary_values(a, [lo, hi](auto x) {
      using T = decltype(x);
      return (x >= static_cast<T>(lo) && x <= static_cast<T>(hi)) ? T(1) : T(0);
    });
    return std::vector<Tensor>{mul(g, mask)};
  });
}

Tensor mul_const(const Tensor& a, const Tensor& constant) { return mul(a, constant.detach()); }

Tensor sign_of(const Tensor& a) {
  return unary_values(a, [](auto x) {
    using T = decltype(x);
    return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0));
  });
}

// ---------------------------------------------------------------------------
// Reductions and shapes

Tensor sum(const Tensor& a) {
  Tensor v = sum_to_values(a, Shape{});
  const Shape sa = a.shape();
  return record(std::move(v), "sum", {a}, [sa](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{expand(g, sa)};
  });
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_to(const Tensor& a, const Shape& shape) {
  if (a.shape() == shape) {
    return a;
  }
  Tensor v = sum_to_values(a, shape);
  const Shape sa = a.shape();
  return record(std::move(v), "sum_to", {a}, [sa](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{expand(g, sa)};
  });
}

Tensor expand(const Tensor& a, const Shape& shape) {
  if (a.shape() == shape) {
    return a;
  }
  Tensor v = expand_values(a, shape);
  const Shape sa = a.shape();
  return record(std::move(v), "expand", {a}, [sa](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{sum_to(g, sa)};
  });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->storage = a.impl()->storage;
  Tensor v = Tensor::from_impl(std::move(impl));
  const Shape sa = a.shape();
  return record(std::move(v), "reshape", {a}, [sa](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{reshape(g, sa)};
  });
}

Tensor flatten(const Tensor& a) {
  if (a.rank() < 1) {
    throw ShapeError("flatten needs a batch axis");
  }
  return reshape(a, {a.dim(0), a.numel() / a.dim(0)});
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) {
    throw ShapeError("transpose expects rank 2, got " + shape_str(a.shape()));
  }
  const auto rows = a.dim(0);
  const auto cols = a.dim(1);
  Tensor v = visit_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Tensor out = new_tensor<T>({cols, rows});
    T* o = out.mutable_data<T>().data();
    const T* x = a.data<T>().data();
    for (std::int64_t i = 0; i < rows; ++i) {
      for (std::int64_t j = 0; j < cols; ++j) {
        o[j * rows + i] = x[i * cols + j];
      }
    }
    return out;
  });
  return record(std::move(v), "transpose", {a}, [](const Tensor& g, const std::vector<bool>&) {
    return std::vector<Tensor>{transpose(g)};
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  require_same_dtype(a, b, "matmul");
  const auto m = a.dim(0);
  const auto k = a.dim(1);
  const auto n = b.dim(1);
  Tensor v = visit_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Tensor out = new_tensor<T>({m, n});
    T* o = out.mutable_data<T>().data();
    const T* x = a.data<T>().data();
    const T* y = b.data<T>().data();
    for (std::int64_t i = 0; i < m; ++i) {
      T* __restrict row = o + i * n;
      for (std::int64_t p = 0; p < k; ++p) {
        const T s = x[i * k + p];
        const T* yr = y + p * n;
        for (std::int64_t j = 0; j < n; ++j) row[j] += s * yr[j];
      }
    }
    return out;
  });
  return record(std::move(v), "matmul", {a, b}, [a, b](const Tensor& g, const std::vector<bool>& nd) {
    return std::vector<Tensor>{nd[0] ? matmul(g, transpose(b)) : Tensor(),
                               nd[1] ? matmul(transpose(a), g) : Tensor()};
  });
}

Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add(matmul(x, transpose(weight)), bias);
}

Tensor max_last_detached(const Tensor& a) {
  const auto last = a.dim(-1);
  Shape out_shape = a.shape();
  out_shape.back() = 1;
  return visit_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Tensor out = new_tensor<T>(out_shape);
    T* o = out.mutable_data<T>().data();
    const T* x = a.data<T>().data();
    const auto rows = a.numel() / last;
    for (std::int64_t r = 0; r < rows; ++r) {
      o[r] = *std::max_element(x + r * last, x + (r + 1) * last);
    }
    return out;
  });
}

Tensor softmax_last(const Tensor& a) {
  Tensor e = exp(sub(a, max_last_detached(a)));
  Shape reduced = a.shape();
  reduced.back() = 1;
  return div(e, sum_to(e, reduced));
}

Tensor channel_view(const Tensor& v, int rank) {
  Shape s(static_cast<std::size_t>(rank), 1);
  s[1] = v.numel();
  return reshape(v, s);
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

// Geometry of a "same" convolution with spatial axes padded to 3D
// (2D inputs use depth 1 and kernel depth 1). Planes are stored with
// padded strides; outputs are computed on the padded grid and cropped.
struct ConvGeometry {
  std::int64_t n = 0, ci = 0, co = 0;
  std::int64_t d = 1, h = 1, w = 1;
  std::int64_t kd = 1, kh = 1, kw = 1;
  std::int64_t pd = 0, ph = 0, pw = 0;
  std::int64_t dp = 1, hp = 1, wp = 1;
  std::int64_t plane = 0;  // dp * hp * wp
  std::int64_t run = 0;    // length of the padded-stride output span
};

ConvGeometry conv_geometry(const Shape& input, const Shape& kernel) {
  const auto rank = input.size();
  if ((rank != 4 && rank != 5) || kernel.size() != rank) {
    throw ShapeError("conv_same expects [N, C, spatial...] with 2 or 3 spatial axes; got input " +
                     shape_str(input) + ", kernel " + shape_str(kernel));
  }
  if (input[1] != kernel[1]) {
    throw ShapeError("conv_same channel mismatch: input " + shape_str(input) + ", kernel " +
                     shape_str(kernel));
  }
  ConvGeometry g;
  g.n = input[0];
  g.ci = input[1];
  g.co = kernel[0];
  if (rank == 5) {
    g.d = input[2];
    g.kd = kernel[2];
  }
  g.h = input[rank - 2];
  g.w = input[rank - 1];
  g.kh = kernel[rank - 2];
  g.kw = kernel[rank - 1];
  g.pd = (g.kd - 1) / 2;
  g.ph = (g.kh - 1) / 2;
  g.pw = (g.kw - 1) / 2;
  g.dp = g.d + g.kd - 1;
  g.hp = g.h + g.kh - 1;
  g.wp = g.w + g.kw - 1;
  g.plane = g.dp * g.hp * g.wp;
  g.run = (g.d - 1) * g.hp * g.wp + (g.h - 1) * g.wp + g.w;
  return g;
}

Shape conv_output_shape(const Shape& input, std::int64_t out_channels) {
  Shape s = input;
  s[1] = out_channels;
  return s;
}

// Output channels and padded-grid positions handled per microkernel call;
// the accumulator block stays in vector registers.
constexpr std::int64_t kOutBlock = 4;
constexpr std::int64_t kVecPerBlock = 4;
template <class T>
constexpr std::int64_t kLanes = 32 / static_cast<std::int64_t>(sizeof(T));
template <class T>
constexpr std::int64_t kRunBlock = kVecPerBlock * kLanes<T>;

// 256-bit GCC/Clang vector types with element alignment, so loads from
// arbitrary offsets are allowed.
template <class T>
struct Vec;
template <>
struct Vec<float> {
  typedef float type __attribute__((vector_size(32), aligned(4)));
};
template <>
struct Vec<double> {
  typedef double type __attribute__((vector_size(32), aligned(8)));
};

std::vector<std::int64_t> tap_offsets(const ConvGeometry& g) {
  std::vector<std::int64_t> offsets;
  for (std::int64_t a = 0; a < g.kd; ++a)
    for (std::int64_t b = 0; b < g.kh; ++b)
      for (std::int64_t c = 0; c < g.kw; ++c) offsets.push_back((a * g.hp + b) * g.wp + c);
  return offsets;
}

// Number of padded-grid positions computed per plane: the output run
// rounded up to whole blocks.
template <class T>
std::int64_t run_span(const ConvGeometry& g) {
  return (g.run + kRunBlock<T> - 1) / kRunBlock<T> * kRunBlock<T>;
}

// Copies the [d, h, w] block of src into a zeroed padded plane at offset
// (z0, y0, x0).
template <class T>
void pad_into(const ConvGeometry& g, const T* src, std::int64_t z0, std::int64_t y0,
              std::int64_t x0, T* plane, std::int64_t plane_len) {
  std::fill(plane, plane + plane_len, T(0));
  for (std::int64_t z = 0; z < g.d; ++z) {
    for (std::int64_t y = 0; y < g.h; ++y) {
      const T* s = src + (z * g.h + y) * g.w;
      std::copy(s, s + g.w, plane + ((z + z0) * g.hp + (y + y0)) * g.wp + x0);
    }
  }
}

template <class T>
void gather_from(const ConvGeometry& g, const T* grid, T* dst) {
  for (std::int64_t z = 0; z < g.d; ++z) {
    for (std::int64_t y = 0; y < g.h; ++y) {
      const T* s = grid + (z * g.hp + y) * g.wp;
      std::copy(s, s + g.w, dst + (z * g.h + y) * g.w);
    }
  }
}

// out[n, o, p] = sum_c sum_t w[o, c, t] * padded_in[n, c, p + offset(t)],
// where the input sits at (z0, y0, x0) inside the padded grid. Forward
// convolution and its input adjoint (flipped, transposed kernel) both
// reduce to this.
template <class T>
void correlate(const ConvGeometry& g, std::int64_t z0, std::int64_t y0, std::int64_t x0,
               const T* in, std::int64_t cin, const T* w, std::int64_t cout, T* out) {
  constexpr std::int64_t JB = kRunBlock<T>;
  constexpr std::int64_t OB = kOutBlock;
  const std::int64_t spatial = g.d * g.h * g.w;
  const auto offsets = tap_offsets(g);
  const auto taps = static_cast<std::int64_t>(offsets.size());
  const std::int64_t span = run_span<T>(g);
  const std::int64_t plane_len = std::max(g.plane, offsets.back() + span);
  const std::int64_t oblocks = (cout + OB - 1) / OB;

  // Weights regrouped as [oblock, c, t, OB], zero for padding channels.
  std::vector<T> wr(static_cast<std::size_t>(oblocks * cin * taps * OB), T(0));
  for (std::int64_t o = 0; o < cout; ++o)
    for (std::int64_t c = 0; c < cin; ++c)
      for (std::int64_t t = 0; t < taps; ++t)
        wr[static_cast<std::size_t>((((o / OB) * cin + c) * taps + t) * OB + o % OB)] =
            w[(o * cin + c) * taps + t];

  std::vector<T> padded(static_cast<std::size_t>(cin * plane_len));
  std::vector<T> grid(static_cast<std::size_t>(oblocks * OB * span));
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t c = 0; c < cin; ++c) {
      pad_into(g, in + (n * cin + c) * spatial, z0, y0, x0, padded.data() + c * plane_len,
               plane_len);
    }
    for (std::int64_t ob = 0; ob < oblocks; ++ob) {
      for (std::int64_t j0 = 0; j0 < span; j0 += JB) {
        using V = typename Vec<T>::type;
        constexpr std::int64_t NV = kVecPerBlock;
        V acc[OB][NV] = {};
        for (std::int64_t c = 0; c < cin; ++c) {
          const T* plane = padded.data() + c * plane_len + j0;
          const T* wc = wr.data() + (ob * cin + c) * taps * OB;
          for (std::int64_t t = 0; t < taps; ++t) {
            const V* s = reinterpret_cast<const V*>(plane + offsets[static_cast<std::size_t>(t)]);
            V sv[NV];
            for (std::int64_t v = 0; v < NV; ++v) sv[v] = s[v];
            const T* wt = wc + t * OB;
            for (std::int64_t o = 0; o < OB; ++o) {
              const T wv = wt[o];
              for (std::int64_t v = 0; v < NV; ++v) acc[o][v] += sv[v] * wv;
            }
          }
        }
        for (std::int64_t o = 0; o < OB; ++o) {
          V* dst = reinterpret_cast<V*>(grid.data() + (ob * OB + o) * span + j0);
          for (std::int64_t v = 0; v < NV; ++v) dst[v] = acc[o][v];
        }
      }
    }
    for (std::int64_t o = 0; o < cout; ++o) {
      gather_from(g, grid.data() + o * span, out + (n * cout + o) * spatial);
    }
  }
}

template <class T>
void conv_forward_kernel(const ConvGeometry& g, const T* in, const T* k, T* out) {
  correlate(g, g.pd, g.ph, g.pw, in, g.ci, k, g.co, out);
}

template <class T>
void conv_grad_input_kernel(const ConvGeometry& g, const T* gout, const T* k, T* gin) {
  // Correlating the output gradient with the flipped kernel, channels
  // swapped, and the padding mirrored.
  const std::int64_t taps = g.kd * g.kh * g.kw;
  std::vector<T> flipped(static_cast<std::size_t>(g.co * g.ci * taps));
  for (std::int64_t o = 0; o < g.co; ++o)
    for (std::int64_t c = 0; c < g.ci; ++c)
      for (std::int64_t t = 0; t < taps; ++t)
        flipped[static_cast<std::size_t>((c * g.co + o) * taps + (taps - 1 - t))] =
            k[(o * g.ci + c) * taps + t];
  correlate(g, g.kd - 1 - g.pd, g.kh - 1 - g.ph, g.kw - 1 - g.pw, gout, g.co, flipped.data(),
            g.ci, gin);
}

template <class T>
void conv_grad_kernel_kernel(const ConvGeometry& g, const T* in, const T* gout, T* gk) {
  constexpr std::int64_t JB = kRunBlock<T>;
  constexpr std::int64_t OB = kOutBlock;
  const std::int64_t spatial = g.d * g.h * g.w;
  const auto offsets = tap_offsets(g);
  const auto taps = static_cast<std::int64_t>(offsets.size());
  const std::int64_t span = run_span<T>(g);
  const std::int64_t plane_len = std::max(g.plane, offsets.back() + span);
  const std::int64_t oblocks = (g.co + OB - 1) / OB;

  // Whole batch laid out up front so each (o, c, tap) sum is reduced once.
  const std::int64_t gstride = oblocks * OB * span;
  std::vector<T> padded(static_cast<std::size_t>(g.n * g.ci * plane_len));
  // Output gradients on the padded-stride grid, zero off-grid.
  std::vector<T> spread(static_cast<std::size_t>(g.n * gstride), T(0));
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t c = 0; c < g.ci; ++c) {
      pad_into(g, in + (n * g.ci + c) * spatial, g.pd, g.ph, g.pw,
               padded.data() + (n * g.ci + c) * plane_len, plane_len);
    }
    for (std::int64_t o = 0; o < g.co; ++o) {
      T* dst = spread.data() + n * gstride + o * span;
      for (std::int64_t z = 0; z < g.d; ++z)
        for (std::int64_t y = 0; y < g.h; ++y) {
          const T* s = gout + (n * g.co + o) * spatial + (z * g.h + y) * g.w;
          std::copy(s, s + g.w, dst + (z * g.hp + y) * g.wp);
        }
    }
  }
  std::vector<double> acc(static_cast<std::size_t>(g.co * g.ci * taps), 0.0);
  using V = typename Vec<T>::type;
  constexpr std::int64_t NV = kVecPerBlock;
  for (std::int64_t c = 0; c < g.ci; ++c) {
    for (std::int64_t t = 0; t < taps; ++t) {
      const std::int64_t off = offsets[static_cast<std::size_t>(t)];
      for (std::int64_t ob = 0; ob < oblocks; ++ob) {
        V part[OB][NV] = {};
        for (std::int64_t n = 0; n < g.n; ++n) {
          const T* src = padded.data() + (n * g.ci + c) * plane_len + off;
          const T* go = spread.data() + n * gstride + ob * OB * span;
          for (std::int64_t j0 = 0; j0 < span; j0 += JB) {
            const V* s = reinterpret_cast<const V*>(src + j0);
            V sv[NV];
            for (std::int64_t v = 0; v < NV; ++v) sv[v] = s[v];
            for (std::int64_t o = 0; o < OB; ++o) {
              const V* gg = reinterpret_cast<const V*>(go + o * span + j0);
              for (std::int64_t v = 0; v < NV; ++v) part[o][v] += gg[v] * sv[v];
            }
          }
        }
        for (std::int64_t o = 0; o < OB && ob * OB + o < g.co; ++o) {
          double total = 0.0;
          for (std::int64_t v = 0; v < NV; ++v)
            for (std::int64_t l = 0; l < kLanes<T>; ++l) total += static_cast<double>(part[o][v][l]);
          acc[static_cast<std::size_t>(((ob * OB + o) * g.ci + c) * taps + t)] = total;
        }
      }
    }
  }
  for (std::size_t i = 0; i < acc.size(); ++i) gk[i] = static_cast<T>(acc[i]);
}

Tensor conv_values(const Tensor& input, const Tensor& kernel) {
  require_same_dtype(input, kernel, "conv_same");
  auto g = conv_geometry(input.shape(), kernel.shape());
  return visit_dtype(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Tensor out = new_tensor<T>(conv_output_shape(input.shape(), g.co));
    conv_forward_kernel<T>(g, input.data<T>().data(), kernel.data<T>().data(),
                           out.mutable_data<T>().data());
    return out;
  });
}

}  // namespace

Tensor conv_same(const Tensor& input, const Tensor& kernel) {
  Tensor v = conv_values(input, kernel);
  return record(std::move(v), "conv_same", {input, kernel},
                [input, kernel](const Tensor& g, const std::vector<bool>& n) {
                  return std::vector<Tensor>{
                      n[0] ? conv_same_grad_input(g, kernel, input.shape()) : Tensor(),
                      n[1] ? conv_same_grad_kernel(input, g, kernel.shape()) : Tensor()};
                });
}

Tensor conv_same(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
  return add(conv_same(input, kernel), channel_view(bias, input.rank()));
}

Tensor conv_same_grad_input(const Tensor& grad_output, const Tensor& kernel,
                            const Shape& input_shape) {
  require_same_dtype(grad_output, kernel, "conv_same_grad_input");
  auto geo = conv_geometry(input_shape, kernel.shape());
  if (grad_output.shape() != conv_output_shape(input_shape, geo.co)) {
    throw ShapeError("conv_same_grad_input: gradient shape " + shape_str(grad_output.shape()));
  }
  Tensor v = visit_dtype(kernel.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Tensor out = new_tensor<T>(input_shape);
    conv_grad_input_kernel<T>(geo, grad_output.data<T>().data(), kernel.data<T>().data(),
                              out.mutable_data<T>().data());
    return out;
  });
  return record(std::move(v), "conv_same_grad_input", {grad_output, kernel},
                [grad_output, kernel](const Tensor& g, const std::vector<bool>& n) {
                  return std::vector<Tensor>{
                      n[0] ? conv_same(g, kernel) : Tensor(),
                      n[1] ? conv_same_grad_kernel(g, grad_output, kernel.shape()) : Tensor()};
                });
}

Tensor conv_same_grad_kernel(const Tensor& input, const Tensor& grad_output,
                             const Shape& kernel_shape) {
  require_same_dtype(input, grad_output, "conv_same_grad_kernel");
  auto geo = conv_geometry(input.shape(), kernel_shape);
  if (grad_output.shape() != conv_output_shape(input.shape(), geo.co)) {
    throw ShapeError("conv_same_grad_kernel: gradient shape " + shape_str(grad_output.shape()));
  }
  Tensor v = visit_dtype(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Tensor out = new_tensor<T>(kernel_shape);
    conv_grad_kernel_kernel<T>(geo, input.data<T>().data(), grad_output.data<T>().data(),
                               out.mutable_data<T>().data());
    return out;
  });
  return record(std::move(v), "conv_same_grad_kernel", {input, grad_output},
                [input, grad_output](const Tensor& g, const std::vector<bool>& n) {
                  return std::vector<Tensor>{
                      n[0] ? conv_same_grad_input(grad_output, g, input.shape()) : Tensor(),
                      n[1] ? conv_same(input, g) : Tensor()};
                });
}

// ---------------------------------------------------------------------------
// Pooling

Tensor gather_index(const Tensor& x, IndexMap index, const Shape& out_shape) {
  if (static_cast<std::int64_t>(index->size()) != shape_numel(out_shape)) {
    throw ShapeError("gather_index: index size does not match output shape");
  }
  Tensor v = visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Tensor out = new_tensor<T>(out_shape);
    T* o = out.mutable_data<T>().data();
    const T* src = x.data<T>().data();
    const auto& idx = *index;
    for (std::size_t i = 0; i < idx.size(); ++i) o[i] = src[idx[i]];
    return out;
  });
  const Shape xs = x.shape();
  return record(std::move(v), "gather_index", {x},
                [index, xs](const Tensor& g, const std::vector<bool>&) {
                  return std::vector<Tensor>{scatter_index(g, index, xs)};
                });
}

Tensor scatter_index(const Tensor& g, IndexMap index, const Shape& out_shape) {
  if (static_cast<std::int64_t>(index->size()) != g.numel()) {
    throw ShapeError("scatter_index: index size does not match gradient");
  }
  Tensor v = visit_dtype(g.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Tensor out = new_tensor<T>(out_shape);
    T* o = out.mutable_data<T>().data();
    const T* src = g.data<T>().data();
    const auto& idx = *index;
    for (std::size_t i = 0; i < idx.size(); ++i) o[idx[i]] += src[i];
    return out;
  });
  const Shape gs = g.shape();
  return record(std::move(v), "scatter_index", {g},
                [index, gs](const Tensor& gg, const std::vector<bool>&) {
                  return std::vector<Tensor>{gather_index(gg, index, gs)};
                });
}

Tensor maxpool(const Tensor& input, int window) {
  const auto& s = input.shape();
  if (s.size() != 4 && s.size() != 5) {
    throw ShapeError("maxpool expects [N, C, spatial...] with 2 or 3 spatial axes, got " +
                     shape_str(s));
  }
  if (window < 1) {
    throw ShapeError("maxpool window must be positive");
  }
  Shape out_shape = s;
  for (std::size_t a = 2; a < s.size(); ++a) {
    if (s[a] < window) {
      throw ShapeError("maxpool: extent " + std::to_string(s[a]) + " smaller than window " +
                       std::to_string(window));
    }
    out_shape[a] = s[a] / window;
  }
  const bool three = s.size() == 5;
  const std::int64_t d = three ? s[2] : 1;
  const std::int64_t h = s[s.size() - 2];
  const std::int64_t w = s[s.size() - 1];
  const std::int64_t od = three ? out_shape[2] : 1;
  const std::int64_t oh = out_shape[s.size() - 2];
  const std::int64_t ow = out_shape[s.size() - 1];
  const std::int64_t wd = three ? window : 1;
  const std::int64_t planes = s[0] * s[1];

  auto index = std::make_shared<std::vector<std::int64_t>>();
  index->reserve(static_cast<std::size_t>(planes * od * oh * ow));
  visit_dtype(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* x = input.data<T>().data();
    for (std::int64_t p = 0; p < planes; ++p) {
      const std::int64_t base = p * d * h * w;
      for (std::int64_t z = 0; z < od; ++z)
        for (std::int64_t y = 0; y < oh; ++y)
          for (std::int64_t xx = 0; xx < ow; ++xx) {
            const std::int64_t first = base + ((z * wd) * h + y * window) * w + xx * window;
            std::int64_t best = first;
            T best_v = x[first];
            // Branch-free selection; strict > keeps the first maximum.
            for (std::int64_t a = 0; a < wd; ++a)
              for (std::int64_t b = 0; b < window; ++b)
                for (std::int64_t c = 0; c < window; ++c) {
                  const std::int64_t i = first + (a * h + b) * w + c;
                  const bool take = x[i] > best_v;
                  best = take ? i : best;
                  best_v = take ? x[i] : best_v;
                }
            index->push_back(best);
          }
    }
  });
  // The selected positions are held fixed under differentiation.
  return gather_index(input, std::move(index), out_shape);
}

// ---------------------------------------------------------------------------
// Normalization and dropout

Tensor batchnorm_train(const Tensor& x, const Tensor& scale, const Tensor& shift, double eps,
                       BatchNormStats* stats) {
  if (x.rank() < 3 || scale.numel() != x.dim(1) || shift.numel() != x.dim(1)) {
    throw ShapeError("batchnorm: channel axis of " + shape_str(x.shape()) +
                     " does not match scale/shift length");
  }
  Shape cshape(static_cast<std::size_t>(x.rank()), 1);
  cshape[1] = x.dim(1);
  const double count = static_cast<double>(x.numel() / x.dim(1));
  Tensor mu = mul_scalar(sum_to(x, cshape), 1.0 / count);
  Tensor centered = sub(x, mu);
  Tensor var = mul_scalar(sum_to(square(centered), cshape), 1.0 / count);
  Tensor inv = pow_scalar(add_scalar(var, eps), -0.5);
  Tensor factor = mul(inv, channel_view(scale, x.rank()));
  if (stats != nullptr) {
    stats->mean = reshape(mu.detach(), {x.dim(1)});
    stats->var = reshape(var.detach(), {x.dim(1)});
  }
  return add(mul(centered, factor), channel_view(shift, x.rank()));
}

Tensor batchnorm_infer(const Tensor& x, const Tensor& scale, const Tensor& shift,
                       const Tensor& running_mean, const Tensor& running_var, double eps) {
  if (x.rank() < 3 || scale.numel() != x.dim(1) || running_mean.numel() != x.dim(1)) {
    throw ShapeError("batchnorm: channel axis of " + shape_str(x.shape()) +
                     " does not match parameter length");
  }
  Tensor inv = pow_scalar(add_scalar(running_var.detach(), eps), -0.5);
  Tensor factor = mul(channel_view(inv, x.rank()), channel_view(scale, x.rank()));
  Tensor centered = sub(x, channel_view(running_mean.detach(), x.rank()));
  return add(mul(centered, factor), channel_view(shift, x.rank()));
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p <= 0.0) {
    return x;
  }
  if (p >= 1.0) {
    throw ConfigError("dropout probability must be < 1");
  }
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(static_cast<std::size_t>(x.numel()));
  for (auto& m : mask) {
    m = rng.uniform() < p ? 0.0 : keep_scale;
  }
  return mul_const(x, Tensor::from(x.shape(), mask, x.dtype()));
}

}  // namespace sgat
