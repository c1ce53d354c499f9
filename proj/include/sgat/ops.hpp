#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "sgat/rng.hpp"
#include "sgat/tensor.hpp"

namespace sgat {

// Elementwise arithmetic with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

Tensor neg(const Tensor& a);
Tensor mul_scalar(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor pow_scalar(const Tensor& a, double exponent);
Tensor square(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

/// Multiplies by a tensor treated as a constant (no gradient flows into it).
Tensor mul_const(const Tensor& a, const Tensor& constant);

// Reductions and shape manipulation.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Sums a down to a shape it broadcasts from (adjoint of expand).
Tensor sum_to(const Tensor& a, const Shape& shape);
Tensor expand(const Tensor& a, const Shape& shape);
Tensor reshape(const Tensor& a, const Shape& shape);
/// [N, ...] -> [N, prod(...)]
Tensor flatten(const Tensor& a);
Tensor transpose(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b);

/// x[M, K] * weight[N, K]^T + bias[N]
Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Value-only per-row maximum over the last axis, keepdim; never
/// differentiated (used for softmax stabilisation).
Tensor max_last_detached(const Tensor& a);
Tensor softmax_last(const Tensor& a);

// Convolution over 2 or 3 spatial axes, "same" output extents. The total
// padding per axis is kernel-1, split floor((k-1)/2) before and the rest
// after, so even kernels pad one extra element on the trailing side.
/// input[N, Ci, spatial...] * kernel[Co, Ci, k...] -> [N, Co, spatial...]
Tensor conv_same(const Tensor& input, const Tensor& kernel);
/// conv_same plus a per-channel bias.
Tensor conv_same(const Tensor& input, const Tensor& kernel, const Tensor& bias);
/// Adjoint of conv_same in its input.
Tensor conv_same_grad_input(const Tensor& grad_output, const Tensor& kernel,
                            const Shape& input_shape);
/// Adjoint of conv_same in its kernel.
Tensor conv_same_grad_kernel(const Tensor& input, const Tensor& grad_output,
                             const Shape& kernel_shape);

/// Flat source positions selected by a pooling window, one per output.
using IndexMap = std::shared_ptr<const std::vector<std::int64_t>>;

/// Non-overlapping max pooling over every spatial axis of [N, C, spatial...].
/// Extents floor-divide; trailing remainders are dropped.
Tensor maxpool(const Tensor& input, int window);
/// out[i] = x[index[i]]
Tensor gather_index(const Tensor& x, IndexMap index, const Shape& out_shape);
/// out = zeros(shape); out[index[i]] += g[i]
Tensor scatter_index(const Tensor& g, IndexMap index, const Shape& out_shape);

/// Channel-wise batch statistics over [N, C, spatial...].
struct BatchNormStats {
  Tensor mean;  // [C], detached
  Tensor var;   // [C], biased, detached
};

/// Normalizes each channel with its batch mean/variance, then applies
/// scale and shift. Fills stats when given.
Tensor batchnorm_train(const Tensor& x, const Tensor& scale, const Tensor& shift, double eps,
                       BatchNormStats* stats = nullptr);
/// Normalizes with fixed (running) statistics.
Tensor batchnorm_infer(const Tensor& x, const Tensor& scale, const Tensor& shift,
                       const Tensor& running_mean, const Tensor& running_var, double eps);

/// Training-mode inverted dropout: Bernoulli keep mask scaled by 1/(1-p).
Tensor dropout(const Tensor& x, double p, Rng& rng);

/// Elementwise sign as a constant tensor (0 at 0).
Tensor sign_of(const Tensor& a);

/// Reshapes a per-channel vector [C] to [1, C, 1, ...] for a tensor of the
/// given rank.
Tensor channel_view(const Tensor& v, int rank);

}  // namespace sgat
