#pragma once

#include <string>

#include "sgat/model.hpp"
#include "sgat/tensor.hpp"

namespace sgat {

/// How the channel weights n^c enter later differentiation.
enum class SaliencyMode {
  /// n^c is a constant; maps stay differentiable through the feature maps.
  Detached,
  /// n^c keeps its own graph (double backpropagation).
  Full,
};

const char* to_string(SaliencyMode mode);
SaliencyMode saliency_mode_from_string(const std::string& s);

struct ClassActivationMap {
  Tensor values;  // [N, spatial...], non-negative
  int class_id = 0;
};

/// n^c[i, m] = spatial mean of d y^c_i / d f^m_i, where y^c is the dropout-free
/// pre-softmax logit. Returns [N, channels].
Tensor gradcam_weights(const ForwardPass& pass, int class_id, SaliencyMode mode);

/// ReLU(sum_m n[:, m] * f^m) for given weights [N, C] and features [N, C, spatial...].
Tensor weighted_activation(const Tensor& features, const Tensor& weights);

ClassActivationMap activation_map(const ForwardPass& pass, int class_id, SaliencyMode mode);

/// Multilinear resize of one map ([spatial...]) with corner alignment, then
/// division by its maximum. An all-zero map stays zero. Not differentiable.
Tensor upsample_for_export(const Tensor& map, const Shape& target_extents);

/// 8-bit binary PGM of a [h, w] map with values in [0, 1].
void write_pgm(const std::string& path, const Tensor& map);

/// Raw little-endian f32 volume at path + ".raw" and a JSON sidecar at
/// path + ".json" listing extents and the preview slice; the preview slice
/// (the one with the largest total saliency along the first axis) is also
/// written as path + ".pgm".
void write_volume(const std::string& path, const Tensor& map);

}  // namespace sgat
