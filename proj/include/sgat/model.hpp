#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "sgat/ops.hpp"
#include "sgat/rng.hpp"
#include "sgat/tensor.hpp"

namespace sgat {

struct ModelConfig {
  int spatial_rank = 2;
  Shape input_extents{30, 36};
  std::int64_t in_channels = 1;
  std::vector<std::int64_t> conv_filters{8, 8, 16};
  int kernel_extent = 4;
  int pool_extent = 2;
  double dropout_p = 0.5;
  double l2_coeff = 0.001;
  int n_classes = 2;
  double bn_eps = 1e-5;
  double bn_momentum = 0.9;

  /// Throws ConfigError when the architecture cannot be built.
  void validate() const;
  /// Spatial extents of the last conv block's activations (before its pool).
  Shape feature_extents() const;
  /// Spatial extents after the last pool.
  Shape pooled_extents() const;
  std::int64_t flattened_size() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct ConvBlock {
  Tensor kernel;  // [Co, Ci, k...]
  Tensor bias;    // [Co]
  Tensor bn_scale;
  Tensor bn_shift;
  Tensor running_mean;
  Tensor running_var;
};

struct Model {
  ModelConfig config;
  std::vector<ConvBlock> blocks;
  Tensor dense_weight;  // [n_classes, flattened]
  Tensor dense_bias;    // [n_classes]
  std::uint64_t step = 0;

  /// Trainable tensors in a fixed order.
  std::vector<Tensor> parameters() const;
  /// Conv and dense weights (the L2-penalized subset).
  std::vector<Tensor> weights() const;
  /// Every stored tensor, trainable or not, with its checkpoint name.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  /// Deep copy; the copy shares no storage with this model.
  Model clone() const;
};

/// He-normal conv/dense weights, zero biases, unit BN scale, zero BN shift.
Model init_model(const ModelConfig& config, std::uint64_t seed);

struct ForwardOptions {
  /// Normalize with batch statistics instead of running statistics.
  bool batch_stats = false;
  /// Apply dropout to the flattened features; needs rng.
  bool dropout = false;
  Rng* rng = nullptr;

  static ForwardOptions inference() { return {}; }
  static ForwardOptions training(Rng& rng) { return {true, true, &rng}; }
};

/// Everything later stages need from one forward evaluation.
struct ForwardPass {
  Tensor logits;        // [N, classes], pre-softmax, dropout applied if enabled
  Tensor clean_logits;  // same network without dropout
  Tensor features;      // last conv block activations after ReLU, before pooling
  std::vector<BatchNormStats> batch_stats;
};

/// batch: [N, in_channels, spatial...]
ForwardPass forward(const Model& model, const Tensor& batch,
                    const ForwardOptions& options = ForwardOptions::inference());

/// Softmax of inference-mode logits, computed without recording.
Tensor predict_proba(const Model& model, const Tensor& batch);

/// l2_coeff * sum of squared conv and dense weights.
Tensor l2_penalty(const Model& model);

/// Exponential moving average of BN statistics with the configured momentum.
void update_running_stats(Model& model, const std::vector<BatchNormStats>& stats);

std::string serialize_checkpoint(const Model& model);
Model deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace sgat
