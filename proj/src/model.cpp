#include "sgat/model.hpp"

#include <cmath>

#include "sgat/binio.hpp"

namespace sgat {

namespace {

constexpr char kCheckpointMagic[8] = {'S', 'G', 'C', 'K', 'P', 'T', '1', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

Tensor he_normal(const Shape& shape, std::int64_t fan_in, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& x : v) {
    x = rng.normal(0.0, stddev);
  }
  return Tensor::from(shape, v);
}

Shape kernel_shape(const ModelConfig& c, std::int64_t out, std::int64_t in) {
  Shape s{out, in};
  for (int i = 0; i < c.spatial_rank; ++i) {
    s.push_back(c.kernel_extent);
  }
  return s;
}

// Zero-filled model with the right shapes; parameters flagged trainable.
Model empty_model(const ModelConfig& config) {
  config.validate();
  Model m;
  m.config = config;
  std::int64_t in = config.in_channels;
  for (auto out : config.conv_filters) {
    ConvBlock b;
    b.kernel = Tensor::zeros(kernel_shape(config, out, in));
    b.bias = Tensor::zeros({out});
    b.bn_scale = Tensor::ones({out});
    b.bn_shift = Tensor::zeros({out});
    b.running_mean = Tensor::zeros({out});
    b.running_var = Tensor::ones({out});
    m.blocks.push_back(std::move(b));
    in = out;
  }
  m.dense_weight = Tensor::zeros({config.n_classes, config.flattened_size()});
  m.dense_bias = Tensor::zeros({config.n_classes});
  for (auto& p : m.parameters()) {
    p.set_requires_grad(true);
  }
  return m;
}

}  // namespace

void ModelConfig::validate() const {
  if (spatial_rank != 2 && spatial_rank != 3) {
    throw ConfigError("spatial_rank must be 2 or 3");
  }
  if (static_cast<int>(input_extents.size()) != spatial_rank) {
    throw ConfigError("input_extents must have spatial_rank entries");
  }
  if (in_channels < 1) {
    throw ConfigError("in_channels must be positive");
  }
  if (conv_filters.empty()) {
    throw ConfigError("conv_filters must not be empty");
  }
  for (auto f : conv_filters) {
    if (f < 1) {
      throw ConfigError("conv_filters entries must be positive");
    }
  }
  if (kernel_extent < 1 || pool_extent < 1) {
    throw ConfigError("kernel_extent and pool_extent must be positive");
  }
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
    throw ConfigError("dropout_p must lie in [0, 1)");
  }
  if (l2_coeff < 0.0) {
    throw ConfigError("l2_coeff must be non-negative");
  }
  if (n_classes != 2) {
    throw ConfigError("the classifier is binary: n_classes must be 2");
  }
  if (!(bn_eps > 0.0) || !(bn_momentum >= 0.0 && bn_momentum < 1.0)) {
    throw ConfigError("bn_eps must be positive and bn_momentum in [0, 1)");
  }
  Shape e = input_extents;
  for (std::size_t layer = 0; layer < conv_filters.size(); ++layer) {
    for (auto& x : e) {
      if (x < pool_extent) {
        throw ConfigError("input_extents too small for " + std::to_string(conv_filters.size()) +
                          " pooling layers");
      }
      x /= pool_extent;
    }
  }
}

Shape ModelConfig::feature_extents() const {
  Shape e = input_extents;
  for (std::size_t layer = 0; layer + 1 < conv_filters.size(); ++layer) {
    for (auto& x : e) {
      x /= pool_extent;
    }
  }
  return e;
}

Shape ModelConfig::pooled_extents() const {
  Shape e = feature_extents();
  for (auto& x : e) {
    x /= pool_extent;
  }
  return e;
}

std::int64_t ModelConfig::flattened_size() const {
  std::int64_t n = conv_filters.back();
  for (auto x : pooled_extents()) {
    n *= x;
  }
  return n;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"spatial_rank", c.spatial_rank},   {"input_extents", c.input_extents},
                     {"in_channels", c.in_channels},     {"conv_filters", c.conv_filters},
                     {"kernel_extent", c.kernel_extent}, {"pool_extent", c.pool_extent},
                     {"dropout_p", c.dropout_p},         {"l2_coeff", c.l2_coeff},
                     {"n_classes", c.n_classes},         {"bn_eps", c.bn_eps},
                     {"bn_momentum", c.bn_momentum}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.spatial_rank = j.value("spatial_rank", d.spatial_rank);
  c.input_extents = j.value("input_extents", d.input_extents);
  c.in_channels = j.value("in_channels", d.in_channels);
  c.conv_filters = j.value("conv_filters", d.conv_filters);
  c.kernel_extent = j.value("kernel_extent", d.kernel_extent);
  c.pool_extent = j.value("pool_extent", d.pool_extent);
  c.dropout_p = j.value("dropout_p", d.dropout_p);
  c.l2_coeff = j.value("l2_coeff", d.l2_coeff);
  c.n_classes = j.value("n_classes", d.n_classes);
  c.bn_eps = j.value("bn_eps", d.bn_eps);
  c.bn_momentum = j.value("bn_momentum", d.bn_momentum);
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> p;
  for (const auto& b : blocks) {
    p.insert(p.end(), {b.kernel, b.bias, b.bn_scale, b.bn_shift});
  }
  p.push_back(dense_weight);
  p.push_back(dense_bias);
  return p;
}

std::vector<Tensor> Model::weights() const {
  std::vector<Tensor> w;
  for (const auto& b : blocks) {
    w.push_back(b.kernel);
  }
  w.push_back(dense_weight);
  return w;
}

std::vector<std::pair<std::string, Tensor>> Model::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string p = "conv" + std::to_string(i + 1) + ".";
    out.emplace_back(p + "kernel", b.kernel);
    out.emplace_back(p + "bias", b.bias);
    out.emplace_back(p + "bn_scale", b.bn_scale);
    out.emplace_back(p + "bn_shift", b.bn_shift);
    out.emplace_back(p + "running_mean", b.running_mean);
    out.emplace_back(p + "running_var", b.running_var);
  }
  out.emplace_back("dense.weight", dense_weight);
  out.emplace_back("dense.bias", dense_bias);
  return out;
}

Model Model::clone() const {
  Model m;
  m.config = config;
  m.step = step;
  auto trainable = [](const Tensor& t) { return t.clone().set_requires_grad(true); };
  for (const auto& b : blocks) {
    m.blocks.push_back({trainable(b.kernel), trainable(b.bias), trainable(b.bn_scale),
                        trainable(b.bn_shift), b.running_mean.clone(), b.running_var.clone()});
  }
  m.dense_weight = trainable(dense_weight);
  m.dense_bias = trainable(dense_bias);
  return m;
}

Model init_model(const ModelConfig& config, std::uint64_t seed) {
  Model m = empty_model(config);
  Rng rng(seed);
  std::int64_t in = config.in_channels;
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const auto out = config.conv_filters[i];
    std::int64_t fan_in = in;
    for (int a = 0; a < config.spatial_rank; ++a) {
      fan_in *= config.kernel_extent;
    }
    m.blocks[i].kernel = he_normal(kernel_shape(config, out, in), fan_in, rng).set_requires_grad(true);
    in = out;
  }
  m.dense_weight = he_normal({config.n_classes, config.flattened_size()}, config.flattened_size(), rng)
                       .set_requires_grad(true);
  return m;
}

ForwardPass forward(const Model& model, const Tensor& batch, const ForwardOptions& options) {
  const auto& c = model.config;
  if (batch.rank() != c.spatial_rank + 2 || batch.dim(1) != c.in_channels) {
    throw ShapeError("batch shape " + shape_str(batch.shape()) + " does not match the model input");
  }
  for (int a = 0; a < c.spatial_rank; ++a) {
    if (batch.dim(a + 2) != c.input_extents[static_cast<std::size_t>(a)]) {
      throw ShapeError("batch shape " + shape_str(batch.shape()) +
                       " does not match input extents " + shape_str(c.input_extents));
    }
  }
  if (options.dropout && options.rng == nullptr) {
    throw ContractError("dropout requested without a random generator");
  }
  ForwardPass pass;
  Tensor h = batch;
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const auto& b = model.blocks[i];
    h = conv_same(h, b.kernel, b.bias);
    if (options.batch_stats) {
      BatchNormStats stats;
      h = batchnorm_train(h, b.bn_scale, b.bn_shift, c.bn_eps, &stats);
      pass.batch_stats.push_back(std::move(stats));
    } else {
      h = batchnorm_infer(h, b.bn_scale, b.bn_shift, b.running_mean, b.running_var, c.bn_eps);
    }
    h = relu(h);
    if (i + 1 == model.blocks.size()) {
      pass.features = h;
    }
    h = maxpool(h, c.pool_extent);
  }
  Tensor flat = flatten(h);
  pass.clean_logits = dense(flat, model.dense_weight, model.dense_bias);
  if (options.dropout && c.dropout_p > 0.0) {
    pass.logits = dense(dropout(flat, c.dropout_p, *options.rng), model.dense_weight, model.dense_bias);
  } else {
    pass.logits = pass.clean_logits;
  }
  return pass;
}

Tensor predict_proba(const Model& model, const Tensor& batch) {
  NoGradGuard no_grad;
  return softmax_last(forward(model, batch).logits);
}

Tensor l2_penalty(const Model& model) {
  Tensor total;
  for (const auto& w : model.weights()) {
    Tensor s = sum(square(w));
    total = total.defined() ? add(total, s) : s;
  }
  return mul_scalar(total, model.config.l2_coeff);
}

void update_running_stats(Model& model, const std::vector<BatchNormStats>& stats) {
  if (stats.size() != model.blocks.size()) {
    throw ContractError("batch statistics do not match the model's blocks");
  }
  NoGradGuard no_grad;
  const double m = model.config.bn_momentum;
  for (std::size_t i = 0; i < stats.size(); ++i) {
    auto& b = model.blocks[i];
    b.running_mean = add(mul_scalar(b.running_mean, m), mul_scalar(stats[i].mean, 1.0 - m));
    b.running_var = add(mul_scalar(b.running_var, m), mul_scalar(stats[i].var, 1.0 - m));
  }
}

std::string serialize_checkpoint(const Model& model) {
  binio::Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.text(nlohmann::json(model.config).dump());
  const auto named = model.named_tensors();
  w.u32(static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) {
      w.u32(static_cast<std::uint32_t>(e));
    }
    w.f32s(t.to_floats());
  }
  w.u64(model.step);
  return w.buffer();
}

Model deserialize_checkpoint(const std::string& bytes) {
  binio::Reader r(bytes, "checkpoint");
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  if (const auto v = r.u32(); v != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(v));
  }
  ModelConfig config;
  try {
    config = nlohmann::json::parse(r.text()).get<ModelConfig>();
    config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad config: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: bad config: ") + e.what());
  }
  Model m = empty_model(config);
  auto expected = m.named_tensors();
  if (r.u32() != expected.size()) {
    throw FormatError("checkpoint: tensor count does not match the config");
  }
  std::vector<Tensor> loaded;
  for (const auto& [name, t] : expected) {
    std::string got(r.u16(), '\0');
    r.bytes(got.data(), got.size());
    if (got != name) {
      throw FormatError("checkpoint: expected tensor " + name + ", found " + got);
    }
    Shape shape(r.u8());
    for (auto& e : shape) {
      e = r.u32();
    }
    if (shape != t.shape()) {
      throw FormatError("checkpoint: tensor " + name + " has shape " + shape_str(shape) +
                        ", config implies " + shape_str(t.shape()));
    }
    auto values = r.f32s(static_cast<std::size_t>(shape_numel(shape)));
    loaded.push_back(Tensor::from_floats(shape, values, t.dtype()));
  }
  m.step = r.u64();
  if (!r.at_end()) {
    throw FormatError("checkpoint: trailing bytes");
  }
  std::size_t i = 0;
  auto next = [&](bool trainable) {
    Tensor t = loaded[i++];
    return trainable ? t.set_requires_grad(true) : t;
  };
  for (auto& b : m.blocks) {
    b.kernel = next(true);
    b.bias = next(true);
    b.bn_scale = next(true);
    b.bn_shift = next(true);
    b.running_mean = next(false);
    b.running_var = next(false);
  }
  m.dense_weight = next(true);
  m.dense_bias = next(true);
  return m;
}

void save_checkpoint(const Model& model, const std::string& path) {
  binio::write_file(path, serialize_checkpoint(model));
}

Model load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(binio::read_file(path));
}

}  // namespace sgat
