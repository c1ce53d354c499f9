#include "sgat/gradcam.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "sgat/autograd.hpp"
#include "sgat/binio.hpp"

namespace sgat {

const char* to_string(SaliencyMode mode) {
  return mode == SaliencyMode::Full ? "full" : "detached";
}

SaliencyMode saliency_mode_from_string(const std::string& s) {
  if (s == "detached") return SaliencyMode::Detached;
  if (s == "full") return SaliencyMode::Full;
  throw ConfigError("unknown saliency mode '" + s + "' (expected detached or full)");
}

Tensor gradcam_weights(const ForwardPass& pass, int class_id, SaliencyMode mode) {
  if (!pass.features.defined() || !pass.clean_logits.defined()) {
    throw ContractError("Grad-CAM needs a forward pass with retained feature maps");
  }
  if (!pass.features.requires_grad() || !pass.clean_logits.requires_grad()) {
    throw ContractError("Grad-CAM needs feature maps linked to the class scores; "
                        "run the forward pass with gradient recording on");
  }
  const auto& ls = pass.clean_logits.shape();
  if (ls.size() != 2 || class_id < 0 || class_id >= ls[1]) {
    throw ContractError("class id out of range for logits " + shape_str(ls));
  }
  const auto& fs = pass.features.shape();
  // Samples are independent downstream of f, so one backward pass on the
  // summed scores yields every per-sample gradient.
  Tensor select = Tensor::zeros(ls, pass.clean_logits.dtype());
  visit_dtype(select.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto d = select.mutable_data<T>();
    for (std::int64_t i = 0; i < ls[0]; ++i) d[static_cast<std::size_t>(i * ls[1] + class_id)] = 1;
  });
  Tensor score = sum(mul_const(pass.clean_logits, select));
  Tensor g = grad(score, std::span<const Tensor>(&pass.features, 1),
                  {.create_graph = mode == SaliencyMode::Full})[0];
  Shape keep{fs[0], fs[1]};
  Shape reduced = keep;
  std::int64_t spatial = 1;
  for (std::size_t a = 2; a < fs.size(); ++a) {
    reduced.push_back(1);
    spatial *= fs[a];
  }
  Tensor n = reshape(mul_scalar(sum_to(g, reduced), 1.0 / static_cast<double>(spatial)), keep);
  return mode == SaliencyMode::Full ? n : n.detach();
}

Tensor weighted_activation(const Tensor& features, const Tensor& weights) {
  const auto& fs = features.shape();
  if (fs.size() < 3 || weights.shape() != Shape{fs[0], fs[1]}) {
    throw ContractError("Grad-CAM weights " + shape_str(weights.shape()) +
                        " do not match features " + shape_str(fs));
  }
  Shape wshape{fs[0], fs[1]};
  Shape summed{fs[0], 1};
  Shape out{fs[0]};
  for (std::size_t a = 2; a < fs.size(); ++a) {
    wshape.push_back(1);
    summed.push_back(fs[a]);
    out.push_back(fs[a]);
  }
  return relu(reshape(sum_to(mul(features, reshape(weights, wshape)), summed), out));
}

ClassActivationMap activation_map(const ForwardPass& pass, int class_id, SaliencyMode mode) {
  return {weighted_activation(pass.features, gradcam_weights(pass, class_id, mode)), class_id};
}

namespace {

// Linear resize along one axis of a row-major array with the given extents.
std::vector<double> resize_axis(const std::vector<double>& in, const Shape& extents,
                                std::size_t axis, std::int64_t target) {
  std::int64_t outer = 1;
  std::int64_t inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= extents[a];
  for (std::size_t a = axis + 1; a < extents.size(); ++a) inner *= extents[a];
  const std::int64_t src = extents[axis];
  std::vector<double> out(static_cast<std::size_t>(outer * target * inner));
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t t = 0; t < target; ++t) {
      const double pos =
          target > 1 ? static_cast<double>(t) * static_cast<double>(src - 1) / (target - 1) : 0.0;
      const auto lo = static_cast<std::int64_t>(std::floor(pos));
      const std::int64_t hi = std::min(lo + 1, src - 1);
      const double frac = pos - static_cast<double>(lo);
      for (std::int64_t i = 0; i < inner; ++i) {
        const double a = in[static_cast<std::size_t>((o * src + lo) * inner + i)];
        const double b = in[static_cast<std::size_t>((o * src + hi) * inner + i)];
        out[static_cast<std::size_t>((o * target + t) * inner + i)] = a + (b - a) * frac;
      }
    }
  }
  return out;
}

}  // namespace

Tensor upsample_for_export(const Tensor& map, const Shape& target_extents) {
  if (map.rank() != static_cast<int>(target_extents.size())) {
    throw ShapeError("upsample: map " + shape_str(map.shape()) + " vs target " +
                     shape_str(target_extents));
  }
  Shape extents = map.shape();
  for (std::size_t a = 0; a < extents.size(); ++a) {
    if (target_extents[a] < extents[a]) {
      throw ShapeError("upsample: target extents must not be smaller than the map");
    }
  }
  std::vector<double> v = map.values();
  for (std::size_t a = 0; a < extents.size(); ++a) {
    v = resize_axis(v, extents, a, target_extents[a]);
    extents[a] = target_extents[a];
  }
  const double peak = v.empty() ? 0.0 : *std::max_element(v.begin(), v.end());
  if (peak > 0.0) {
    for (auto& x : v) x = std::max(0.0, x / peak);
  } else {
    std::fill(v.begin(), v.end(), 0.0);
  }
  return Tensor::from(target_extents, v, DType::F64);
}

namespace {

std::string pgm_bytes(std::int64_t h, std::int64_t w, const double* v) {
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::int64_t i = 0; i < h * w; ++i) {
    const double c = std::clamp(v[i], 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
  return out;
}

}  // namespace

void write_pgm(const std::string& path, const Tensor& map) {
  if (map.rank() != 2) {
    throw ShapeError("PGM export needs a 2D map, got " + shape_str(map.shape()));
  }
  const auto v = map.values();
  binio::write_file(path, pgm_bytes(map.dim(0), map.dim(1), v.data()));
}

void write_volume(const std::string& path, const Tensor& map) {
  if (map.rank() != 3) {
    throw ShapeError("volume export needs a 3D map, got " + shape_str(map.shape()));
  }
  const auto v = map.values();
  const std::int64_t d = map.dim(0);
  const std::int64_t slice = map.dim(1) * map.dim(2);
  std::int64_t best = 0;
  double best_total = -1.0;
  for (std::int64_t z = 0; z < d; ++z) {
    double total = 0.0;
    for (std::int64_t i = 0; i < slice; ++i) total += v[static_cast<std::size_t>(z * slice + i)];
    if (total > best_total) {
      best_total = total;
      best = z;
    }
  }
  binio::Writer raw;
  raw.f32s(map.to_floats());
  binio::write_file(path + ".raw", raw.buffer());
  nlohmann::json side = {{"extents", map.shape()},
                         {"dtype", "float32"},
                         {"byte_order", "little"},
                         {"preview_axis", 0},
                         {"preview_slice", best}};
  binio::write_file(path + ".json", side.dump(2) + "\n");
  binio::write_file(path + ".pgm",
                    pgm_bytes(map.dim(1), map.dim(2), v.data() + best * slice));
}

}  // namespace sgat
