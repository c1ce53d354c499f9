#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "sgat/data.hpp"
#include "sgat/model.hpp"
#include "sgat/rng.hpp"
#include "sgat/tensor.hpp"

namespace testing {

inline sgat::Tensor random_tensor(const sgat::Shape& shape, sgat::Rng& rng, double lo = -1.0,
                                  double hi = 1.0, sgat::DType dtype = sgat::DType::F64) {
  std::vector<double> v(static_cast<std::size_t>(sgat::shape_numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return sgat::Tensor::from(shape, v, dtype);
}

inline sgat::Tensor random_normal(const sgat::Shape& shape, sgat::Rng& rng,
                                  sgat::DType dtype = sgat::default_dtype()) {
  std::vector<double> v(static_cast<std::size_t>(sgat::shape_numel(shape)));
  for (auto& x : v) x = rng.normal();
  return sgat::Tensor::from(shape, v, dtype);
}

/// The 1x1x8x8 network with filters [2, 2, 2] used by the gradient oracles.
inline sgat::ModelConfig micro_config() {
  sgat::ModelConfig c;
  c.spatial_rank = 2;
  c.input_extents = {8, 8};
  c.conv_filters = {2, 2, 2};
  return c;
}

/// Two classes that differ by +-separation along a fixed smooth pattern,
/// plus unit Gaussian noise. Labels alternate.
inline sgat::Dataset toy_dataset(int n, const sgat::Shape& extents, std::uint64_t seed,
                                 double separation) {
  sgat::Rng rng(seed);
  sgat::Dataset ds;
  ds.extents = extents;
  const auto v = static_cast<std::size_t>(sgat::shape_numel(extents));
  for (int i = 0; i < n; ++i) {
    sgat::VolumeSample s;
    s.label = i % 2;
    s.subject_id = static_cast<std::uint32_t>(i);
    s.voxels.resize(v);
    for (std::size_t k = 0; k < v; ++k) {
      const double pattern = std::sin(0.7 * static_cast<double>(k));
      s.voxels[k] = static_cast<float>((2 * s.label - 1) * separation * pattern + rng.normal());
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

/// Fresh scratch directory under the system temp dir.
inline std::string scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("sgat_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace testing
