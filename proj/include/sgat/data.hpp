#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sgat/rng.hpp"
#include "sgat/tensor.hpp"

namespace sgat {

enum class Domain : std::uint8_t { WD = 0, OOD = 1 };

const char* to_string(Domain d);

struct VolumeSample {
  std::vector<float> voxels;  // row-major over the dataset extents
  int label = 0;              // 0 control, 1 disease
  Domain domain = Domain::WD;
  std::uint32_t subject_id = 0;
};

struct Dataset {
  Shape extents;  // spatial extents shared by every sample
  std::vector<VolumeSample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  double prevalence() const;
  std::int64_t voxels_per_sample() const { return shape_numel(extents); }

  Dataset subset(std::span<const std::size_t> indices) const;
  /// Concatenation; extents must agree.
  static Dataset merge(const Dataset& a, const Dataset& b);
  /// [B, 1, extents...] in the given element type.
  Tensor batch(std::span<const std::size_t> indices, DType dtype = default_dtype()) const;
  std::vector<int> labels(std::span<const std::size_t> indices) const;
  std::vector<int> labels() const;
};

struct SyntheticConfig {
  int spatial_rank = 2;
  /// Empty means 30x36 for 2D and 33x46x48 for 3D.
  Shape extents;
  int n_wd = 200;
  int n_ood = 200;
  double wd_prevalence = 0.35;
  double ood_prevalence = 0.55;
  /// Dark cavity inside the structure: control radius and the enlarged
  /// (atrophy) radius of the disease class, in voxels along the short axis.
  double control_radius_mean = 2.5;
  double atrophy_radius_mean = 4.5;
  double atrophy_radius_std = 0.4;
  /// Intensity drop inside the cavity relative to the structure.
  double lesion_contrast = 1.0;
  double texture_amplitude = 0.25;
  double wd_noise_sigma = 0.15;
  double ood_noise_sigma = 0.27;
  double ood_gain = 0.9;
  double ood_blur_sigma = 0.8;
  std::uint64_t seed = 0;

  void validate() const;
  Shape resolved_extents() const;
};

void to_json(nlohmann::json& j, const SyntheticConfig& c);
void from_json(const nlohmann::json& j, SyntheticConfig& c);

struct SyntheticData {
  Dataset wd;
  Dataset ood;
};

/// Deterministic for a fixed config. Subject ids: WD 0..n_wd-1, OOD from
/// 1'000'000 on. Every sample is normalized.
SyntheticData generate(const SyntheticConfig& config);

/// Boolean mask (1 inside) of the structure for one generated subject, the
/// region a fixed-threshold rule can inspect. Exposed for tests.
std::vector<float> structure_mask(const SyntheticConfig& config, std::uint32_t subject_id,
                                  Domain domain);

/// (v - mean) / std over the sample; constant input is a DegenerateInputError.
void normalize(std::vector<float>& voxels);

/// Extracts extents starting at offset from a row-major array of the given
/// source extents.
std::vector<float> crop(const std::vector<float>& voxels, const Shape& source_extents,
                        const Shape& offset, const Shape& extents);

std::string serialize_dataset(const Dataset& ds);
Dataset deserialize_dataset(const std::string& bytes);
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

/// Splits subjects into partitions with the given fractions, separately per
/// class, using largest-remainder rounding. Returns sample indices.
std::vector<std::vector<std::size_t>> stratified_split(const Dataset& ds,
                                                       const std::vector<double>& fractions,
                                                       std::uint64_t seed);

/// k equal stratified folds.
std::vector<std::vector<std::size_t>> stratified_folds(const Dataset& ds, int k,
                                                       std::uint64_t seed);

}  // namespace sgat
