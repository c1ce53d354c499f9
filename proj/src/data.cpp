#include "sgat/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sgat/binio.hpp"

namespace sgat {

const char* to_string(Domain d) { return d == Domain::OOD ? "OOD" : "WD"; }

double Dataset::prevalence() const {
  if (samples.empty()) return 0.0;
  std::size_t pos = 0;
  for (const auto& s : samples) pos += s.label == 1 ? 1 : 0;
  return static_cast<double>(pos) / static_cast<double>(samples.size());
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.extents = extents;
  out.samples.reserve(indices.size());
  for (auto i : indices) {
    if (i >= samples.size()) throw ContractError("dataset index out of range");
    out.samples.push_back(samples[i]);
  }
  return out;
}

Dataset Dataset::merge(const Dataset& a, const Dataset& b) {
  if (a.extents != b.extents) {
    throw ShapeError("cannot merge datasets with extents " + shape_str(a.extents) + " and " +
                     shape_str(b.extents));
  }
  Dataset out = a;
  out.samples.insert(out.samples.end(), b.samples.begin(), b.samples.end());
  return out;
}

Tensor Dataset::batch(std::span<const std::size_t> indices, DType dtype) const {
  const auto v = static_cast<std::size_t>(voxels_per_sample());
  Shape shape{static_cast<std::int64_t>(indices.size()), 1};
  shape.insert(shape.end(), extents.begin(), extents.end());
  return visit_dtype(dtype, [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> out(indices.size() * v);
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const auto& src = samples.at(indices[b]).voxels;
      std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(b * v));
    }
    return Tensor::adopt<T>(shape, std::move(out));
  });
}

std::vector<int> Dataset::labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(samples.at(i).label);
  return out;
}

std::vector<int> Dataset::labels() const {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

void SyntheticConfig::validate() const {
  if (spatial_rank != 2 && spatial_rank != 3) throw ConfigError("spatial_rank must be 2 or 3");
  if (!extents.empty()) {
    if (static_cast<int>(extents.size()) != spatial_rank) {
      throw ConfigError("extents rank does not match spatial_rank");
    }
    for (auto e : extents) {
      if (e < 8) throw ConfigError("synthetic extents must be at least 8");
    }
  }
  if (n_wd < 0 || n_ood < 0 || n_wd + n_ood == 0) throw ConfigError("no subjects requested");
  if (!(wd_prevalence >= 0.0 && wd_prevalence <= 1.0) ||
      !(ood_prevalence >= 0.0 && ood_prevalence <= 1.0)) {
    throw ConfigError("prevalence must be in [0, 1]");
  }
  if (!(control_radius_mean > 0.0) || !(atrophy_radius_mean > 0.0) ||
      !(atrophy_radius_std >= 0.0)) {
    throw ConfigError("cavity radii must be positive");
  }
  if (!(wd_noise_sigma >= 0.0) || !(ood_noise_sigma >= wd_noise_sigma)) {
    throw ConfigError("need 0 <= wd_noise_sigma <= ood_noise_sigma");
  }
  if (!(ood_gain > 0.0) || !(ood_blur_sigma >= 0.0) || !(texture_amplitude >= 0.0) ||
      !(lesion_contrast >= 0.0 && lesion_contrast <= 1.0)) {
    throw ConfigError("invalid OOD gain, blur, texture or lesion contrast");
  }
}

Shape SyntheticConfig::resolved_extents() const {
  if (!extents.empty()) return extents;
  return spatial_rank == 3 ? Shape{33, 46, 48} : Shape{30, 36};
}

void to_json(nlohmann::json& j, const SyntheticConfig& c) {
  j = nlohmann::json{{"spatial_rank", c.spatial_rank},
                     {"extents", c.extents},
                     {"n_wd", c.n_wd},
                     {"n_ood", c.n_ood},
                     {"wd_prevalence", c.wd_prevalence},
                     {"ood_prevalence", c.ood_prevalence},
                     {"control_radius_mean", c.control_radius_mean},
                     {"atrophy_radius_mean", c.atrophy_radius_mean},
                     {"atrophy_radius_std", c.atrophy_radius_std},
                     {"lesion_contrast", c.lesion_contrast},
                     {"texture_amplitude", c.texture_amplitude},
                     {"wd_noise_sigma", c.wd_noise_sigma},
                     {"ood_noise_sigma", c.ood_noise_sigma},
                     {"ood_gain", c.ood_gain},
                     {"ood_blur_sigma", c.ood_blur_sigma},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SyntheticConfig& c) {
  SyntheticConfig d;
  c.spatial_rank = j.value("spatial_rank", d.spatial_rank);
  c.extents = j.value("extents", d.extents);
  c.n_wd = j.value("n_wd", d.n_wd);
  c.n_ood = j.value("n_ood", d.n_ood);
  c.wd_prevalence = j.value("wd_prevalence", d.wd_prevalence);
  c.ood_prevalence = j.value("ood_prevalence", d.ood_prevalence);
  c.control_radius_mean = j.value("control_radius_mean", d.control_radius_mean);
  c.atrophy_radius_mean = j.value("atrophy_radius_mean", d.atrophy_radius_mean);
  c.atrophy_radius_std = j.value("atrophy_radius_std", d.atrophy_radius_std);
  c.lesion_contrast = j.value("lesion_contrast", d.lesion_contrast);
  c.texture_amplitude = j.value("texture_amplitude", d.texture_amplitude);
  c.wd_noise_sigma = j.value("wd_noise_sigma", d.wd_noise_sigma);
  c.ood_noise_sigma = j.value("ood_noise_sigma", d.ood_noise_sigma);
  c.ood_gain = j.value("ood_gain", d.ood_gain);
  c.ood_blur_sigma = j.value("ood_blur_sigma", d.ood_blur_sigma);
  c.seed = j.value("seed", d.seed);
}

namespace {

constexpr std::uint32_t kOodIdBase = 1000000;
constexpr int kTextureWaves = 4;

struct Geometry {
  double center[3] = {0, 0, 0};
  double axes[3] = {1, 1, 1};
  double cavity_center[3] = {0, 0, 0};
  double cavity_radius = 1.0;
  double wave_k[kTextureWaves][3] = {};
  double wave_phase[kTextureWaves] = {};
};

std::uint64_t subject_seed(const SyntheticConfig& c, Domain domain, std::uint32_t id,
                           std::uint64_t stream) {
  return derive_seed(c.seed, {static_cast<std::uint64_t>(domain), id, stream});
}

Geometry draw_geometry(const SyntheticConfig& c, const Shape& ext, Domain domain,
                       std::uint32_t id, int label) {
  Rng rng(subject_seed(c, domain, id, 0));
  Geometry g;
  const auto rank = ext.size();
  for (std::size_t a = 0; a < rank; ++a) {
    const double e = static_cast<double>(ext[a]);
    g.center[a] = (e - 1.0) / 2.0 + std::clamp(rng.normal(0.0, 1.0), -2.0, 2.0);
    g.axes[a] = 0.3 * e * (1.0 + std::clamp(rng.normal(0.0, 0.03), -0.15, 0.15));
    g.cavity_center[a] = g.center[a] + std::clamp(rng.normal(0.0, 0.5), -1.0, 1.0);
  }
  const double mean = label == 1 ? c.atrophy_radius_mean : c.control_radius_mean;
  g.cavity_radius = std::max(0.5, rng.normal(mean, c.atrophy_radius_std));
  constexpr double kPi = 3.14159265358979323846;
  for (auto& k : g.wave_k) {
    for (std::size_t a = 0; a < rank; ++a) {
      k[a] = 2.0 * kPi / rng.uniform(8.0, 24.0) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
    }
  }
  for (auto& p : g.wave_phase) p = rng.uniform(0.0, 2.0 * kPi);
  return g;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Calls fn(flat index, coordinates) for every voxel in row-major order.
template <class F>
void for_each_voxel(const Shape& ext, F&& fn) {
  const auto rank = ext.size();
  const std::int64_t n = shape_numel(ext);
  double p[3] = {0, 0, 0};
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t rem = i;
    for (std::size_t a = rank; a-- > 0;) {
      p[a] = static_cast<double>(rem % ext[a]);
      rem /= ext[a];
    }
    fn(static_cast<std::size_t>(i), p);
  }
}

double structure_radius(const Geometry& g, const double* p, std::size_t rank) {
  double r2 = 0.0;
  for (std::size_t a = 0; a < rank; ++a) {
    const double d = (p[a] - g.center[a]) / g.axes[a];
    r2 += d * d;
  }
  return std::sqrt(r2);
}

std::vector<double> clean_image(const SyntheticConfig& c, const Shape& ext, const Geometry& g) {
  const auto rank = ext.size();
  std::vector<double> img(static_cast<std::size_t>(shape_numel(ext)));
  for_each_voxel(ext, [&](std::size_t i, const double* p) {
    double texture = 0.0;
    for (int w = 0; w < kTextureWaves; ++w) {
      double phase = g.wave_phase[w];
      for (std::size_t a = 0; a < rank; ++a) phase += g.wave_k[w][a] * p[a];
      texture += std::cos(phase);
    }
    const double structure = sigmoid((1.0 - structure_radius(g, p, rank)) / 0.06);
    double d2 = 0.0;
    for (std::size_t a = 0; a < rank; ++a) {
      const double d = p[a] - g.cavity_center[a];
      d2 += d * d;
    }
    const double cavity = sigmoid((g.cavity_radius - std::sqrt(d2)) / 0.4);
    img[i] = 0.3 + c.texture_amplitude * texture / kTextureWaves +
             structure * (1.0 - c.lesion_contrast * cavity);
  });
  return img;
}

// Separable Gaussian blur with replicated edges.
void blur(std::vector<double>& img, const Shape& ext, double sigma) {
  if (sigma <= 0.0) return;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int t = -radius; t <= radius; ++t) {
    taps[static_cast<std::size_t>(t + radius)] = std::exp(-0.5 * t * t / (sigma * sigma));
    total += taps[static_cast<std::size_t>(t + radius)];
  }
  for (auto& t : taps) t /= total;
  std::vector<double> tmp(img.size());
  for (std::size_t axis = 0; axis < ext.size(); ++axis) {
    std::int64_t outer = 1;
    std::int64_t inner = 1;
    for (std::size_t a = 0; a < axis; ++a) outer *= ext[a];
    for (std::size_t a = axis + 1; a < ext.size(); ++a) inner *= ext[a];
    const std::int64_t len = ext[axis];
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t x = 0; x < len; ++x) {
        for (std::int64_t i = 0; i < inner; ++i) {
          double acc = 0.0;
          for (int t = -radius; t <= radius; ++t) {
            const std::int64_t src = std::clamp<std::int64_t>(x + t, 0, len - 1);
            acc += taps[static_cast<std::size_t>(t + radius)] *
                   img[static_cast<std::size_t>((o * len + src) * inner + i)];
          }
          tmp[static_cast<std::size_t>((o * len + x) * inner + i)] = acc;
        }
      }
    }
    img.swap(tmp);
  }
}

std::vector<int> class_labels(int n, double prevalence, Rng& rng) {
  const auto n_pos = static_cast<int>(std::lround(n * prevalence));
  std::vector<int> labels(static_cast<std::size_t>(n), 0);
  std::fill(labels.begin(), labels.begin() + n_pos, 1);
  for (std::size_t i = labels.size(); i > 1; --i) {
    std::swap(labels[i - 1], labels[rng.next_u64() % i]);
  }
  return labels;
}

Dataset generate_domain(const SyntheticConfig& c, Domain domain) {
  const Shape ext = c.resolved_extents();
  const int n = domain == Domain::WD ? c.n_wd : c.n_ood;
  Rng label_rng(derive_seed(c.seed, {static_cast<std::uint64_t>(domain), 0xC1A55}));
  const auto labels =
      class_labels(n, domain == Domain::WD ? c.wd_prevalence : c.ood_prevalence, label_rng);
  Dataset ds;
  ds.extents = ext;
  ds.samples.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const std::uint32_t id = (domain == Domain::WD ? 0u : kOodIdBase) + static_cast<std::uint32_t>(i);
    auto& s = ds.samples[static_cast<std::size_t>(i)];
    s.label = labels[static_cast<std::size_t>(i)];
    s.domain = domain;
    s.subject_id = id;
    auto img = clean_image(c, ext, draw_geometry(c, ext, domain, id, s.label));
    double sigma = c.wd_noise_sigma;
    if (domain == Domain::OOD) {
      blur(img, ext, c.ood_blur_sigma);
      for (auto& v : img) v *= c.ood_gain;
      sigma = c.ood_noise_sigma;
    }
    Rng noise(subject_seed(c, domain, id, 1));
    for (auto& v : img) v += noise.normal(0.0, sigma);
    s.voxels.assign(img.begin(), img.end());
    normalize(s.voxels);
  }
  return ds;
}

}  // namespace

SyntheticData generate(const SyntheticConfig& config) {
  config.validate();
  return {generate_domain(config, Domain::WD), generate_domain(config, Domain::OOD)};
}

std::vector<float> structure_mask(const SyntheticConfig& config, std::uint32_t subject_id,
                                  Domain domain) {
  const Shape ext = config.resolved_extents();
  // Geometry of the structure does not depend on the label.
  const Geometry g = draw_geometry(config, ext, domain, subject_id, 0);
  std::vector<float> mask(static_cast<std::size_t>(shape_numel(ext)));
  for_each_voxel(ext, [&](std::size_t i, const double* p) {
    mask[i] = structure_radius(g, p, ext.size()) <= 1.0 ? 1.0f : 0.0f;
  });
  return mask;
}

void normalize(std::vector<float>& voxels) {
  if (voxels.empty()) throw DegenerateInputError("cannot normalize an empty sample");
  double mean = 0.0;
  for (float v : voxels) mean += v;
  mean /= static_cast<double>(voxels.size());
  double var = 0.0;
  for (float v : voxels) var += (v - mean) * (v - mean);
  var /= static_cast<double>(voxels.size());
  if (!(var > 0.0) ||
      std::all_of(voxels.begin(), voxels.end(), [&](float v) { return v == voxels[0]; })) {
    throw DegenerateInputError("cannot normalize a constant sample");
  }
  const double inv = 1.0 / std::sqrt(var);
  for (auto& v : voxels) v = static_cast<float>((v - mean) * inv);
}

std::vector<float> crop(const std::vector<float>& voxels, const Shape& source_extents,
                        const Shape& offset, const Shape& extents) {
  const auto rank = source_extents.size();
  if (offset.size() != rank || extents.size() != rank ||
      static_cast<std::int64_t>(voxels.size()) != shape_numel(source_extents)) {
    throw ShapeError("crop: inconsistent ranks or element count");
  }
  for (std::size_t a = 0; a < rank; ++a) {
    if (offset[a] < 0 || extents[a] <= 0 || offset[a] + extents[a] > source_extents[a]) {
      throw ShapeError("crop window " + shape_str(offset) + "+" + shape_str(extents) +
                       " exceeds " + shape_str(source_extents));
    }
  }
  std::vector<float> out(static_cast<std::size_t>(shape_numel(extents)));
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::int64_t rem = static_cast<std::int64_t>(i);
    std::int64_t src = 0;
    std::int64_t stride = 1;
    for (std::size_t a = rank; a-- > 0;) {
      src += (rem % extents[a] + offset[a]) * stride;
      rem /= extents[a];
      stride *= source_extents[a];
    }
    out[i] = voxels[static_cast<std::size_t>(src)];
  }
  return out;
}

namespace {

constexpr char kDataMagic[8] = {'S', 'G', 'D', 'A', 'T', 'A', '1', '\0'};
constexpr std::uint32_t kDataVersion = 1;

}  // namespace

std::string serialize_dataset(const Dataset& ds) {
  nlohmann::json domains = nlohmann::json::array();
  bool has[2] = {false, false};
  for (const auto& s : ds.samples) has[static_cast<int>(s.domain)] = true;
  for (int d = 0; d < 2; ++d) {
    if (has[d]) domains.push_back(to_string(static_cast<Domain>(d)));
  }
  const nlohmann::json header = {{"rank", ds.extents.size()},
                                 {"extents", ds.extents},
                                 {"count", ds.samples.size()},
                                 {"domains", domains},
                                 {"prevalence", ds.prevalence()}};
  binio::Writer w;
  w.bytes(kDataMagic, sizeof kDataMagic);
  w.u32(kDataVersion);
  w.text(header.dump());
  const auto v = static_cast<std::size_t>(ds.voxels_per_sample());
  for (const auto& s : ds.samples) {
    if (s.voxels.size() != v) throw ShapeError("sample voxel count does not match extents");
    w.u32(s.subject_id);
    w.u8(static_cast<std::uint8_t>(s.label));
    w.u8(static_cast<std::uint8_t>(s.domain));
    w.f32s(s.voxels);
  }
  return w.buffer();
}

Dataset deserialize_dataset(const std::string& bytes) {
  binio::Reader r(bytes, "dataset");
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (!std::equal(magic, magic + 8, kDataMagic)) throw FormatError("dataset: bad magic");
  const auto version = r.u32();
  if (version != kDataVersion) {
    throw FormatError("dataset: unsupported version " + std::to_string(version));
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.text());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset: malformed header: ") + e.what());
  }
  Dataset ds;
  std::size_t count = 0;
  try {
    ds.extents = header.at("extents").get<Shape>();
    count = header.at("count").get<std::size_t>();
    if (header.at("rank").get<std::size_t>() != ds.extents.size()) {
      throw FormatError("dataset: rank does not match extents");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset: incomplete header: ") + e.what());
  }
  if (ds.extents.empty() ||
      std::any_of(ds.extents.begin(), ds.extents.end(), [](auto e) { return e <= 0; })) {
    throw FormatError("dataset: invalid extents");
  }
  const auto v = static_cast<std::size_t>(shape_numel(ds.extents));
  if (count > bytes.size() / (6 + 4 * v) + 1) throw FormatError("dataset: count exceeds file size");
  ds.samples.resize(count);
  for (auto& s : ds.samples) {
    s.subject_id = r.u32();
    const auto label = r.u8();
    const auto domain = r.u8();
    if (label > 1 || domain > 1) throw FormatError("dataset: invalid label or domain tag");
    s.label = label;
    s.domain = static_cast<Domain>(domain);
    s.voxels = r.f32s(v);
  }
  if (!r.at_end()) throw FormatError("dataset: trailing bytes");
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  binio::write_file(path, serialize_dataset(ds));
}

Dataset load_dataset(const std::string& path) {
  return deserialize_dataset(binio::read_file(path));
}

std::vector<std::vector<std::size_t>> stratified_split(const Dataset& ds,
                                                       const std::vector<double>& fractions,
                                                       std::uint64_t seed) {
  if (fractions.empty()) throw ConfigError("no partitions requested");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw ConfigError("partition fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("partition fractions must sum to 1");

  // Subjects in first-appearance order, grouped by class.
  std::vector<std::uint32_t> order;
  std::vector<std::vector<std::size_t>> members;
  std::vector<int> subject_label;
  {
    std::vector<std::pair<std::uint32_t, std::size_t>> seen;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
      const auto id = ds.samples[i].subject_id;
      auto it = std::find_if(seen.begin(), seen.end(), [&](auto& p) { return p.first == id; });
      if (it == seen.end()) {
        seen.emplace_back(id, members.size());
        members.push_back({i});
        subject_label.push_back(ds.samples[i].label);
      } else {
        members[it->second].push_back(i);
      }
    }
  }
  const std::size_t k = fractions.size();
  std::vector<std::vector<std::size_t>> parts(k);
  Rng rng(seed);
  std::size_t rotation = 0;
  for (int label = 0; label <= 1; ++label) {
    std::vector<std::size_t> subjects;
    for (std::size_t s = 0; s < members.size(); ++s) {
      if (subject_label[s] == label) subjects.push_back(s);
    }
    for (std::size_t i = subjects.size(); i > 1; --i) {
      std::swap(subjects[i - 1], subjects[rng.next_u64() % i]);
    }
    // Largest remainder; equal remainders are served round-robin across
    // classes so partition sizes stay balanced.
    const auto n = static_cast<double>(subjects.size());
    std::vector<std::size_t> counts(k);
    std::vector<std::pair<double, std::size_t>> rema;
    std::size_t assigned = 0;
    for (std::size_t p = 0; p < k; ++p) {
      const double q = n * fractions[p];
      counts[p] = static_cast<std::size_t>(std::floor(q + 1e-9));
      assigned += counts[p];
      rema.emplace_back(q - static_cast<double>(counts[p]), (p + k - rotation % k) % k);
    }
    std::vector<std::size_t> by(k);
    std::iota(by.begin(), by.end(), 0);
    std::stable_sort(by.begin(), by.end(), [&](std::size_t a, std::size_t b) {
      if (std::abs(rema[a].first - rema[b].first) > 1e-9) return rema[a].first > rema[b].first;
      return rema[a].second < rema[b].second;
    });
    for (std::size_t j = 0; assigned < subjects.size(); ++j, ++assigned, ++rotation) {
      ++counts[by[j % k]];
    }
    std::size_t next = 0;
    for (std::size_t p = 0; p < k; ++p) {
      for (std::size_t c = 0; c < counts[p]; ++c, ++next) {
        const auto& idx = members[subjects[next]];
        parts[p].insert(parts[p].end(), idx.begin(), idx.end());
      }
    }
  }
  for (auto& p : parts) {
    if (p.empty()) throw ConfigError("a partition would be empty; dataset too small to split");
    std::sort(p.begin(), p.end());
  }
  return parts;
}

std::vector<std::vector<std::size_t>> stratified_folds(const Dataset& ds, int k,
                                                       std::uint64_t seed) {
  if (k < 2) throw ConfigError("need at least 2 folds");
  return stratified_split(ds, std::vector<double>(static_cast<std::size_t>(k), 1.0 / k), seed);
}

}  // namespace sgat
