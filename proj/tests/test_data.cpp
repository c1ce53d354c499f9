#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "sgat/binio.hpp"
#include "sgat/data.hpp"

using namespace sgat;

namespace {

double sample_mean(const std::vector<float>& v) {
  double m = 0.0;
  for (float x : v) m += x;
  return m / static_cast<double>(v.size());
}

double sample_var(const std::vector<float>& v) {
  const double m = sample_mean(v);
  double s = 0.0;
  for (float x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size());
}

double masked_mean(const VolumeSample& s, const std::vector<float>& mask) {
  double total = 0.0;
  double n = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    total += mask[i] * s.voxels[i];
    n += mask[i];
  }
  return total / n;
}

Dataset labelled(const std::vector<int>& labels) {
  Dataset ds;
  ds.extents = {2, 2};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ds.samples.push_back({std::vector<float>(4, static_cast<float>(i)), labels[i], Domain::WD,
                          static_cast<std::uint32_t>(i)});
  }
  return ds;
}

}  // namespace

TEST_CASE("generation is deterministic and domains are disjoint") {
  SyntheticConfig cfg;
  cfg.n_wd = 20;
  cfg.n_ood = 20;
  cfg.seed = 3;
  auto a = generate(cfg);
  auto b = generate(cfg);
  CHECK(serialize_dataset(a.wd) == serialize_dataset(b.wd));
  CHECK(serialize_dataset(a.ood) == serialize_dataset(b.ood));
  cfg.seed = 4;
  CHECK(serialize_dataset(generate(cfg).wd) != serialize_dataset(a.wd));

  std::set<std::uint32_t> wd_ids;
  for (const auto& s : a.wd.samples) {
    wd_ids.insert(s.subject_id);
    CHECK(s.domain == Domain::WD);
  }
  for (const auto& s : a.ood.samples) {
    CHECK(wd_ids.count(s.subject_id) == 0);
    CHECK(s.domain == Domain::OOD);
  }
  CHECK(a.wd.extents == Shape{30, 36});
  CHECK(a.wd.samples[0].voxels.size() == 30u * 36u);
}

TEST_CASE("class prevalences follow the configuration") {
  SyntheticConfig cfg;
  cfg.n_wd = 200;
  cfg.n_ood = 200;
  auto d = generate(cfg);
  CHECK(d.wd.prevalence() == doctest::Approx(0.35));
  CHECK(d.ood.prevalence() == doctest::Approx(0.55));
}

TEST_CASE("generated samples are normalized") {
  SyntheticConfig cfg;
  cfg.n_wd = 10;
  cfg.n_ood = 10;
  auto d = generate(cfg);
  for (const auto* ds : {&d.wd, &d.ood}) {
    for (const auto& s : ds->samples) {
      CHECK(std::abs(sample_mean(s.voxels)) < 1e-5);
      CHECK(std::abs(sample_var(s.voxels) - 1.0) < 1e-4);
    }
  }
}

TEST_CASE("3D volumes use the 33x46x48 extents") {
  SyntheticConfig cfg;
  cfg.spatial_rank = 3;
  cfg.n_wd = 2;
  cfg.n_ood = 2;
  auto d = generate(cfg);
  CHECK(d.wd.extents == Shape{33, 46, 48});
  CHECK(d.ood.samples[1].voxels.size() == 33u * 46u * 48u);
}

TEST_CASE("a fixed threshold on structure intensity separates clean WD classes") {
  SyntheticConfig cfg;
  cfg.n_wd = 200;
  cfg.n_ood = 0;
  cfg.seed = 11;
  auto fit = generate(cfg).wd;
  // Threshold: midpoint of the class means on one draw.
  double sum[2] = {0, 0};
  double cnt[2] = {0, 0};
  for (const auto& s : fit.samples) {
    sum[s.label] += masked_mean(s, structure_mask(cfg, s.subject_id, s.domain));
    cnt[s.label] += 1;
  }
  const double threshold = 0.5 * (sum[0] / cnt[0] + sum[1] / cnt[1]);
  CHECK(sum[0] / cnt[0] > sum[1] / cnt[1]);  // the larger cavity darkens the structure

  cfg.seed = 12;
  auto test = generate(cfg).wd;
  int correct = 0;
  for (const auto& s : test.samples) {
    const int pred = masked_mean(s, structure_mask(cfg, s.subject_id, s.domain)) < threshold ? 1 : 0;
    correct += pred == s.label ? 1 : 0;
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(test.size()) >= 0.9);
}

TEST_CASE("normalization") {
  Rng rng(5);
  std::vector<float> v(500);
  for (auto& x : v) x = static_cast<float>(rng.normal(3.0, 2.0));
  auto n = v;
  normalize(n);
  CHECK(std::abs(sample_mean(n)) < 1e-6);
  CHECK(std::abs(sample_var(n) - 1.0) < 1e-5);

  auto affine = v;
  for (auto& x : affine) x = 2.5f * x - 7.0f;
  normalize(affine);
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::abs(affine[i] - n[i]) < 1e-5);

  auto twice = n;
  normalize(twice);
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::abs(twice[i] - n[i]) < 1e-6);

  std::vector<float> flat(10, 4.0f);
  CHECK_THROWS_AS(normalize(flat), DegenerateInputError);
}

TEST_CASE("crop extracts a sub-window") {
  std::vector<float> v(4 * 5);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i);
  auto c = crop(v, {4, 5}, {1, 2}, {2, 3});
  CHECK(c == std::vector<float>{7, 8, 9, 12, 13, 14});
  CHECK(crop(v, {4, 5}, {0, 0}, {4, 5}) == v);
  CHECK_THROWS_AS(crop(v, {4, 5}, {3, 0}, {2, 5}), ShapeError);
}

TEST_CASE("dataset files round-trip") {
  SyntheticConfig cfg;
  cfg.n_wd = 100;
  cfg.n_ood = 5;
  auto d = generate(cfg);
  const auto dir = testing::scratch_dir("data");
  save_dataset(d.wd, dir + "/wd.sgd");
  auto back = load_dataset(dir + "/wd.sgd");
  REQUIRE(back.size() == d.wd.size());
  CHECK(back.extents == d.wd.extents);
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back.samples[i].voxels == d.wd.samples[i].voxels);
    CHECK(back.samples[i].label == d.wd.samples[i].label);
    CHECK(back.samples[i].subject_id == d.wd.samples[i].subject_id);
  }

  // magic + version + length-prefixed header, then 100 records.
  const auto bytes = binio::read_file(dir + "/wd.sgd");
  binio::Reader r(bytes, "test");
  char magic[8];
  r.bytes(magic, 8);
  r.u32();
  const auto header = nlohmann::json::parse(r.text());
  CHECK(header["count"] == 100);
  CHECK(header["domains"] == nlohmann::json({"WD"}));
  CHECK(bytes.size() == r.position() + 100 * (4 + 1 + 1 + 30 * 36 * 4));
}

TEST_CASE("corrupted dataset files are rejected") {
  SyntheticConfig cfg;
  cfg.n_wd = 3;
  cfg.n_ood = 0;
  const auto good = serialize_dataset(generate(cfg).wd);
  auto bad_magic = good;
  bad_magic[2] = 'X';
  CHECK_THROWS_AS(deserialize_dataset(bad_magic), FormatError);
  auto bad_version = good;
  bad_version[8] = 9;
  CHECK_THROWS_AS(deserialize_dataset(bad_version), FormatError);
  auto bad_header = good;
  bad_header[13] = '#';
  CHECK_THROWS_AS(deserialize_dataset(bad_header), FormatError);
  CHECK_THROWS_AS(deserialize_dataset(good.substr(0, good.size() - 1)), FormatError);
  CHECK_THROWS_AS(deserialize_dataset(good + "x"), FormatError);
  CHECK_THROWS_AS(deserialize_dataset(""), FormatError);
  CHECK_THROWS_AS(load_dataset("/nonexistent/sgat.sgd"), FormatError);
}

TEST_CASE("stratified folds") {
  std::vector<int> half(100);
  for (std::size_t i = 0; i < 100; ++i) half[i] = i % 2 == 0 ? 1 : 0;
  auto folds = stratified_folds(labelled(half), 5, 1);
  for (const auto& f : folds) {
    int pos = 0;
    for (auto i : f) pos += half[i];
    CHECK(f.size() == 20);
    CHECK(pos == 10);
  }

  std::vector<int> skew(100, 0);
  for (std::size_t i = 0; i < 35; ++i) skew[i * 2] = 1;
  auto skew_folds = stratified_folds(labelled(skew), 5, 2);
  std::vector<std::size_t> all;
  for (const auto& f : skew_folds) {
    int pos = 0;
    for (auto i : f) pos += skew[i];
    CHECK(f.size() == 20);
    CHECK(pos == 7);
    all.insert(all.end(), f.begin(), f.end());
  }
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);
}

TEST_CASE("uneven stratification stays within one sample per class") {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 10 + static_cast<int>(rng.next_u64() % 60);
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (auto& l : labels) l = rng.bernoulli(0.4) ? 1 : 0;
    labels[0] = 0;
    labels[1] = 1;
    const std::vector<double> fr{0.5, 0.3, 0.2};
    auto ds = labelled(labels);
    std::vector<std::vector<std::size_t>> parts;
    try {
      parts = stratified_split(ds, fr, rng.next_u64());
    } catch (const ConfigError&) {
      continue;  // too few samples for a non-empty partition
    }
    const int pos = static_cast<int>(std::count(labels.begin(), labels.end(), 1));
    std::size_t covered = 0;
    for (std::size_t p = 0; p < fr.size(); ++p) {
      int got = 0;
      for (auto i : parts[p]) got += labels[i];
      CHECK(std::abs(got - pos * fr[p]) < 1.0);
      CHECK(std::abs(static_cast<double>(parts[p].size() - got) - (n - pos) * fr[p]) < 1.0);
      covered += parts[p].size();
    }
    CHECK(covered == static_cast<std::size_t>(n));
  }
}

TEST_CASE("splits keep a subject's samples together") {
  Dataset ds;
  ds.extents = {1, 1};
  for (std::uint32_t i = 0; i < 40; ++i) {
    ds.samples.push_back({{0.0f}, static_cast<int>(i / 2 % 2), Domain::WD, i / 2});
  }
  auto parts = stratified_split(ds, {0.8, 0.2}, 4);
  for (const auto& p : parts) {
    for (auto i : p) {
      const auto partner = i % 2 == 0 ? i + 1 : i - 1;
      CHECK(std::find(p.begin(), p.end(), partner) != p.end());
    }
  }
}

TEST_CASE("invalid split requests") {
  auto ds = labelled({0, 1, 0, 1});
  CHECK_THROWS_AS(stratified_split(ds, {0.5, 0.4}, 0), ConfigError);
  CHECK_THROWS_AS(stratified_split(ds, {1.2, -0.2}, 0), ConfigError);
  CHECK_THROWS_AS(stratified_folds(ds, 5, 0), ConfigError);
  CHECK_THROWS_AS(stratified_folds(ds, 1, 0), ConfigError);
}

TEST_CASE("synthetic config validation and JSON") {
  SyntheticConfig cfg;
  cfg.ood_noise_sigma = cfg.wd_noise_sigma / 2;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  SyntheticConfig other;
  other.seed = 42;
  other.ood_gain = 0.5;
  nlohmann::json j = other;
  auto back = j.get<SyntheticConfig>();
  CHECK(back.seed == 42);
  CHECK(back.ood_gain == 0.5);
}
