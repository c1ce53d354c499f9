#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "sgat/autograd.hpp"
#include "sgat/gradcheck.hpp"
#include "sgat/trainer.hpp"

using namespace sgat;
using testing::micro_config;
using testing::random_normal;
using testing::toy_dataset;

namespace {

ModelConfig toy_config() {
  ModelConfig c = micro_config();
  c.conv_filters = {4, 4, 4};
  return c;
}

double accuracy(const Model& m, const Dataset& ds) {
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  auto p = predict_proba(m, ds.batch(idx, m.dense_weight.dtype())).values();
  int ok = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) ok += (p[i * 2 + 1] > 0.5 ? 1 : 0) == ds.samples[i].label;
  return static_cast<double>(ok) / static_cast<double>(ds.size());
}

std::vector<std::size_t> all_indices(const Dataset& ds) {
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

RegimeConfig quick(Regime r) {
  RegimeConfig c;
  c.regime = r;
  c.batch_size = 16;
  c.warmup_steps = 4;
  c.ramp_steps = 8;
  c.epsilon_train = 0.05;
  c.attack.n_iters = 3;
  c.max_epochs = 8;
  return c;
}

}  // namespace

TEST_CASE("standard loss examples") {
  DTypeScope f64(DType::F64);
  const std::vector<int> one{1};
  CHECK(standard_loss(one, Tensor::from({1}, {1.0 - 1e-7})).item() == doctest::Approx(1e-7).epsilon(1e-6));
  CHECK(standard_loss(one, Tensor::from({1}, {1.0})).item() == doctest::Approx(1e-7).epsilon(1e-6));
  const std::vector<int> y{1, 0};
  CHECK(standard_loss(y, Tensor::from({2}, {0.5, 0.5})).item() == doctest::Approx(std::log(2.0)));

  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + trial % 9;
    std::vector<int> labels(static_cast<std::size_t>(n));
    std::vector<double> p(static_cast<std::size_t>(n));
    double oracle = 0.0;
    for (int i = 0; i < n; ++i) {
      labels[static_cast<std::size_t>(i)] = rng.bernoulli(0.5) ? 1 : 0;
      p[static_cast<std::size_t>(i)] = rng.uniform(1e-9, 1.0 - 1e-9);
      const double q = std::clamp(p[static_cast<std::size_t>(i)], 1e-7, 1.0 - 1e-7);
      oracle -= labels[static_cast<std::size_t>(i)] == 1 ? std::log(q) : std::log(1.0 - q);
    }
    oracle /= n;
    CHECK(std::abs(standard_loss(labels, Tensor::from({n}, p)).item() - oracle) < 1e-7);
  }
  CHECK_THROWS_AS(standard_loss(y, Tensor::from({3}, {0.1, 0.2, 0.3})), ShapeError);
}

TEST_CASE("positive-class probability") {
  DTypeScope f64(DType::F64);
  auto p = positive_probability(Tensor::from({2, 2}, {0.0, 0.0, 0.0, std::log(3.0)})).values();
  CHECK(p[0] == doctest::Approx(0.5));
  CHECK(p[1] == doctest::Approx(0.75));
  CHECK_THROWS_AS(positive_probability(Tensor::zeros({2, 3})), ShapeError);
}

TEST_CASE("discrepancy is zero on identical inputs and symmetric") {
  Rng rng(2);
  Model m = init_model(toy_config(), 4);
  Tensor x = random_normal({3, 1, 8, 8}, rng);
  Tensor x2 = random_normal({3, 1, 8, 8}, rng);
  auto px = forward(m, x);
  CHECK(interpretation_discrepancy(px, forward(m, x), SaliencyMode::Detached).item() == 0.0);
  const double ab = interpretation_discrepancy(px, forward(m, x2), SaliencyMode::Detached).item();
  const double ba = interpretation_discrepancy(forward(m, x2), px, SaliencyMode::Detached).item();
  CHECK(ab == ba);
  CHECK(ab > 0.0);
  auto other = forward(init_model(micro_config(), 1), Tensor::zeros({3, 1, 8, 8}));
  CHECK_THROWS_AS(interpretation_discrepancy(px, other, SaliencyMode::Detached), ContractError);
}

TEST_CASE("discrepancy of a hand-built network") {
  DTypeScope f64(DType::F64);
  const std::vector<double> kv{1.0, -0.5, 0.25, 2.0, -1.0, 0.5, 1.5, -0.75};
  const std::vector<double> wv{0.3, -0.2, 0.5, 0.1, -0.4, 0.6, 0.2, -0.1,
                               -0.3, 0.4, -0.6, 0.2, 0.7, -0.5, 0.1, 0.3};
  const std::vector<double> xa{0.5, -1.0, 2.0, 0.0, 1.5, 0.25, -0.5, 1.0,
                               -2.0, 0.75, 1.0, -1.5, 0.0, 2.5, -0.25, 0.5};
  std::vector<double> xb = xa;
  for (std::size_t i = 0; i < xb.size(); ++i) xb[i] += (i % 3 == 0 ? 0.3 : -0.2);
  Tensor k = Tensor::from({2, 1, 2, 2}, kv).set_requires_grad(true);
  Tensor w = Tensor::from({2, 8}, wv).set_requires_grad(true);
  auto pass_of = [&](const std::vector<double>& xv) {
    ForwardPass p;
    p.features = relu(conv_same(Tensor::from({1, 1, 4, 4}, xv), k));
    p.clean_logits = dense(flatten(maxpool(p.features, 2)), w, Tensor::zeros({2}));
    p.logits = p.clean_logits;
    return p;
  };
  // Maps by hand: n^c_m is the channel's dense-row sum over 16 positions.
  auto hand_map = [&](const std::vector<double>& xv, int c, int i, int j) {
    double out = 0.0;
    for (int m = 0; m < 2; ++m) {
      double f = 0.0;
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
          if (i + a < 4 && j + b < 4) f += xv[static_cast<std::size_t>((i + a) * 4 + j + b)] * kv[static_cast<std::size_t>(m * 4 + a * 2 + b)];
      double n = 0.0;
      for (int q = 0; q < 4; ++q) n += wv[static_cast<std::size_t>(c * 8 + m * 4 + q)];
      out += n / 16.0 * std::max(0.0, f);
    }
    return std::max(0.0, out);
  };
  double expected = 0.0;
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) expected += std::abs(hand_map(xa, c, i, j) - hand_map(xb, c, i, j));
  expected *= 0.5;
  REQUIRE(expected > 0.0);
  const double got =
      interpretation_discrepancy(pass_of(xa), pass_of(xb), SaliencyMode::Detached).item();
  CHECK(std::abs(got - expected) < 1e-6);
}

TEST_CASE("adversarial and adjusted loss degenerate cases") {
  DTypeScope f64(DType::F64);
  Rng data(3);
  Model m = init_model(toy_config(), 5);
  Tensor x = random_normal({4, 1, 8, 8}, data);
  const std::vector<int> y{0, 1, 1, 0};

  AttackConfig zero;
  zero.epsilon = 0.0;
  Rng a1(1), d1(2), d2(2);
  const double adv = adversarial_loss(m, x, y, zero, a1, d1).item();
  const double std_loss = training_loss(m, x, y, x, {.dropout_rng = &d2}).ce.item();
  CHECK(adv == std_loss);

  AttackConfig att;
  att.epsilon = 0.05;
  Rng a2(4), d3(5), a3(4), d4(5);
  CHECK(adjusted_loss(m, x, y, att, 0.0, SaliencyMode::Detached, a2, d3).item() ==
        adversarial_loss(m, x, y, att, a3, d4).item());

  // L_adj = L_adv + lambda * D with one shared x_adv.
  Rng a4(6), d5(7);
  Tensor x_adv = attack_batch(m, x, y, att, 2.0, SaliencyMode::Detached, a4);
  LossOptions o;
  o.lambda_interp = 2.0;
  o.discrepancy = true;
  o.dropout_rng = &d5;
  auto t = training_loss(m, x, y, x_adv, o);
  CHECK(t.adjusted.item() == doctest::Approx(t.ce.item() + 2.0 * t.discrepancy.item()).epsilon(1e-12));
  CHECK(t.total.item() == doctest::Approx(t.adjusted.item() + t.l2.item()).epsilon(1e-12));
}

TEST_CASE("loss gradients match finite differences on the micro-net") {
  DTypeScope f64(DType::F64);
  Rng data(8);
  Model m = init_model(micro_config(), 11);
  Tensor x = random_normal({4, 1, 8, 8}, data);
  const std::vector<int> y{1, 0, 0, 1};
  const auto params = m.parameters();

  auto benign = [&] {
    Rng r(7);
    return training_loss(m, x, y, x, {.dropout_rng = &r}).total;
  };
  AttackConfig att;
  att.epsilon = 0.05;
  Rng ar(9);
  const Tensor x_adv = attack_batch(m, x, y, att, 0.0, SaliencyMode::Detached, ar);
  auto adversarial = [&] {
    Rng r(7);
    return training_loss(m, x, y, x_adv, {.dropout_rng = &r}).total;
  };
  // Detached weights are constants of the loss, so the oracle holds them
  // at their values for the unperturbed parameters.
  Rng wr(7);
  const SaliencyWeights frozen = saliency_weights(
      forward(m, x, {.batch_stats = true, .dropout = false, .rng = nullptr}),
      forward(m, x_adv, ForwardOptions::training(wr)), SaliencyMode::Detached);
  auto adjusted = [&](const SaliencyWeights* weights) {
    Rng r(7);
    LossOptions o;
    o.lambda_interp = 3.0;
    o.discrepancy = true;
    o.dropout_rng = &r;
    o.frozen_weights = weights;
    return training_loss(m, x, y, x_adv, o).total;
  };
  auto g_detached = grad(adjusted(nullptr), params);
  auto g_frozen = grad(adjusted(&frozen), params);
  for (std::size_t p = 0; p < params.size(); ++p) CHECK(g_detached[p].values() == g_frozen[p].values());

  for (std::size_t p = 0; p < params.size(); ++p) {
    CAPTURE(p);
    CHECK(finite_diff_check_variable(benign, params[p]).max_rel_error < 1e-4);
    CHECK(finite_diff_check_variable(adversarial, params[p]).max_rel_error < 1e-4);
    CHECK(finite_diff_check_variable([&] { return adjusted(&frozen); }, params[p]).max_rel_error < 1e-4);
  }
}

TEST_CASE("full-mode discrepancy gradient matches finite differences") {
  DTypeScope f64(DType::F64);
  Rng data(12);
  Model m = init_model(micro_config(), 13);
  Tensor x = random_normal({3, 1, 8, 8}, data);
  const std::vector<int> y{1, 0, 1};
  AttackConfig att;
  att.epsilon = 0.1;
  Rng ar(14);
  const Tensor x_adv = attack_batch(m, x, y, att, 2.0, SaliencyMode::Full, ar);
  auto term = [&] {
    Rng r(7);
    LossOptions o;
    o.lambda_interp = 2.0;
    o.mode = SaliencyMode::Full;
    o.discrepancy = true;
    o.dropout_rng = &r;
    return mul_scalar(training_loss(m, x, y, x_adv, o).discrepancy, 2.0);
  };
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    CHECK(finite_diff_check_variable(term, m.blocks[b].kernel).max_rel_error < 1e-3);
  }
  CHECK(finite_diff_check_variable(term, m.dense_weight).max_rel_error < 1e-3);
}

TEST_CASE("detached and full modes: equal losses, different gradients") {
  DTypeScope f64(DType::F64);
  Rng data(15);
  Model m = init_model(micro_config(), 16);
  Tensor x = random_normal({4, 1, 8, 8}, data);
  const std::vector<int> y{1, 0, 1, 0};
  AttackConfig att;
  att.epsilon = 0.1;
  Rng ar(17);
  const Tensor x_adv = attack_batch(m, x, y, att, 1.0, SaliencyMode::Detached, ar);
  auto run = [&](SaliencyMode mode) {
    Rng r(7);
    LossOptions o;
    o.lambda_interp = 5.0;
    o.mode = mode;
    o.discrepancy = true;
    o.dropout_rng = &r;
    return training_loss(m, x, y, x_adv, o).adjusted;
  };
  Tensor det = run(SaliencyMode::Detached);
  Tensor full = run(SaliencyMode::Full);
  CHECK(det.item() == full.item());
  auto gd = grad(det, std::vector<Tensor>{m.dense_weight})[0].values();
  auto gf = grad(full, std::vector<Tensor>{m.dense_weight})[0].values();
  double diff = 0.0;
  for (std::size_t i = 0; i < gd.size(); ++i) diff = std::max(diff, std::abs(gd[i] - gf[i]));
  CHECK(diff > 1e-6);
}

TEST_CASE("adversarial loss rises over the benign loss on a trained model") {
  auto train = toy_dataset(160, {8, 8}, 20, 0.5);
  auto val = toy_dataset(40, {8, 8}, 21, 0.5);
  RegimeConfig cfg;
  cfg.max_epochs = 40;
  cfg.learning_rate = 3e-3;
  auto trained = fit(init_model(toy_config(), 22), train, val, cfg).model;
  REQUIRE(accuracy(trained, train) > 0.8);

  // Per-sample ascent at the inference function.
  Rng ar(23);
  AttackConfig att;
  att.epsilon = 0.1;
  int rises = 0;
  int total = 0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    const std::size_t idx[1] = {i};
    Tensor x = val.batch(idx);
    const auto y = val.labels(idx);
    Tensor x_adv = attack_batch(trained, x, y, att, 0.0, SaliencyMode::Detached, ar);
    NoGradGuard ng;
    const double before = standard_loss(y, positive_probability(forward(trained, x).logits)).item();
    const double after = standard_loss(y, positive_probability(forward(trained, x_adv).logits)).item();
    rises += after >= before ? 1 : 0;
    ++total;
  }
  CHECK(rises >= 0.95 * total);

  // Batch-level Eq. 4 vs Eq. 3 under the training forward.
  int batch_rises = 0;
  const int batches = 20;
  Rng pick(24);
  for (int b = 0; b < batches; ++b) {
    std::vector<std::size_t> idx;
    for (int k = 0; k < 8; ++k) idx.push_back(pick.next_u64() % val.size());
    Tensor x = val.batch(idx);
    const auto y = val.labels(idx);
    Rng a(100 + b), d1(200 + b), d2(200 + b);
    const double adv = adversarial_loss(trained, x, y, att, a, d1).item();
    const double ben = training_loss(trained, x, y, x, {.dropout_rng = &d2}).ce.item();
    batch_rises += adv >= ben ? 1 : 0;
  }
  CHECK(batch_rises >= 19);
}

TEST_CASE("normal training fits a separable toy") {
  auto train = toy_dataset(200, {8, 8}, 30, 1.0);
  auto val = toy_dataset(40, {8, 8}, 31, 1.0);
  RegimeConfig cfg;
  cfg.max_epochs = 200;
  cfg.learning_rate = 3e-3;
  auto res = fit(init_model(toy_config(), 32), train, val, cfg);
  CHECK(res.history.epochs.size() <= 200);
  CHECK(accuracy(res.model, train) >= 0.99);
}

TEST_CASE("the epsilon column follows the schedule") {
  auto train = toy_dataset(16, {8, 8}, 40, 0.5);
  auto val = toy_dataset(8, {8, 8}, 41, 0.5);
  RegimeConfig cfg;
  cfg.regime = Regime::Adversarial;
  cfg.epsilon_train = 0.001;
  cfg.attack.n_iters = 1;
  cfg.batch_size = 16;  // one step per epoch
  cfg.max_epochs = 2450;
  cfg.early_stop_patience = 1000;
  auto res = fit(init_model(micro_config(), 42), train, val, cfg);
  const auto& steps = res.history.steps;
  REQUIRE(steps.size() == 2450);
  const EpsilonSchedule s{400, 2000, 0.001};
  for (const auto& r : steps) REQUIRE(r.epsilon == epsilon_at(r.step, s));
  CHECK(steps[0].epsilon == 0.0);
  CHECK(steps[399].epsilon == 0.0);
  CHECK(steps[1400].epsilon == doctest::Approx(0.0005));
  CHECK(steps[2400].epsilon == 0.001);
  // Selection starts at full strength.
  CHECK(res.history.best_epoch >= 2400);
}

TEST_CASE("learning-rate plateaus and early stopping") {
  auto train = toy_dataset(64, {8, 8}, 50, 0.1);
  auto val = toy_dataset(32, {8, 8}, 51, 0.1);
  RegimeConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.max_epochs = 300;
  cfg.lr_plateau_patience = 3;
  cfg.early_stop_patience = 15;
  auto res = fit(init_model(toy_config(), 52), train, val, cfg);
  const auto& e = res.history.epochs;
  int drops = 0;
  for (std::size_t i = 1; i < e.size(); ++i) {
    CHECK(e[i].lr <= e[i - 1].lr);
    if (e[i].lr != e[i - 1].lr) {
      CHECK(e[i].lr == e[i - 1].lr * 0.8);
      ++drops;
    }
  }
  CHECK(drops >= 1);
  CHECK(res.history.stopped_early);
  const double returned = validation_loss(res.model, val, cfg.batch_size);
  CHECK(returned <= e.back().val_loss);
  CHECK(returned == doctest::Approx(e[static_cast<std::size_t>(res.history.best_epoch)].val_loss).epsilon(1e-12));
}

TEST_CASE("zero-epsilon adversarial training equals normal training") {
  auto train = toy_dataset(48, {8, 8}, 60, 0.5);
  auto val = toy_dataset(16, {8, 8}, 61, 0.5);
  RegimeConfig normal = quick(Regime::Normal);
  normal.epsilon_train = 0.0;
  RegimeConfig adv = quick(Regime::Adversarial);
  adv.epsilon_train = 0.0;
  adv.attack.random_start = false;
  auto a = fit(init_model(toy_config(), 62), train, val, normal).history.steps;
  auto b = fit(init_model(toy_config(), 62), train, val, adv).history.steps;
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i].total - b[i].total) < 1e-6);
}

TEST_CASE("lambda zero equals the adversarial regime") {
  auto train = toy_dataset(48, {8, 8}, 70, 0.5);
  auto val = toy_dataset(16, {8, 8}, 71, 0.5);
  auto a = fit(init_model(toy_config(), 72), train, val, quick(Regime::Adversarial)).history.steps;
  auto b = fit(init_model(toy_config(), 72), train, val, quick(Regime::InterpAware)).history.steps;
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::abs(a[i].ce - b[i].ce) < 1e-6);
    CHECK(std::abs(a[i].total - b[i].total) < 1e-6);
  }
}

TEST_CASE("logged adjusted loss decomposes") {
  auto train = toy_dataset(48, {8, 8}, 80, 0.5);
  auto val = toy_dataset(16, {8, 8}, 81, 0.5);
  for (auto mode : {SaliencyMode::Detached, SaliencyMode::Full}) {
    RegimeConfig cfg = quick(Regime::InterpAware);
    cfg.lambda_interp = 3.0;
    cfg.saliency_mode = mode;
    auto res = fit(init_model(toy_config(), 82), train, val, cfg);
    int with_term = 0;
    for (const auto& s : res.history.steps) {
      CHECK(std::abs(s.adjusted - 3.0 * s.discrepancy - s.ce) < 1e-6);
      with_term += s.discrepancy > 0.0 ? 1 : 0;
    }
    CHECK(with_term > 0);
    CHECK(res.history.epochs_csv().rfind("epoch,train_loss,val_loss,lr,epsilon,discrepancy\n", 0) == 0);
  }
}

TEST_CASE("larger lambda does not increase the final discrepancy") {
  auto train = toy_dataset(64, {8, 8}, 90, 0.5);
  auto val = toy_dataset(16, {8, 8}, 91, 0.5);
  std::vector<double> medians;
  for (double lambda : {0.0, 1.0, 10.0}) {
    std::vector<double> finals;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      RegimeConfig cfg = quick(Regime::InterpAware);
      cfg.lambda_interp = lambda;
      cfg.warmup_steps = 0;
      cfg.ramp_steps = 0;
      cfg.epsilon_train = 0.1;
      cfg.max_epochs = 25;
      cfg.learning_rate = 3e-3;
      cfg.seed = seed;
      auto h = fit(init_model(toy_config(), 100 + seed), train, val, cfg).history;
      finals.push_back(h.epochs.back().discrepancy);
    }
    std::sort(finals.begin(), finals.end());
    medians.push_back(finals[2]);
  }
  MESSAGE("median final discrepancy: " << medians[0] << " " << medians[1] << " " << medians[2]);
  CHECK(medians[1] <= medians[0]);
  CHECK(medians[2] <= medians[1]);
}

TEST_CASE("training is deterministic") {
  auto train = toy_dataset(32, {8, 8}, 110, 0.5);
  auto val = toy_dataset(16, {8, 8}, 111, 0.5);
  RegimeConfig cfg = quick(Regime::InterpAware);
  cfg.lambda_interp = 1.0;
  auto a = fit(init_model(toy_config(), 112), train, val, cfg);
  auto b = fit(init_model(toy_config(), 112), train, val, cfg);
  CHECK(serialize_checkpoint(a.model) == serialize_checkpoint(b.model));
  CHECK(a.history.steps_csv() == b.history.steps_csv());
}

TEST_CASE("regime configuration") {
  RegimeConfig cfg;
  cfg.lambda_interp = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);  // lambda outside interp_aware
  cfg.regime = Regime::InterpAware;
  cfg.validate();
  cfg.lambda_interp = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(regime_from_string("robust"), ConfigError);

  RegimeConfig j = quick(Regime::InterpAware);
  j.lambda_interp = 3.0;
  j.saliency_mode = SaliencyMode::Full;
  nlohmann::json doc = j;
  auto back = doc.get<RegimeConfig>();
  CHECK(back.regime == Regime::InterpAware);
  CHECK(back.lambda_interp == 3.0);
  CHECK(back.saliency_mode == SaliencyMode::Full);
  CHECK(back.attack.n_iters == 3);

  Dataset empty;
  empty.extents = {8, 8};
  auto some = toy_dataset(4, {8, 8}, 1, 1.0);
  CHECK_THROWS_AS(fit(init_model(micro_config(), 1), empty, some, RegimeConfig{}), ConfigError);
  CHECK_THROWS_AS(fit(init_model(micro_config(), 1), some, empty, RegimeConfig{}), ConfigError);
}
