#include "sgat/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>

#include "sgat/autograd.hpp"

namespace sgat {

const char* to_string(Regime r) {
  switch (r) {
    case Regime::Normal:
      return "normal";
    case Regime::Combined:
      return "combined";
    case Regime::Adversarial:
      return "adversarial";
    case Regime::InterpAware:
      return "interp_aware";
  }
  return "normal";
}

Regime regime_from_string(const std::string& s) {
  if (s == "normal") return Regime::Normal;
  if (s == "combined") return Regime::Combined;
  if (s == "adversarial") return Regime::Adversarial;
  if (s == "interp_aware" || s == "interp") return Regime::InterpAware;
  throw ConfigError("unknown regime '" + s +
                    "' (expected normal, combined, adversarial or interp_aware)");
}

void RegimeConfig::validate() const {
  if (!(lambda_interp >= 0.0) || !std::isfinite(lambda_interp)) {
    throw ConfigError("lambda_interp must be a finite value >= 0");
  }
  if (lambda_interp > 0.0 && regime != Regime::InterpAware) {
    throw ConfigError("lambda_interp only applies to the interp_aware regime");
  }
  if (!(epsilon_train >= 0.0) || !std::isfinite(epsilon_train)) {
    throw ConfigError("epsilon_train must be a finite value >= 0");
  }
  if (warmup_steps < 0 || ramp_steps < 0) throw ConfigError("schedule steps must be >= 0");
  AttackConfig a = attack;
  a.epsilon = epsilon_train;
  a.validate();
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (max_epochs < 1) throw ConfigError("max_epochs must be positive");
  if (early_stop_patience < 1 || lr_plateau_patience < 1) {
    throw ConfigError("patience values must be positive");
  }
  if (!(lr_plateau_factor > 0.0 && lr_plateau_factor <= 1.0)) {
    throw ConfigError("lr_plateau_factor must be in (0, 1]");
  }
  if (!(min_delta >= 0.0)) throw ConfigError("min_delta must be >= 0");
  if (!(prob_clamp > 0.0 && prob_clamp < 0.5)) throw ConfigError("prob_clamp must be in (0, 0.5)");
}

bool RegimeConfig::uses_attack() const {
  return regime == Regime::Adversarial || regime == Regime::InterpAware;
}

EpsilonSchedule RegimeConfig::schedule() const {
  return {warmup_steps, ramp_steps, epsilon_train};
}

void to_json(nlohmann::json& j, const RegimeConfig& c) {
  j = nlohmann::json{{"regime", to_string(c.regime)},
                     {"lambda_interp", c.lambda_interp},
                     {"epsilon_train", c.epsilon_train},
                     {"warmup_steps", c.warmup_steps},
                     {"ramp_steps", c.ramp_steps},
                     {"attack", c.attack},
                     {"learning_rate", c.learning_rate},
                     {"batch_size", c.batch_size},
                     {"max_epochs", c.max_epochs},
                     {"early_stop_patience", c.early_stop_patience},
                     {"lr_plateau_patience", c.lr_plateau_patience},
                     {"lr_plateau_factor", c.lr_plateau_factor},
                     {"min_delta", c.min_delta},
                     {"prob_clamp", c.prob_clamp},
                     {"saliency_mode", to_string(c.saliency_mode)},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, RegimeConfig& c) {
  RegimeConfig d;
  c.regime = regime_from_string(j.value("regime", std::string(to_string(d.regime))));
  c.lambda_interp = j.value("lambda_interp", d.lambda_interp);
  c.epsilon_train = j.value("epsilon_train", d.epsilon_train);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.ramp_steps = j.value("ramp_steps", d.ramp_steps);
  c.attack = j.value("attack", d.attack);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.max_epochs = j.value("max_epochs", d.max_epochs);
  c.early_stop_patience = j.value("early_stop_patience", d.early_stop_patience);
  c.lr_plateau_patience = j.value("lr_plateau_patience", d.lr_plateau_patience);
  c.lr_plateau_factor = j.value("lr_plateau_factor", d.lr_plateau_factor);
  c.min_delta = j.value("min_delta", d.min_delta);
  c.prob_clamp = j.value("prob_clamp", d.prob_clamp);
  c.saliency_mode =
      saliency_mode_from_string(j.value("saliency_mode", std::string(to_string(d.saliency_mode))));
  c.seed = j.value("seed", d.seed);
}

Tensor standard_loss(std::span<const int> y, const Tensor& y_hat, double clamp_bound) {
  if (y_hat.rank() != 1 || static_cast<std::int64_t>(y.size()) != y_hat.dim(0)) {
    throw ShapeError("standard_loss: " + std::to_string(y.size()) + " labels vs predictions " +
                     shape_str(y_hat.shape()));
  }
  if (y.empty()) throw ShapeError("standard_loss: empty batch");
  std::vector<double> pos(y.size());
  std::vector<double> neg_w(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] != 0 && y[i] != 1) throw ContractError("labels must be 0 or 1");
    pos[i] = y[i];
    neg_w[i] = 1.0 - y[i];
  }
  const Shape s{y_hat.dim(0)};
  Tensor c = clamp(y_hat, clamp_bound, 1.0 - clamp_bound);
  Tensor ll = add(mul_const(log(c), Tensor::from(s, pos, y_hat.dtype())),
                  mul_const(log(add_scalar(neg(c), 1.0)), Tensor::from(s, neg_w, y_hat.dtype())));
  return neg(mean(ll));
}

Tensor positive_probability(const Tensor& logits) {
  if (logits.rank() != 2 || logits.dim(1) != 2) {
    throw ShapeError("positive_probability expects [N, 2] logits, got " +
                     shape_str(logits.shape()));
  }
  const std::int64_t n = logits.dim(0);
  Tensor mask = Tensor::from({1, 2}, {0.0, 1.0}, logits.dtype());
  return reshape(sum_to(mul_const(softmax_last(logits), mask), {n, 1}), {n});
}

SaliencyWeights saliency_weights(const ForwardPass& pass_x, const ForwardPass& pass_adv,
                                 SaliencyMode mode) {
  SaliencyWeights w;
  for (int c = 0; c < 2; ++c) {
    w.benign[static_cast<std::size_t>(c)] = gradcam_weights(pass_x, c, mode);
    w.adversarial[static_cast<std::size_t>(c)] = gradcam_weights(pass_adv, c, mode);
  }
  return w;
}

Tensor interpretation_discrepancy(const ForwardPass& pass_x, const ForwardPass& pass_adv,
                                  const SaliencyWeights& weights) {
  if (pass_x.features.shape() != pass_adv.features.shape()) {
    throw ContractError("discrepancy between maps of shapes " +
                        shape_str(pass_x.features.shape()) + " and " +
                        shape_str(pass_adv.features.shape()));
  }
  Tensor total;
  for (std::size_t c = 0; c < 2; ++c) {
    Tensor a = weighted_activation(pass_x.features, weights.benign[c]);
    Tensor b = weighted_activation(pass_adv.features, weights.adversarial[c]);
    Tensor l1 = sum(abs(sub(a, b)));
    total = total.defined() ? add(total, l1) : l1;
  }
  return mul_scalar(total, 0.5 / static_cast<double>(pass_x.features.dim(0)));
}

Tensor interpretation_discrepancy(const ForwardPass& pass_x, const ForwardPass& pass_adv,
                                  SaliencyMode mode) {
  return interpretation_discrepancy(pass_x, pass_adv, saliency_weights(pass_x, pass_adv, mode));
}

LossTerms training_loss(const Model& model, const Tensor& x, std::span<const int> y,
                        const Tensor& x_adv, const LossOptions& options) {
  if (options.dropout_rng == nullptr) throw ContractError("training_loss needs a dropout stream");
  LossTerms t;
  ForwardPass adv = forward(model, x_adv, ForwardOptions::training(*options.dropout_rng));
  t.ce = standard_loss(y, positive_probability(adv.logits), options.prob_clamp);
  t.adjusted = t.ce;
  if (options.discrepancy) {
    ForwardPass benign = forward(model, x, {.batch_stats = true, .dropout = false, .rng = nullptr});
    Tensor d = options.frozen_weights != nullptr
                   ? interpretation_discrepancy(benign, adv, *options.frozen_weights)
                   : interpretation_discrepancy(benign, adv, options.mode);
    if (options.lambda_interp > 0.0) {
      t.adjusted = add(t.ce, mul_scalar(d, options.lambda_interp));
      t.discrepancy = d;
    } else {
      t.discrepancy = d.detach();
    }
  }
  t.l2 = l2_penalty(model);
  t.total = add(t.adjusted, t.l2);
  t.batch_stats = std::move(adv.batch_stats);
  return t;
}

Tensor attack_batch(const Model& model, const Tensor& x, std::span<const int> y,
                    const AttackConfig& attack, double lambda_interp, SaliencyMode mode,
                    Rng& attack_rng, double prob_clamp) {
  std::vector<int> labels(y.begin(), y.end());
  std::array<Tensor, 2> benign_maps;
  if (lambda_interp > 0.0 && attack.epsilon > 0.0) {
    GradModeGuard recording(true);
    ForwardPass p = forward(model, x);
    for (int c = 0; c < 2; ++c) {
      benign_maps[static_cast<std::size_t>(c)] =
          activation_map(p, c, SaliencyMode::Detached).values.detach();
    }
  }
  AttackObjective objective = [&](const Tensor& candidate) {
    ForwardPass p = forward(model, candidate);
    Tensor loss = standard_loss(labels, positive_probability(p.logits), prob_clamp);
    if (lambda_interp > 0.0) {
      Tensor d;
      for (int c = 0; c < 2; ++c) {
        Tensor l1 = sum(abs(sub(benign_maps[static_cast<std::size_t>(c)],
                                activation_map(p, c, mode).values)));
        d = d.defined() ? add(d, l1) : l1;
      }
      loss = add(loss, mul_scalar(d, 0.5 * lambda_interp / static_cast<double>(x.dim(0))));
    }
    return loss;
  };
  return pgd(x, attack, objective, attack_rng);
}

Tensor adversarial_loss(const Model& model, const Tensor& x, std::span<const int> y,
                        const AttackConfig& attack, Rng& attack_rng, Rng& dropout_rng) {
  Tensor x_adv = attack_batch(model, x, y, attack, 0.0, SaliencyMode::Detached, attack_rng);
  return training_loss(model, x, y, x_adv, {.dropout_rng = &dropout_rng}).ce;
}

Tensor adjusted_loss(const Model& model, const Tensor& x, std::span<const int> y,
                     const AttackConfig& attack, double lambda_interp, SaliencyMode mode,
                     Rng& attack_rng, Rng& dropout_rng) {
  Tensor x_adv = attack_batch(model, x, y, attack, lambda_interp, mode, attack_rng);
  LossOptions o;
  o.lambda_interp = lambda_interp;
  o.mode = mode;
  o.discrepancy = true;
  o.dropout_rng = &dropout_rng;
  return training_loss(model, x, y, x_adv, o).adjusted;
}

double validation_loss(const Model& model, const Dataset& ds, int batch_size, double prob_clamp) {
  if (ds.empty()) throw ConfigError("empty validation set");
  NoGradGuard no_grad;
  double total = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += static_cast<std::size_t>(batch_size)) {
    idx.clear();
    for (std::size_t i = start; i < std::min(ds.size(), start + static_cast<std::size_t>(batch_size)); ++i) {
      idx.push_back(i);
    }
    const auto labels = ds.labels(idx);
    ForwardPass p = forward(model, ds.batch(idx, model.dense_weight.dtype()));
    total += standard_loss(labels, positive_probability(p.logits), prob_clamp).item() *
             static_cast<double>(idx.size());
  }
  return total / static_cast<double>(ds.size()) + l2_penalty(model).item();
}

Adam::Adam(std::vector<Tensor> params, double learning_rate, double beta1, double beta2,
           double eps)
    : params_(std::move(params)), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
  }
}

void Adam::step(const std::vector<Tensor>& grads) {
  if (grads.size() != params_.size()) throw ContractError("Adam: gradient count mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (grads[k].shape() != params_[k].shape()) throw ContractError("Adam: gradient shape mismatch");
    visit_dtype(params_[k].dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto p = params_[k].mutable_data<T>();
      const auto g = grads[k].data<T>();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i];
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
        const double update = lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        p[i] = static_cast<T>(static_cast<double>(p[i]) - update);
      }
    });
  }
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

std::string TrainHistory::epochs_csv() const {
  std::string out = "epoch,train_loss,val_loss,lr,epsilon,discrepancy\n";
  for (const auto& e : epochs) {
    out += std::to_string(e.epoch) + "," + fmt(e.train_loss) + "," + fmt(e.val_loss) + "," +
           fmt(e.lr) + "," + fmt(e.epsilon) + "," + fmt(e.discrepancy) + "\n";
  }
  return out;
}

std::string TrainHistory::steps_csv() const {
  std::string out = "step,epoch,epsilon,ce,discrepancy,adjusted,l2,total\n";
  for (const auto& s : steps) {
    out += std::to_string(s.step) + "," + std::to_string(s.epoch) + "," + fmt(s.epsilon) + "," +
           fmt(s.ce) + "," + fmt(s.discrepancy) + "," + fmt(s.adjusted) + "," + fmt(s.l2) + "," +
           fmt(s.total) + "\n";
  }
  return out;
}

TrainResult fit(Model model, const Dataset& train, const Dataset& validation,
                const RegimeConfig& config) {
  config.validate();
  if (train.empty() || validation.empty()) throw ConfigError("empty training or validation split");
  if (train.extents != model.config.input_extents ||
      validation.extents != model.config.input_extents) {
    throw ShapeError("dataset extents " + shape_str(train.extents) + " do not match the model input " +
                     shape_str(model.config.input_extents));
  }
  const DType dtype = model.dense_weight.dtype();
  Rng shuffle_rng(derive_seed(config.seed, {1}));
  Rng dropout_rng(derive_seed(config.seed, {2}));
  Rng attack_rng(derive_seed(config.seed, {3}));
  const auto params = model.parameters();
  Adam adam(params, config.learning_rate);
  const EpsilonSchedule schedule = config.schedule();
  const bool attacking = config.uses_attack();
  const bool interp = config.regime == Regime::InterpAware;
  const std::int64_t full_strength = schedule.warmup_steps + schedule.ramp_steps;

  TrainHistory history;
  std::optional<Model> best;
  double best_val = std::numeric_limits<double>::infinity();
  double stop_ref = best_val;
  double plateau_ref = best_val;
  int stop_wait = 0;
  int plateau_wait = 0;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const auto bs = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.next_u64() % i]);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = adam.learning_rate();
    std::size_t n_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::span<const std::size_t> idx(order.data() + start,
                                             std::min(bs, order.size() - start));
      const auto y = train.labels(idx);
      Tensor x = train.batch(idx, dtype);
      const auto step = static_cast<std::int64_t>(model.step);
      const double eps = attacking ? epsilon_at(step, schedule) : 0.0;
      Tensor x_adv = x;
      LossOptions opts;
      opts.prob_clamp = config.prob_clamp;
      opts.dropout_rng = &dropout_rng;
      if (attacking && eps > 0.0) {
        AttackConfig a = config.attack;
        a.epsilon = eps;
        const double lambda = interp ? config.lambda_interp : 0.0;
        x_adv = attack_batch(model, x, y, a, lambda, config.saliency_mode, attack_rng,
                             config.prob_clamp);
        if (interp) {
          opts.discrepancy = true;
          opts.lambda_interp = lambda;
          opts.mode = config.saliency_mode;
        }
      }
      LossTerms terms = training_loss(model, x, y, x_adv, opts);
      if (!std::isfinite(terms.total.item())) {
        throw NumericError("non-finite training loss at step " + std::to_string(step));
      }
      adam.step(grad(terms.total, params));
      update_running_stats(model, terms.batch_stats);
      ++model.step;

      StepRecord s;
      s.step = step;
      s.epoch = epoch;
      s.epsilon = eps;
      s.ce = terms.ce.item();
      s.discrepancy = terms.discrepancy.defined() ? terms.discrepancy.item() : 0.0;
      s.adjusted = terms.adjusted.item();
      s.l2 = terms.l2.item();
      s.total = terms.total.item();
      history.steps.push_back(s);
      rec.train_loss += s.total;
      rec.discrepancy += s.discrepancy;
      rec.epsilon = eps;
      ++n_steps;
    }
    rec.train_loss /= static_cast<double>(n_steps);
    rec.discrepancy /= static_cast<double>(n_steps);
    rec.val_loss = validation_loss(model, validation, config.batch_size, config.prob_clamp);
    history.epochs.push_back(rec);

    const bool armed = !attacking || static_cast<std::int64_t>(model.step) - 1 >= full_strength;
    if (!armed) continue;
    if (rec.val_loss < best_val) {
      best_val = rec.val_loss;
      best = model.clone();
      history.best_epoch = epoch;
    }
    if (rec.val_loss < stop_ref - config.min_delta) {
      stop_ref = rec.val_loss;
      stop_wait = 0;
    } else if (++stop_wait >= config.early_stop_patience) {
      history.stopped_early = true;
      break;
    }
    if (rec.val_loss < plateau_ref - config.min_delta) {
      plateau_ref = rec.val_loss;
      plateau_wait = 0;
    } else if (++plateau_wait >= config.lr_plateau_patience) {
      adam.set_learning_rate(adam.learning_rate() * config.lr_plateau_factor);
      plateau_wait = 0;
    }
  }
  if (best) {
    return {std::move(*best), std::move(history)};
  }
  return {std::move(model), std::move(history)};
}

}  // namespace sgat
