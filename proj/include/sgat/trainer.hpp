#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sgat/attack.hpp"
#include "sgat/data.hpp"
#include "sgat/gradcam.hpp"
#include "sgat/model.hpp"

namespace sgat {

enum class Regime { Normal, Combined, Adversarial, InterpAware };

const char* to_string(Regime r);
Regime regime_from_string(const std::string& s);

struct RegimeConfig {
  Regime regime = Regime::Normal;
  double lambda_interp = 0.0;
  double epsilon_train = 0.001;
  std::int64_t warmup_steps = 400;
  std::int64_t ramp_steps = 2000;
  /// PGD internals; its epsilon field is replaced by the scheduled value.
  AttackConfig attack;
  double learning_rate = 3e-4;
  int batch_size = 32;
  int max_epochs = 3000;
  int early_stop_patience = 50;
  int lr_plateau_patience = 20;
  double lr_plateau_factor = 0.8;
  double min_delta = 1e-4;
  double prob_clamp = 1e-7;
  SaliencyMode saliency_mode = SaliencyMode::Detached;
  std::uint64_t seed = 0;

  void validate() const;
  /// Adversarial or interpretation-aware.
  bool uses_attack() const;
  EpsilonSchedule schedule() const;
};

void to_json(nlohmann::json& j, const RegimeConfig& c);
void from_json(const nlohmann::json& j, RegimeConfig& c);

/// Binary cross-entropy on positive-class probabilities y_hat[N], clamped
/// to [clamp, 1 - clamp].
Tensor standard_loss(std::span<const int> y, const Tensor& y_hat, double clamp = 1e-7);

/// Softmax probability of class 1 from [N, 2] logits, as [N].
Tensor positive_probability(const Tensor& logits);

/// Grad-CAM weights of both classes for a benign and an adversarial pass.
struct SaliencyWeights {
  std::array<Tensor, 2> benign;
  std::array<Tensor, 2> adversarial;
};

SaliencyWeights saliency_weights(const ForwardPass& pass_x, const ForwardPass& pass_adv,
                                 SaliencyMode mode);

/// Half the summed L1 distance between the two classes' maps, averaged
/// over the batch.
Tensor interpretation_discrepancy(const ForwardPass& pass_x, const ForwardPass& pass_adv,
                                  SaliencyMode mode);
/// Same quantity with the channel weights supplied (e.g. frozen).
Tensor interpretation_discrepancy(const ForwardPass& pass_x, const ForwardPass& pass_adv,
                                  const SaliencyWeights& weights);

/// Loss terms of one training step on given (possibly adversarial) inputs.
struct LossTerms {
  Tensor ce;           // cross-entropy on x_adv (x itself for benign steps)
  Tensor discrepancy;  // undefined unless requested
  Tensor adjusted;     // ce + lambda * discrepancy
  Tensor l2;
  Tensor total;        // adjusted + l2
  std::vector<BatchNormStats> batch_stats;
};

struct LossOptions {
  double lambda_interp = 0.0;
  SaliencyMode mode = SaliencyMode::Detached;
  /// Compute the discrepancy term (it enters the loss only when lambda > 0).
  bool discrepancy = false;
  double prob_clamp = 1e-7;
  /// Training forward: batch statistics and dropout drawn from this stream.
  Rng* dropout_rng = nullptr;
  /// Use these Grad-CAM weights instead of computing them.
  const SaliencyWeights* frozen_weights = nullptr;
};

LossTerms training_loss(const Model& model, const Tensor& x, std::span<const int> y,
                        const Tensor& x_adv, const LossOptions& options);

/// PGD against the per-example training objective at the model's
/// deterministic (inference) function. With lambda > 0 the objective adds
/// lambda times the discrepancy to the fixed benign maps.
Tensor attack_batch(const Model& model, const Tensor& x, std::span<const int> y,
                    const AttackConfig& attack, double lambda_interp, SaliencyMode mode,
                    Rng& attack_rng, double prob_clamp = 1e-7);

/// Cross-entropy of the training forward on pgd(x).
Tensor adversarial_loss(const Model& model, const Tensor& x, std::span<const int> y,
                        const AttackConfig& attack, Rng& attack_rng, Rng& dropout_rng);

/// Adversarial loss plus lambda times the discrepancy, on one shared x_adv.
Tensor adjusted_loss(const Model& model, const Tensor& x, std::span<const int> y,
                     const AttackConfig& attack, double lambda_interp, SaliencyMode mode,
                     Rng& attack_rng, Rng& dropout_rng);

/// Benign inference-mode cross-entropy plus L2 over a whole dataset.
double validation_loss(const Model& model, const Dataset& ds, int batch_size,
                       double prob_clamp = 1e-7);

class Adam {
 public:
  Adam(std::vector<Tensor> params, double learning_rate, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);
  void step(const std::vector<Tensor>& grads);
  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  std::int64_t t_ = 0;
};

struct StepRecord {
  std::int64_t step = 0;
  int epoch = 0;
  double epsilon = 0.0;
  double ce = 0.0;
  double discrepancy = 0.0;
  double adjusted = 0.0;
  double l2 = 0.0;
  double total = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  double epsilon = 0.0;
  double discrepancy = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::vector<StepRecord> steps;
  int best_epoch = -1;
  bool stopped_early = false;

  std::string epochs_csv() const;
  std::string steps_csv() const;
};

struct TrainResult {
  Model model;  // parameters of the best-validation-loss epoch
  TrainHistory history;
};

/// Trains with the configured regime. The combined regime expects the
/// caller to pass the union of WD and OOD training data. In attacking
/// regimes, early stopping, best-epoch selection and the LR plateau count
/// only epochs that end at full attack strength.
TrainResult fit(Model model, const Dataset& train, const Dataset& validation,
                const RegimeConfig& config);

}  // namespace sgat
