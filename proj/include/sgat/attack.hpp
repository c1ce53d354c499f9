#pragma once

#include <cstdint>
#include <functional>

#include "json.hpp"
#include "sgat/rng.hpp"
#include "sgat/tensor.hpp"

namespace sgat {

struct AttackConfig {
  double epsilon = 0.001;  // L-infinity radius, normalized intensity units
  int n_iters = 10;
  /// Per-iteration step; 0 means 2.5 * epsilon / n_iters.
  double step_size = 0.0;
  bool random_start = true;

  void validate() const;
  double resolved_step() const;
};

void to_json(nlohmann::json& j, const AttackConfig& c);
void from_json(const nlohmann::json& j, AttackConfig& c);

struct EpsilonSchedule {
  std::int64_t warmup_steps = 400;
  std::int64_t ramp_steps = 2000;
  double epsilon_max = 0.001;
};

void to_json(nlohmann::json& j, const EpsilonSchedule& s);
void from_json(const nlohmann::json& j, EpsilonSchedule& s);

/// 0 during warmup, then a linear ramp to epsilon_max, then constant.
double epsilon_at(std::int64_t step, const EpsilonSchedule& schedule);

/// Scalar objective the attack ascends, evaluated at a candidate input.
/// Per-example losses should be summed, so each example's sign pattern is
/// independent of the others.
using AttackObjective = std::function<Tensor(const Tensor& candidate)>;

/// Projected gradient ascent in the L-infinity ball around x. After every
/// iteration each element is clamped to [lo, hi], the widest representable
/// interval with |bound - x| <= epsilon exactly. No data-range clamp.
Tensor pgd(const Tensor& x, const AttackConfig& config, const AttackObjective& objective,
           Rng& rng);

/// Elementwise bounds of the projection for one value.
template <class T>
void ball_bounds(T x, double epsilon, T& lo, T& hi);

}  // namespace sgat
