#include "sgat/attack.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "sgat/autograd.hpp"

namespace sgat {

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
    throw ConfigError("attack epsilon must be a finite value >= 0");
  }
  if (n_iters < 1) {
    throw ConfigError("attack n_iters must be positive");
  }
  if (!std::isfinite(step_size) || step_size < 0.0) {
    throw ConfigError("attack step_size must be positive, or 0 for the default");
  }
}

double AttackConfig::resolved_step() const {
  return step_size > 0.0 ? step_size : 2.5 * epsilon / n_iters;
}

void to_json(nlohmann::json& j, const AttackConfig& c) {
  j = nlohmann::json{{"epsilon", c.epsilon},
                     {"n_iters", c.n_iters},
                     {"step_size", c.step_size},
                     {"random_start", c.random_start}};
}

void from_json(const nlohmann::json& j, AttackConfig& c) {
  AttackConfig d;
  c.epsilon = j.value("epsilon", d.epsilon);
  c.n_iters = j.value("n_iters", d.n_iters);
  c.step_size = j.value("step_size", d.step_size);
  c.random_start = j.value("random_start", d.random_start);
}

void to_json(nlohmann::json& j, const EpsilonSchedule& s) {
  j = nlohmann::json{{"warmup_steps", s.warmup_steps},
                     {"ramp_steps", s.ramp_steps},
                     {"epsilon_max", s.epsilon_max}};
}

void from_json(const nlohmann::json& j, EpsilonSchedule& s) {
  EpsilonSchedule d;
  s.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  s.ramp_steps = j.value("ramp_steps", d.ramp_steps);
  s.epsilon_max = j.value("epsilon_max", d.epsilon_max);
}

double epsilon_at(std::int64_t step, const EpsilonSchedule& s) {
  if (step < s.warmup_steps) {
    return 0.0;
  }
  const std::int64_t into = step - s.warmup_steps;
  if (s.ramp_steps <= 0 || into >= s.ramp_steps) {
    return s.epsilon_max;
  }
  return s.epsilon_max * static_cast<double>(into) / static_cast<double>(s.ramp_steps);
}

template <class T>
void ball_bounds(T x, double epsilon, T& lo, T& hi) {
  const double xd = static_cast<double>(x);
  hi = static_cast<T>(xd + epsilon);
  while (static_cast<double>(hi) - xd > epsilon) {
    hi = std::nextafter(hi, -std::numeric_limits<T>::infinity());
  }
  lo = static_cast<T>(xd - epsilon);
  while (xd - static_cast<double>(lo) > epsilon) {
    lo = std::nextafter(lo, std::numeric_limits<T>::infinity());
  }
}

template void ball_bounds<float>(float, double, float&, float&);
template void ball_bounds<double>(double, double, double&, double&);

Tensor pgd(const Tensor& x, const AttackConfig& config, const AttackObjective& objective,
           Rng& rng) {
  config.validate();
  if (config.epsilon == 0.0) {
    return x.detach().clone();
  }
  const double step = config.resolved_step();
  return visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto xs = x.data<T>();
    const std::size_t n = xs.size();
    std::vector<T> lo(n);
    std::vector<T> hi(n);
    for (std::size_t i = 0; i < n; ++i) {
      ball_bounds(xs[i], config.epsilon, lo[i], hi[i]);
    }
    std::vector<T> adv(xs.begin(), xs.end());
    if (config.random_start) {
      for (std::size_t i = 0; i < n; ++i) {
        adv[i] = std::clamp(static_cast<T>(static_cast<double>(xs[i]) +
                                           rng.uniform(-config.epsilon, config.epsilon)),
                            lo[i], hi[i]);
      }
    }
    for (int it = 0; it < config.n_iters; ++it) {
      Tensor candidate = Tensor::adopt<T>(x.shape(), adv).set_requires_grad(true);
      Tensor g;
      {
        GradModeGuard recording(true);
        Tensor loss = objective(candidate);
        g = grad(loss, std::span<const Tensor>(&candidate, 1))[0];
      }
      const auto gs = g.data<T>();
      for (std::size_t i = 0; i < n; ++i) {
        const T dir = gs[i] > T(0) ? T(1) : (gs[i] < T(0) ? T(-1) : T(0));
        adv[i] = std::clamp(static_cast<T>(adv[i] + static_cast<T>(step) * dir), lo[i], hi[i]);
      }
    }
    return Tensor::adopt<T>(x.shape(), std::move(adv));
  });
}

}  // namespace sgat
