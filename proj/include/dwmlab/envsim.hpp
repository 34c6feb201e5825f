#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dwmlab/rng.hpp"

namespace dwmlab {

struct Trajectory;

enum class EnvKind { pointmass, pendulum };

/// Static description of a toy environment. Actions live in [-1, 1]^action_dim.
struct EnvSpec {
  std::string name;
  EnvKind kind = EnvKind::pointmass;
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  double dt = 0.1;
  std::size_t episode_length = 100;
  double reward_min = 0.0;  // exclusive
  double reward_max = 1.0;  // inclusive

  // point-mass
  double v_max = 2.0;
  // pendulum
  double gravity = 10.0;
  double length = 1.0;
  double mass = 1.0;
  double max_torque = 2.0;
};

EnvSpec pointmass_spec();
EnvSpec pendulum_spec();
/// Lookup by name ("pointmass", "pendulum"); throws ConfigError otherwise.
EnvSpec env_spec(const std::string& name);

struct EnvState {
  std::vector<double> x;
  std::size_t step = 0;

  bool operator==(const EnvState&) const = default;
};

struct StepResult {
  EnvState next;
  double reward = 0.0;
};

/// Pure transition function. Out-of-bound actions are clipped; non-finite
/// input raises NumericalError; stepping past the episode end raises ConfigError.
StepResult env_step(const EnvSpec& spec, const EnvState& state, std::span<const double> action);

/// Initial-state distribution: point-mass p ~ U[-1,1]^2, v = 0; pendulum
/// hanging near the bottom with a small random offset.
EnvState env_reset(const EnvSpec& spec, Rng& rng);

/// Wrap an angle into (-pi, pi].
double wrap_angle(double theta);

/// Anything that emits actions for a state.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual void act(std::span<const double> state, std::span<double> action) = 0;
  virtual std::string tag() const = 0;
};

enum class PolicyLevel { random, medium, expert };

PolicyLevel policy_level_from_string(const std::string& s);
std::string to_string(PolicyLevel level);

/// Hand-written controllers producing the dataset quality tiers.
/// Point-mass: a = clip(-kp * p - kd * v + noise). Pendulum: energy pumping
/// toward the upright position, switching to PD capture near the top.
class ScriptedPolicy final : public Policy {
 public:
  ScriptedPolicy(const EnvSpec& spec, PolicyLevel level, std::uint64_t seed);

  void act(std::span<const double> state, std::span<double> action) override;
  std::string tag() const override { return to_string(level_); }

  PolicyLevel level() const { return level_; }
  double kp() const { return kp_; }
  double kd() const { return kd_; }
  double noise() const { return noise_; }

 private:
  EnvSpec spec_;
  PolicyLevel level_;
  double kp_ = 0.0, kd_ = 0.0, noise_ = 0.0;
  Rng rng_;
};

std::unique_ptr<ScriptedPolicy> make_scripted_policy(const EnvSpec& spec, PolicyLevel level, std::uint64_t seed);

/// Run one episode of length L from env_reset(seed) (or from `start`).
Trajectory rollout(const EnvSpec& spec, Policy& policy, std::uint64_t seed, std::size_t length,
                   const std::optional<EnvState>& start = std::nullopt);

}  // namespace dwmlab
