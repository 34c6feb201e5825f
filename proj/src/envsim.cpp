#include "dwmlab/envsim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dwmlab/errors.hpp"
#include "dwmlab/trajectory.hpp"

namespace dwmlab {

EnvSpec pointmass_spec() {
  EnvSpec s;
  s.name = "pointmass";
  s.kind = EnvKind::pointmass;
  s.state_dim = 4;
  s.action_dim = 2;
  s.dt = 0.1;
  s.episode_length = 100;
  s.v_max = 2.0;
  return s;
}

EnvSpec pendulum_spec() {
  EnvSpec s;
  s.name = "pendulum";
  s.kind = EnvKind::pendulum;
  s.state_dim = 2;
  s.action_dim = 1;
  s.dt = 0.05;
  s.episode_length = 200;
  return s;
}

EnvSpec env_spec(const std::string& name) {
  if (name == "pointmass") return pointmass_spec();
  if (name == "pendulum") return pendulum_spec();
  throw ConfigError("unknown environment '" + name + "'");
}

double wrap_angle(double theta) {
  constexpr double pi = std::numbers::pi;
  double w = std::fmod(theta + pi, 2.0 * pi);
  if (w <= 0.0) w += 2.0 * pi;
  return w - pi;
}

StepResult env_step(const EnvSpec& spec, const EnvState& state, std::span<const double> action) {
  if (state.x.size() != spec.state_dim) throw std::invalid_argument("env_step: state dimension mismatch");
  if (action.size() != spec.action_dim) throw std::invalid_argument("env_step: action dimension mismatch");
  if (state.step >= spec.episode_length) throw ConfigError("env_step: episode already finished");
  for (double v : state.x)
    if (!std::isfinite(v)) throw NumericalError("env_step: non-finite state");
  for (double v : action)
    if (!std::isfinite(v)) throw NumericalError("env_step: non-finite action");

  StepResult r;
  r.next.step = state.step + 1;
  r.next.x.resize(spec.state_dim);
  const double dt = spec.dt;

  if (spec.kind == EnvKind::pointmass) {
    const double px = state.x[0], py = state.x[1], vx = state.x[2], vy = state.x[3];
    const double ax = std::clamp(action[0], -1.0, 1.0), ay = std::clamp(action[1], -1.0, 1.0);
    const double npx = px + vx * dt, npy = py + vy * dt;
    double nvx = vx + ax * dt, nvy = vy + ay * dt;
    const double speed = std::hypot(nvx, nvy);
    if (speed > spec.v_max) {
      nvx *= spec.v_max / speed;
      nvy *= spec.v_max / speed;
    }
    r.next.x = {npx, npy, nvx, nvy};
    r.reward = std::exp(-(npx * npx + npy * npy));
  } else {
    const double theta = state.x[0], omega = state.x[1];
    const double u = spec.max_torque * std::clamp(action[0], -1.0, 1.0);
    const double acc = (spec.gravity / spec.length) * std::sin(theta) + u / (spec.mass * spec.length * spec.length);
    const double nomega = omega + acc * dt;
    const double ntheta = wrap_angle(theta + nomega * dt);
    r.next.x = {ntheta, nomega};
    r.reward = std::exp(-(ntheta * ntheta + 0.1 * nomega * nomega));
  }
  return r;
}

EnvState env_reset(const EnvSpec& spec, Rng& rng) {
  EnvState s;
  if (spec.kind == EnvKind::pointmass) {
    const double px = rng.uniform(-1.0, 1.0);
    const double py = rng.uniform(-1.0, 1.0);
    s.x = {px, py, 0.0, 0.0};
  } else {
    s.x = {wrap_angle(std::numbers::pi + rng.uniform(-0.5, 0.5)), 0.0};
  }
  return s;
}

PolicyLevel policy_level_from_string(const std::string& s) {
  if (s == "random") return PolicyLevel::random;
  if (s == "medium") return PolicyLevel::medium;
  if (s == "expert") return PolicyLevel::expert;
  throw ConfigError("unknown policy level '" + s + "'");
}

std::string to_string(PolicyLevel level) {
  switch (level) {
    case PolicyLevel::random: return "random";
    case PolicyLevel::medium: return "medium";
    case PolicyLevel::expert: return "expert";
  }
  return "random";
}

ScriptedPolicy::ScriptedPolicy(const EnvSpec& spec, PolicyLevel level, std::uint64_t seed)
    : spec_(spec), level_(level), rng_(seed) {
  switch (level) {
    case PolicyLevel::expert:
      kp_ = 4.0, kd_ = 3.0, noise_ = 0.0;
      break;
    case PolicyLevel::medium:
      kp_ = 1.5, kd_ = 1.0, noise_ = 0.3;
      break;
    case PolicyLevel::random:
      break;
  }
}

void ScriptedPolicy::act(std::span<const double> state, std::span<double> action) {
  if (level_ == PolicyLevel::random) {
    for (double& a : action) a = rng_.uniform(-1.0, 1.0);
    return;
  }
  if (spec_.kind == EnvKind::pointmass) {
    for (std::size_t d = 0; d < 2; ++d) {
      double a = -kp_ * state[d] - kd_ * state[2 + d];
      if (noise_ > 0.0) a += noise_ * rng_.normal();
      action[d] = std::clamp(a, -1.0, 1.0);
    }
    return;
  }
  // Pendulum: pump energy toward the upright level, then capture with PD.
  const double theta = state[0], omega = state[1];
  double u;
  if (std::abs(theta) < 0.6) {
    u = -(kp_ * 2.5) * theta - (kd_ * 0.6) * omega;
  } else {
    const double energy = 0.5 * spec_.mass * spec_.length * spec_.length * omega * omega +
                          spec_.mass * spec_.gravity * spec_.length * (std::cos(theta) - 1.0);
    const double dir = omega >= 0.0 ? 1.0 : -1.0;
    u = -kd_ * energy * dir;
  }
  if (noise_ > 0.0) u += noise_ * rng_.normal();
  action[0] = std::clamp(u, -1.0, 1.0);
}

std::unique_ptr<ScriptedPolicy> make_scripted_policy(const EnvSpec& spec, PolicyLevel level, std::uint64_t seed) {
  return std::make_unique<ScriptedPolicy>(spec, level, seed);
}

Trajectory rollout(const EnvSpec& spec, Policy& policy, std::uint64_t seed, std::size_t length,
                   const std::optional<EnvState>& start) {
  if (length == 0 || length > spec.episode_length) throw ConfigError("rollout: length must be in [1, episode_length]");
  Rng rng(seed);
  EnvState s = start ? *start : env_reset(spec, rng);
  Trajectory traj;
  traj.state_dim = spec.state_dim;
  traj.action_dim = spec.action_dim;
  traj.seed = seed;
  traj.policy_tag = policy.tag();
  traj.states.reserve(length * spec.state_dim);
  traj.actions.reserve(length * spec.action_dim);
  traj.rewards.reserve(length);
  std::vector<double> a(spec.action_dim);
  for (std::size_t t = 0; t < length; ++t) {
    policy.act(s.x, a);
    for (double& v : a) v = std::clamp(v, -1.0, 1.0);
    StepResult r = env_step(spec, s, a);
    traj.states.insert(traj.states.end(), s.x.begin(), s.x.end());
    traj.actions.insert(traj.actions.end(), a.begin(), a.end());
    traj.rewards.push_back(r.reward);
    s = std::move(r.next);
  }
  return traj;
}

}  // namespace dwmlab
