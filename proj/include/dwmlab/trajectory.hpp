#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dwmlab {

/// One episode: states[t], actions[t], rewards[t] for t in [0, length).
/// rewards[t] is the reward for taking actions[t] in states[t].
struct Trajectory {
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  std::vector<double> states;   // length x state_dim
  std::vector<double> actions;  // length x action_dim
  std::vector<double> rewards;  // length
  std::uint64_t seed = 0;
  std::string policy_tag;

  std::size_t length() const { return rewards.size(); }
  std::span<const double> state(std::size_t t) const { return {states.data() + t * state_dim, state_dim}; }
  std::span<const double> action(std::size_t t) const { return {actions.data() + t * action_dim, action_dim}; }

  bool operator==(const Trajectory&) const = default;
};

}  // namespace dwmlab
