#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <vector>

namespace dwmlab {

enum class ImaginationSource { dwm, onestep };

inline std::string to_string(ImaginationSource s) { return s == ImaginationSource::dwm ? "dwm" : "onestep"; }

/// Imagined continuation of a real (s_t, a_t) pair, in raw (denormalized) units.
///
/// rewards[h] is r_{t+h}; state(h) is s_{t+h} for h >= 1. A diffusion sample
/// of window length T carries T rewards and T-1 states; an H-step recursive
/// rollout carries H of each.
struct ImaginedSeq {
  std::size_t state_dim = 0;
  std::vector<double> rewards;
  std::vector<double> states;
  ImaginationSource source = ImaginationSource::dwm;
  double g_eval = 0.0;

  std::size_t state_count() const { return state_dim == 0 ? 0 : states.size() / state_dim; }
  std::span<const double> state(std::size_t h) const { return {states.data() + (h - 1) * state_dim, state_dim}; }
  std::span<double> state(std::size_t h) { return {states.data() + (h - 1) * state_dim, state_dim}; }
  /// Largest H a value expansion may use: needs r_{t..t+H-1} and s_{t+H}.
  std::size_t max_horizon() const { return std::min(rewards.size(), state_count()); }
};

}  // namespace dwmlab
