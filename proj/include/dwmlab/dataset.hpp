#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dwmlab/envsim.hpp"
#include "dwmlab/matrix.hpp"
#include "dwmlab/rng.hpp"
#include "dwmlab/trajectory.hpp"

namespace dwmlab {

/// Discounted return-to-go from step t to the end of the reward sequence,
/// divided by reward_scale.
double compute_rtg(std::span<const double> rewards, std::size_t t, double gamma, double reward_scale);

/// How the conditioning RTG of a training window is computed.
enum class RtgMode {
  episode,  // discounted to the end of the episode (default)
  window,   // discounted over the T-step window only
};

RtgMode rtg_mode_from_string(const std::string& s);
std::string to_string(RtgMode m);

/// Per-dimension z-scoring of observations, plus optional reward z-scoring.
struct Normalizer {
  static constexpr double kStdFloor = 1e-6;

  std::vector<double> obs_mean, obs_std;
  double reward_mean = 0.0;
  double reward_std = 1.0;
  bool obs_active = true;
  bool reward_active = true;
  /// Dimensions whose std was floored during fitting (constant features).
  std::vector<std::size_t> floored_dims;

  void apply_obs(std::span<const double> in, std::span<double> out) const;
  void invert_obs(std::span<const double> in, std::span<double> out) const;
  std::vector<double> apply_obs(std::span<const double> in) const;
  std::vector<double> invert_obs(std::span<const double> in) const;
  double apply_reward(double r) const { return reward_active ? (r - reward_mean) / reward_std : r; }
  double invert_reward(double z) const { return reward_active ? z * reward_std + reward_mean : z; }

  bool operator==(const Normalizer&) const = default;
};

/// Fit from the pooled states and rewards of all trajectories. Floors
/// zero-variance dimensions at kStdFloor and logs a warning for each.
Normalizer fit_normalizer(std::span<const Trajectory> trajectories, std::size_t state_dim);

/// Immutable offline dataset. Stored values are exactly representable as f32
/// so the on-disk format round-trips bit-exactly.
struct OfflineDataset {
  std::string env;
  std::string tier;
  double gamma = 0.99;
  double reward_scale = 1.0;
  Normalizer normalizer;
  std::uint64_t seed = 0;
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  std::vector<Trajectory> trajectories;

  std::size_t transition_count() const;
  std::size_t episode_length() const { return trajectories.empty() ? 0 : trajectories.front().length(); }

  bool operator==(const OfflineDataset&) const = default;
};

/// Quantize values to f32, fit the normalizer and set reward_scale to the
/// 95th percentile of discounted episode returns.
OfflineDataset make_dataset(std::string env, std::string tier, double gamma, std::uint64_t seed,
                            std::vector<Trajectory> trajectories);

/// Roll out the scripted policies for a tier: "random", "medium", "expert",
/// "medium-replay" (alternating random/medium) or "medium-expert"
/// (alternating medium/expert).
OfflineDataset generate_dataset(const EnvSpec& spec, const std::string& tier, std::size_t episodes,
                                double gamma, std::uint64_t seed);

/// Linear-interpolated percentile (q in [0, 100]) of a copy of `values`.
double percentile(std::vector<double> values, double q);

/// Discounted RTG labels g_t for every step of one trajectory (scaled).
std::vector<double> rtg_labels(const Trajectory& traj, double gamma, double reward_scale);

nlohmann::json normalizer_to_json(const Normalizer& n);
Normalizer normalizer_from_json(const nlohmann::json& j);

/// Flattened window layout [s_t | a_t | r_t | s_{t+1} | r_{t+1} | ... | s_{t+T-1} | r_{t+T-1}].
struct WindowLayout {
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  std::size_t horizon = 0;  // T

  std::size_t dim() const { return horizon * state_dim + action_dim + horizon; }
  /// Length of the conditioned prefix (s_t, a_t).
  std::size_t prefix_dim() const { return state_dim + action_dim; }
  /// Offset of r_{t+h}, h in [0, T).
  std::size_t reward_offset(std::size_t h) const { return state_dim + action_dim + h * (state_dim + 1); }
  /// Offset of s_{t+h}, h in [1, T).
  std::size_t state_offset(std::size_t h) const { return reward_offset(h - 1) + 1; }
};

struct WindowBatch {
  WindowLayout layout;
  Matrix x0;                      // batch x layout.dim(), normalized
  std::vector<double> rtg;        // conditioning g_t
  std::vector<std::size_t> traj;  // source trajectory index
  std::vector<std::size_t> start; // start step t
};

/// Normalized flat window starting at step t of trajectory `traj_index`.
std::vector<double> make_window(const OfflineDataset& data, std::size_t traj_index, std::size_t t,
                                std::size_t horizon);

double window_rtg(const OfflineDataset& data, std::size_t traj_index, std::size_t t, std::size_t horizon,
                  RtgMode mode);

/// Uniform over (trajectory, start) pairs with start <= L - T.
WindowBatch sample_windows(const OfflineDataset& data, std::size_t horizon, std::size_t batch, Rng& rng,
                           RtgMode mode = RtgMode::episode);

/// Dataset file "DWMT1".
///
/// Layout: 6-byte magic "DWMT1\n", u32 LE header length, JSON header, u32 LE
/// CRC-32 of the payload, payload. The payload is little-endian f32, per
/// trajectory: states, actions, rewards.
inline constexpr int kDatasetVersion = 1;
void save_dataset(const std::filesystem::path& path, const OfflineDataset& data);
OfflineDataset load_dataset(const std::filesystem::path& path);

}  // namespace dwmlab
