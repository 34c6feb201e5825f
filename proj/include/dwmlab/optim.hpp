#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace dwmlab {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments are sized on construction.
class AdamState {
 public:
  AdamState() = default;
  AdamState(std::size_t n, AdamConfig cfg);

  /// params -= lr * mhat / (sqrt(vhat) + eps). Throws std::invalid_argument on length mismatch.
  void step(std::span<double> params, std::span<const double> grad);

  std::uint64_t steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  const std::vector<double>& first_moment() const { return m_; }
  const std::vector<double>& second_moment() const { return v_; }

 private:
  AdamConfig cfg_;
  std::uint64_t step_ = 0;
  std::vector<double> m_, v_;
};

/// Exponential moving average with mixing rate w: shadow += w * (live - shadow).
/// A decay beta corresponds to w = 1 - beta.
class EmaTracker {
 public:
  EmaTracker() = default;
  EmaTracker(std::span<const double> initial, double rate);

  void update(std::span<const double> live);

  const std::vector<double>& shadow() const { return shadow_; }
  std::vector<double>& shadow() { return shadow_; }
  double rate() const { return rate_; }

 private:
  std::vector<double> shadow_;
  double rate_ = 0.0;
};

/// In-place form used for target networks: target += w * (live - target).
void ema_mix(std::span<double> target, std::span<const double> live, double rate);

}  // namespace dwmlab
