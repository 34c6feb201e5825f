#include "dwmlab/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dwmlab {

AdamState::AdamState(std::size_t n, AdamConfig cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("Adam learning rate must be positive");
}

void AdamState::step(std::span<double> params, std::span<const double> grad) {
  if (params.size() != m_.size() || grad.size() != m_.size())
    throw std::invalid_argument("AdamState::step: length mismatch");
  ++step_;
  const double t = static_cast<double>(step_);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  for (std::size_t j = 0; j < params.size(); ++j) {
    m_[j] = cfg_.beta1 * m_[j] + (1.0 - cfg_.beta1) * grad[j];
    v_[j] = cfg_.beta2 * v_[j] + (1.0 - cfg_.beta2) * grad[j] * grad[j];
    const double mhat = m_[j] / bc1;
    const double vhat = v_[j] / bc2;
    params[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
  }
}

void ema_mix(std::span<double> target, std::span<const double> live, double rate) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("EMA rate must lie in [0, 1]");
  if (target.size() != live.size()) throw std::invalid_argument("ema_mix: length mismatch");
  if (rate == 1.0) {
    std::copy(live.begin(), live.end(), target.begin());
    return;
  }
  for (std::size_t j = 0; j < target.size(); ++j) target[j] += rate * (live[j] - target[j]);
}

EmaTracker::EmaTracker(std::span<const double> initial, double rate)
    : shadow_(initial.begin(), initial.end()), rate_(rate) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("EMA rate must lie in [0, 1]");
}

void EmaTracker::update(std::span<const double> live) { ema_mix(shadow_, live, rate_); }

}  // namespace dwmlab
