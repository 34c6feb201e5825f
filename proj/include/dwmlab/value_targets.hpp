#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dwmlab/imagined.hpp"

namespace dwmlab {

enum class TargetMode { diff_mve, lambda, mve, pql };

TargetMode target_mode_from_string(const std::string& s);
std::string to_string(TargetMode m);

struct TargetConfig {
  std::size_t H = 1;
  double gamma = 0.99;
  double lambda = 1.0;
  double kappa = 0.0;
  std::size_t m = 2;
  TargetMode mode = TargetMode::diff_mve;

  /// Throws ConfigError unless 1 <= H <= T - 1 and the remaining fields are in range.
  void validate(std::size_t T) const;
};

/// Bootstrap value of an imagined state.
using BootFn = std::function<double(std::span<const double> state)>;

/// sum_{h<H} gamma^h r_h + gamma^H * boot_H, where boot_H is the bootstrap at s_{t+H}.
double diff_mve_target(const ImaginedSeq& seq, std::size_t H, double gamma, double boot_H);
/// Same, evaluating boot only at s_{t+H}.
double diff_mve_target(const ImaginedSeq& seq, std::size_t H, double gamma, const BootFn& boot);

/// One-step-model expansion; the formula is shared with diff_mve_target.
double mve_target(const ImaginedSeq& seq, std::size_t H, double gamma, double boot_H);
double mve_target(const ImaginedSeq& seq, std::size_t H, double gamma, const BootFn& boot);

/// lambda-return over an imagined sequence. boot[h - 1] is the bootstrap at
/// s_{t+h} for h = 1..H:
///   G_H = boot_H,  G_h = r_h + gamma ((1 - lambda) boot_{h+1} + lambda G_{h+1}),  returns G_0.
double lambda_return_target(const ImaginedSeq& seq, std::size_t H, double gamma, double lambda,
                            std::span<const double> boot);
double lambda_return_target(const ImaginedSeq& seq, std::size_t H, double gamma, double lambda, const BootFn& boot);

/// Uncertainty-penalized rewards from m >= 2 aligned samples, for t' = t .. t + T - 2:
/// mean_i r^i - kappa * max_{i,j} (|r^i - r^j|^2 + |s^i_{t'+1} - s^j_{t'+1}|^2).
std::vector<double> pql_rewards(std::span<const ImaginedSeq> seqs, double kappa);

/// The first sample with its rewards replaced by pql_rewards.
ImaginedSeq pql_sequence(std::span<const ImaginedSeq> seqs, double kappa);

/// r_t + gamma * max(g_{t+1}, v_next).
double rtg_relabel(double g_t, double r_t, double g_next, double v_next, double gamma);

/// |tau - 1{u < 0}| u^2 and its derivative in u.
double expectile_loss(double u, double tau);
double expectile_grad(double u, double tau);

}  // namespace dwmlab
