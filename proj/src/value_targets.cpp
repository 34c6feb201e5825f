#include "dwmlab/value_targets.hpp"

#include <algorithm>
#include <cmath>

#include "dwmlab/errors.hpp"

namespace dwmlab {

TargetMode target_mode_from_string(const std::string& s) {
  if (s == "diff_mve") return TargetMode::diff_mve;
  if (s == "lambda") return TargetMode::lambda;
  if (s == "mve") return TargetMode::mve;
  if (s == "pql") return TargetMode::pql;
  throw ConfigError("unknown target mode: " + s);
}

std::string to_string(TargetMode m) {
  switch (m) {
    case TargetMode::diff_mve: return "diff_mve";
    case TargetMode::lambda: return "lambda";
    case TargetMode::mve: return "mve";
    case TargetMode::pql: return "pql";
  }
  return "diff_mve";
}

void TargetConfig::validate(std::size_t T) const {
  if (H < 1 || H + 1 > T) throw ConfigError("target: H must lie in [1, T-1]");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("target: gamma must lie in [0, 1]");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("target: lambda must lie in [0, 1]");
  if (!(kappa >= 0.0)) throw ConfigError("target: kappa must be non-negative");
  if (mode == TargetMode::pql && m < 2) throw ConfigError("target: pql needs m >= 2 samples");
}

namespace {

void check_horizon(const ImaginedSeq& seq, std::size_t H) {
  if (H < 1 || H > seq.max_horizon())
    throw ConfigError("value target: H=" + std::to_string(H) + " outside [1, " + std::to_string(seq.max_horizon()) +
                      "]");
}

}  // namespace

double diff_mve_target(const ImaginedSeq& seq, std::size_t H, double gamma, double boot_H) {
  check_horizon(seq, H);
  double y = 0.0, disc = 1.0;
  for (std::size_t h = 0; h < H; ++h) {
    y += disc * seq.rewards[h];
    disc *= gamma;
  }
  return y + disc * boot_H;
}

double diff_mve_target(const ImaginedSeq& seq, std::size_t H, double gamma, const BootFn& boot) {
  check_horizon(seq, H);
  return diff_mve_target(seq, H, gamma, boot(seq.state(H)));
}

double mve_target(const ImaginedSeq& seq, std::size_t H, double gamma, double boot_H) {
  return diff_mve_target(seq, H, gamma, boot_H);
}

double mve_target(const ImaginedSeq& seq, std::size_t H, double gamma, const BootFn& boot) {
  return diff_mve_target(seq, H, gamma, boot);
}

double lambda_return_target(const ImaginedSeq& seq, std::size_t H, double gamma, double lambda,
                            std::span<const double> boot) {
  check_horizon(seq, H);
  if (boot.size() < H) throw std::invalid_argument("lambda_return_target: need H bootstrap values");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda_return_target: lambda must lie in [0, 1]");
  double g = boot[H - 1];
  for (std::size_t h = H; h-- > 0;) g = seq.rewards[h] + gamma * ((1.0 - lambda) * boot[h] + lambda * g);
  return g;
}

double lambda_return_target(const ImaginedSeq& seq, std::size_t H, double gamma, double lambda, const BootFn& boot) {
  check_horizon(seq, H);
  std::vector<double> b(H);
  for (std::size_t h = 1; h <= H; ++h) b[h - 1] = boot(seq.state(h));
  return lambda_return_target(seq, H, gamma, lambda, b);
}

std::vector<double> pql_rewards(std::span<const ImaginedSeq> seqs, double kappa) {
  const std::size_t m = seqs.size();
  if (m < 2) throw ConfigError("pql_rewards: need at least two samples");
  std::size_t len = seqs[0].max_horizon();
  for (const auto& s : seqs) {
    len = std::min(len, s.max_horizon());
    if (s.state_dim != seqs[0].state_dim) throw std::invalid_argument("pql_rewards: state dims differ");
  }
  std::vector<double> out(len);
  for (std::size_t t = 0; t < len; ++t) {
    double mean = 0.0;
    for (const auto& s : seqs) mean += s.rewards[t];
    mean /= static_cast<double>(m);
    double worst = 0.0;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = i + 1; j < m; ++j) {
        const double dr = seqs[i].rewards[t] - seqs[j].rewards[t];
        double d = dr * dr;
        const auto si = seqs[i].state(t + 1), sj = seqs[j].state(t + 1);
        for (std::size_t k = 0; k < si.size(); ++k) d += (si[k] - sj[k]) * (si[k] - sj[k]);
        worst = std::max(worst, d);
      }
    out[t] = mean - kappa * worst;
  }
  return out;
}

ImaginedSeq pql_sequence(std::span<const ImaginedSeq> seqs, double kappa) {
  const auto r = pql_rewards(seqs, kappa);
  ImaginedSeq out = seqs[0];
  std::copy(r.begin(), r.end(), out.rewards.begin());
  out.rewards.resize(r.size());
  out.states.resize(r.size() * out.state_dim);
  return out;
}

double rtg_relabel(double /*g_t*/, double r_t, double g_next, double v_next, double gamma) {
  return r_t + gamma * std::max(g_next, v_next);
}

double expectile_loss(double u, double tau) {
  const double w = u < 0.0 ? 1.0 - tau : tau;
  return w * u * u;
}

double expectile_grad(double u, double tau) {
  const double w = u < 0.0 ? 1.0 - tau : tau;
  return 2.0 * w * u;
}

}  // namespace dwmlab
