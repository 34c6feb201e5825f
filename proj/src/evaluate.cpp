#include "dwmlab/evaluate.hpp"

#include <cmath>
#include <numeric>

#include "dwmlab/errors.hpp"
#include "dwmlab/trajectory.hpp"

namespace dwmlab {
namespace {

double episode_return(const Trajectory& tr) { return std::accumulate(tr.rewards.begin(), tr.rewards.end(), 0.0); }

double mean_return(const EnvSpec& spec, PolicyLevel level, std::size_t episodes, std::uint64_t seed) {
  auto policy = make_scripted_policy(spec, level, derive_seed(seed, 1));
  double total = 0.0;
  for (std::size_t e = 0; e < episodes; ++e)
    total += episode_return(rollout(spec, *policy, derive_seed(seed, 100 + e), spec.episode_length));
  return total / static_cast<double>(episodes);
}

}  // namespace

void mean_std(const std::vector<double>& v, double& mean, double& std) {
  mean = std = 0.0;
  if (v.empty()) return;
  mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  std = std::sqrt(ss / static_cast<double>(v.size()));
}

ReturnAnchors compute_anchors(const EnvSpec& spec, std::size_t episodes, std::uint64_t seed) {
  if (episodes == 0) throw ConfigError("compute_anchors: episodes must be positive");
  ReturnAnchors a;
  a.random = mean_return(spec, PolicyLevel::random, episodes, derive_seed(seed, 0));
  a.expert = mean_return(spec, PolicyLevel::expert, episodes, derive_seed(seed, 1));
  a.episodes = episodes;
  if (!(a.expert > a.random))
    throw NumericalError("degenerate return anchors for " + spec.name + ": expert " + std::to_string(a.expert) +
                         " <= random " + std::to_string(a.random));
  return a;
}

double normalize_return(double R, const ReturnAnchors& a) { return (R - a.random) / (a.expert - a.random); }

ReturnReport evaluate_policy(const EnvSpec& spec, Policy& policy, std::size_t episodes, std::uint64_t seed,
                             const ReturnAnchors& anchors) {
  if (!(anchors.expert > anchors.random)) throw NumericalError("evaluate_policy: degenerate anchors");
  ReturnReport rep;
  rep.anchors = anchors;
  for (std::size_t e = 0; e < episodes; ++e) {
    const double R = episode_return(rollout(spec, policy, derive_seed(seed, e), spec.episode_length));
    rep.returns.push_back(R);
    rep.normalized.push_back(normalize_return(R, anchors));
  }
  mean_std(rep.returns, rep.mean, rep.std);
  mean_std(rep.normalized, rep.normalized_mean, rep.normalized_std);
  return rep;
}

}  // namespace dwmlab
