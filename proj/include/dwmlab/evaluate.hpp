#pragma once

#include <cstdint>
#include <vector>

#include "dwmlab/envsim.hpp"

namespace dwmlab {

/// Mean undiscounted episode returns of the scripted random and expert policies.
struct ReturnAnchors {
  double random = 0.0;
  double expert = 1.0;
  std::size_t episodes = 0;
};

/// Throws NumericalError when expert <= random.
ReturnAnchors compute_anchors(const EnvSpec& spec, std::size_t episodes = 100, std::uint64_t seed = 20240);

double normalize_return(double R, const ReturnAnchors& anchors);

struct ReturnReport {
  std::vector<double> returns;
  std::vector<double> normalized;
  double mean = 0.0, std = 0.0;
  double normalized_mean = 0.0, normalized_std = 0.0;
  ReturnAnchors anchors;
};

/// Full-length episodes from env_reset(derive_seed(seed, e)), e < episodes.
ReturnReport evaluate_policy(const EnvSpec& spec, Policy& policy, std::size_t episodes, std::uint64_t seed,
                             const ReturnAnchors& anchors);

/// Population mean and standard deviation.
void mean_std(const std::vector<double>& v, double& mean, double& std);

}  // namespace dwmlab
