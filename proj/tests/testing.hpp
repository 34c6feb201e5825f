#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dwmlab/rng.hpp"

namespace dwmlab::testing {

inline double rel_err(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-6});
  return std::abs(a - b) / scale;
}

/// Largest relative error between the analytic gradient and a
/// Richardson-extrapolated central difference of f over `coords` randomly
/// chosen coordinates. Piecewise-linear networks need a small h so that no
/// step crosses a kink.
inline double grad_check(const std::function<double(std::span<const double>)>& f, std::vector<double> params,
                         std::span<const double> analytic, std::size_t coords, Rng& rng, double h = 1e-3) {
  double worst = 0.0;
  const std::size_t n = params.size();
  for (std::size_t c = 0; c < std::min(coords, n); ++c) {
    const std::size_t i = coords >= n ? c : rng.index(n);
    const double keep = params[i];
    auto central = [&](double step) {
      params[i] = keep + step;
      const double fp = f(params);
      params[i] = keep - step;
      const double fm = f(params);
      params[i] = keep;
      return (fp - fm) / (2 * step);
    };
    const double fd = (4 * central(h / 2) - central(h)) / 3;
    worst = std::max(worst, rel_err(analytic[i], fd));
  }
  return worst;
}

inline std::vector<double> random_vector(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dwmlab_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace dwmlab::testing
