#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "dwmlab/dataset.hpp"
#include "dwmlab/imagined.hpp"
#include "dwmlab/matrix.hpp"
#include "dwmlab/mlp.hpp"
#include "dwmlab/optim.hpp"
#include "dwmlab/rng.hpp"

namespace dwmlab {

struct OneStepConfig {
  std::vector<std::size_t> hidden = {128, 128};
  Activation activation = Activation::mish;
  AdamConfig adam{1e-3, 0.9, 0.999, 1e-8};
  std::size_t batch = 256;

  void validate() const;
};

/// Gaussian dynamics f(s', r | s, a) = N(mu(s, a), diag var(s, a)) over
/// normalized state and reward. The state part of the mean is predicted as a
/// residual on the normalized input state. Variances are softplus outputs
/// plus kVarFloor.
struct OneStepModel {
  static constexpr double kVarFloor = 1e-6;

  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  OneStepConfig config;
  Mlp mean_net, var_net;
  std::vector<double> params;  // [mean | var]
  AdamState adam;
  Normalizer normalizer;
  /// Largest state norm in the training data; rollouts abort beyond 1e3 times this.
  double max_state_norm = 1.0;
  std::uint64_t iteration = 0;
  std::uint64_t seed = 0;

  static OneStepModel create(const OfflineDataset& data, const OneStepConfig& cfg, std::uint64_t seed);

  std::size_t input_dim() const { return state_dim + action_dim; }
  std::size_t output_dim() const { return state_dim + 1; }
  std::span<const double> mean_params(std::span<const double> p) const { return p.subspan(0, mean_net.param_count()); }
  std::span<const double> var_params(std::span<const double> p) const {
    return p.subspan(mean_net.param_count(), var_net.param_count());
  }
  void set_exec(kernels::Exec e) {
    mean_net.set_exec(e);
    var_net.set_exec(e);
  }
};

void save_onestep(const std::filesystem::path& path, const OneStepModel& model);
OneStepModel load_onestep(const std::filesystem::path& path);

/// Normalized transitions: input = [s | a], target = [s' | r].
struct TransitionBatch {
  Matrix input;
  Matrix target;
};

TransitionBatch sample_transitions(const OfflineDataset& data, std::size_t batch, Rng& rng);

struct GaussianPrediction {
  Matrix mean;
  Matrix var;
};

GaussianPrediction onestep_predict(const OneStepModel& model, std::span<const double> params, const Matrix& input);

/// Mean over rows of the negative log-density of target under N(mean, diag var).
double gaussian_nll(const Matrix& mean, const Matrix& var, const Matrix& target);

/// gaussian_nll of the model on a batch; accumulates the parameter gradient
/// into grad when it is non-empty.
double onestep_nll_loss(const OneStepModel& model, std::span<const double> params, const TransitionBatch& batch,
                        std::span<double> grad);

/// One Adam step. Raises NumericalError on a non-finite loss.
double onestep_training_step(OneStepModel& model, const TransitionBatch& batch);

/// Raw-unit draw (s', r) for raw state s and action a. noise_scale multiplies
/// the standard deviation; 0 returns the mean.
void onestep_sample(const OneStepModel& model, std::span<const double> s, std::span<const double> a, Rng& rng,
                    std::span<double> next_state, double& reward, double noise_scale = 1.0);

/// Actions for a batch of raw imagined states at rollout step h >= 1.
using BatchPolicy = std::function<Matrix(std::size_t h, const Matrix& states)>;

/// H-step recursive rollout from raw (s_t, a_t) rows: a_0 = a_t, a_h = policy(h, s_h)
/// for h >= 1. Each sequence holds H rewards and states s_{t+1..t+H}.
/// Raises NumericalError when a state norm exceeds 1e3 * max_state_norm.
std::vector<ImaginedSeq> recursive_rollout(const OneStepModel& model, const Matrix& states, const Matrix& actions,
                                           std::size_t H, const BatchPolicy& policy, Rng& rng,
                                           double noise_scale = 1.0);

}  // namespace dwmlab
