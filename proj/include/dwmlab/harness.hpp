#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dwmlab/agents.hpp"
#include "dwmlab/dataset.hpp"
#include "dwmlab/diffusion.hpp"
#include "dwmlab/evaluate.hpp"
#include "dwmlab/onestep.hpp"

namespace dwmlab {

// ------------------------------------------------------------ model training

/// Runs `iterations` optimizer steps on windows of length config.T.
/// `progress` is called every `log_every` steps with (iteration, mean loss since last call).
void train_dwm(DiffusionWorldModel& model, const OfflineDataset& data, std::size_t iterations, Rng& rng,
               std::size_t log_every = 0, const std::function<void(std::uint64_t, double)>& progress = {});

void train_onestep(OneStepModel& model, const OfflineDataset& data, std::size_t iterations, Rng& rng,
                   std::size_t log_every = 0, const std::function<void(std::uint64_t, double)>& progress = {});

// -------------------------------------------------------- prediction error

/// Ground-truth windows of length T. Step h = 1..T-1 pairs s_{t+h} with r_{t+h-1}.
struct TruthWindows {
  std::size_t T = 0;
  std::vector<std::size_t> traj, start;
  Matrix states, actions;              // raw s_t, a_t
  std::vector<Matrix> future_actions;  // [h - 1] holds raw a_{t+h}, h = 1..T-2
  std::vector<ImaginedSeq> truth;      // T-1 rewards r_t.., T-1 states s_{t+1}..
  std::vector<double> rtg;             // episode RTG label g_t of each window
};

TruthWindows sample_truth_windows(const OfflineDataset& data, std::size_t T, std::size_t n, Rng& rng);

/// Imagined continuations for every window, each with at least T-1 rewards and states.
using WindowPredictor = std::function<std::vector<ImaginedSeq>(const TruthWindows&, Rng&)>;

/// Squared errors in normalized units: per-dimension mean for states, scalar for rewards.
struct PredErrorReport {
  std::string model_tag;
  std::optional<double> g_eval;  // empty: each window conditioned on its own RTG label
  std::size_t T = 0;
  std::size_t windows = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> state_mse, reward_mse;                // mean over windows, index h - 1
  std::vector<double> state_mse_median, reward_mse_median;  // median over windows
  double avg_state_mse = 0.0, avg_reward_mse = 0.0;         // means of the per-step vectors
};

PredErrorReport prediction_error(const TruthWindows& windows, const WindowPredictor& predict,
                                 const Normalizer& normalizer, Rng& rng);

/// Per-step error of the diffusion model. The conditioning RTG is g_eval, or the
/// window's own label when g_eval is empty. `opt` supplies guidance, temperature
/// and the step list; its g_eval field is ignored.
PredErrorReport wm_prediction_error(const DiffusionWorldModel& model, const OfflineDataset& data,
                                    std::optional<double> g_eval, std::size_t T, std::size_t n_windows,
                                    std::uint64_t seed, const std::optional<SampleOptions>& opt = std::nullopt);

/// Recursive rollouts of the one-step model driven by the dataset actions.
PredErrorReport wm_prediction_error(const OneStepModel& model, const OfflineDataset& data, std::size_t T,
                                    std::size_t n_windows, std::uint64_t seed, double noise_scale = 1.0);

/// Averages several reports step by step (means of means and of medians).
PredErrorReport merge_reports(const std::vector<PredErrorReport>& reports);

nlohmann::json pred_error_to_json(const PredErrorReport& r);
std::string pred_error_csv(const PredErrorReport& r);

// ------------------------------------------------------------------ sweeps

struct SweepModels {
  const DiffusionWorldModel* dwm = nullptr;
  const OneStepModel* onestep = nullptr;
};

struct SweepCell {
  std::size_t H = 1;
  ModelSource source = ModelSource::dwm;
  std::vector<double> g_eval;
  std::uint64_t seed = 0;
  ReturnReport final_eval;
  double final_critic_loss = 0.0;
  std::optional<double> pred_state_mse, pred_reward_mse;
  double wall_seconds = 0.0;

  std::string name() const;
};

struct SweepOptions {
  std::filesystem::path out_dir;  // per-cell checkpoints and results; empty disables persistence
  std::size_t max_parallel = 1;
  std::function<void(const SweepCell&)> on_cell;
};

/// One agent per (H, model, seed) cell, ordered H-major then model then seed.
std::vector<SweepCell> horizon_sweep(const OfflineDataset& data, const EnvSpec& env, const AgentConfig& base,
                                     const std::vector<std::size_t>& horizons,
                                     const std::vector<ModelSource>& sources, const std::vector<std::uint64_t>& seeds,
                                     const SweepModels& models, const ReturnAnchors& anchors,
                                     const SweepOptions& opt);

/// One agent per (g_eval, seed) cell with g_eval held fixed, plus the DWM
/// prediction error at that g_eval.
std::vector<SweepCell> rtg_sweep(const OfflineDataset& data, const EnvSpec& env, const AgentConfig& base,
                                 const std::vector<double>& g_evals, const std::vector<std::uint64_t>& seeds,
                                 const SweepModels& models, const ReturnAnchors& anchors, const SweepOptions& opt,
                                 std::size_t pred_windows = 200);

/// Columns: H,source,g_eval,seed,return_mean,return_std,normalized_mean,normalized_std,
/// final_critic_loss,pred_state_mse,pred_reward_mse.
std::string sweep_csv(const std::vector<SweepCell>& cells);
std::vector<SweepCell> parse_sweep_csv(const std::string& text);

/// Deciles (0, 10, ..., 100th percentiles) of the dataset's per-step RTG labels.
std::vector<double> rtg_deciles(const OfflineDataset& data);

/// Markdown table of a sweep grouped over seeds: mean and std of the per-seed normalized returns.
std::string sweep_markdown(const std::vector<SweepCell>& cells);

}  // namespace dwmlab
