#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dwmlab/dataset.hpp"
#include "dwmlab/diffusion.hpp"
#include "dwmlab/envsim.hpp"
#include "dwmlab/evaluate.hpp"
#include "dwmlab/matrix.hpp"
#include "dwmlab/mlp.hpp"
#include "dwmlab/onestep.hpp"
#include "dwmlab/optim.hpp"
#include "dwmlab/rng.hpp"
#include "dwmlab/value_targets.hpp"

namespace dwmlab {

enum class Algorithm { td3bc, iql, pql };
/// Where imagined continuations come from. `none` trains on the real (r, s') of each transition (H = 1).
enum class ModelSource { dwm, onestep, none };
enum class ImaginationMode { cached, fresh };
enum class LambdaMode { automatic, on, off };

Algorithm algorithm_from_string(const std::string& s);
std::string to_string(Algorithm a);
ModelSource model_source_from_string(const std::string& s);
std::string to_string(ModelSource s);
ImaginationMode imagination_mode_from_string(const std::string& s);
std::string to_string(ImaginationMode m);
LambdaMode lambda_mode_from_string(const std::string& s);
std::string to_string(LambdaMode m);

struct Td3Config {
  double policy_noise = 0.2;
  double noise_clip = 0.5;
  double alpha = 2.5;
  std::size_t policy_delay = 2;
  std::size_t target_every = 2;
};

struct IqlConfig {
  double expectile = 0.7;
  double beta = 3.0;
  double max_weight = 100.0;
  std::size_t target_every = 1;
  double log_std_min = -5.0;
  double log_std_max = 2.0;
};

struct PqlConfig {
  double kappa = 0.1;
  std::size_t m = 3;
};

struct AgentConfig {
  Algorithm algorithm = Algorithm::td3bc;
  ModelSource source = ModelSource::dwm;
  std::size_t H = 1;
  std::vector<double> g_eval = {0.8};
  double gamma = 0.99;
  LambdaMode lambda_return = LambdaMode::automatic;  // on for IQL/PQL, off for TD3+BC
  double lambda = 0.95;
  std::vector<std::size_t> hidden = {256, 256};
  double lr = 3e-4;
  std::size_t batch = 128;
  double target_mix = 0.005;
  std::size_t iterations = 20000;
  std::size_t eval_every = 2000;
  std::size_t eval_episodes = 10;
  ImaginationMode imagination = ImaginationMode::cached;
  std::size_t cache_samples = 4;
  /// One-step rollouts draw with this multiple of the model standard deviation.
  double onestep_noise_scale = 1.0;
  Td3Config td3;
  IqlConfig iql;
  PqlConfig pql;

  bool uses_lambda() const;
  bool normalizes_reward() const { return algorithm != Algorithm::td3bc; }
  void validate() const;
};

nlohmann::json agent_config_to_json(const AgentConfig& cfg);
/// Expects every key written by agent_config_to_json.
AgentConfig agent_config_from_json(const nlohmann::json& j);

/// All networks and optimizer state of one agent. Networks read normalized
/// observations; the critic input is [s | a]. For IQL/PQL the actor
/// parameter vector ends with a state-independent log standard deviation.
struct ActorCriticState {
  Algorithm algorithm = Algorithm::td3bc;
  std::size_t state_dim = 0, action_dim = 0;
  Mlp actor_net, critic_net, value_net;
  std::vector<double> actor, critic1, critic2, value;
  std::vector<double> actor_target, critic1_target, critic2_target;
  AdamState actor_opt, critic1_opt, critic2_opt, value_opt;
  std::uint64_t iteration = 0;

  static ActorCriticState create(const AgentConfig& cfg, std::size_t state_dim, std::size_t action_dim,
                                 std::uint64_t seed);
  bool gaussian() const { return algorithm != Algorithm::td3bc; }
  std::span<const double> actor_mlp_params(std::span<const double> p) const {
    return p.subspan(0, actor_net.param_count());
  }
  void set_exec(kernels::Exec e);
};

// ------------------------------------------------------------ network passes

/// Tanh-bounded deterministic action (the Gaussian mean for IQL/PQL).
Matrix actor_action(const ActorCriticState& st, std::span<const double> actor_params, const Matrix& s_norm);
std::vector<double> critic_value(const ActorCriticState& st, std::span<const double> critic_params, const Matrix& s_norm,
                    const Matrix& a);
std::vector<double> state_value(const ActorCriticState& st, std::span<const double> value_params, const Matrix& s_norm);

// ----------------------------------------------- losses with analytic gradients

/// mean_b (Q(s_b, a_b) - y_b)^2.
double critic_mse_loss(const ActorCriticState& st, std::span<const double> critic_params, const Matrix& s_norm,
                       const Matrix& a, std::span<const double> y, std::span<double> grad);

/// mean_b L^tau(q_b - V(s_b)).
double expectile_value_loss(const ActorCriticState& st, std::span<const double> value_params, const Matrix& s_norm,
                            std::span<const double> q, double tau, std::span<double> grad);

/// mean_b (q_b - V(s_b))^2.
double value_mse_loss(const ActorCriticState& st, std::span<const double> value_params, const Matrix& s_norm,
                      std::span<const double> q, std::span<double> grad);

/// alpha / mean_b |Q1(s_b, pi(s_b))|, held constant during the actor step.
double td3bc_lambda(double alpha, std::span<const double> q);

/// -lambda_tilde * mean_b Q1(s_b, pi(s_b)) + mean_b |a_b - pi(s_b)|^2.
double td3bc_actor_loss(const ActorCriticState& st, std::span<const double> actor_params,
                        std::span<const double> critic_params, const Matrix& s_norm, const Matrix& a,
                        double lambda_tilde, std::span<double> grad);

/// Gaussian log-density of a under the policy at s, per row.
std::vector<double> policy_log_prob(const ActorCriticState& st, std::span<const double> actor_params, const Matrix& s_norm,
                       const Matrix& a, const IqlConfig& cfg);

/// -mean_b w_b log pi(a_b | s_b).
double awr_actor_loss(const ActorCriticState& st, std::span<const double> actor_params, const Matrix& s_norm,
                      const Matrix& a, std::span<const double> weights, const IqlConfig& cfg,
                      std::span<double> grad);

/// min(exp(beta * adv), max_weight) per element.
std::vector<double> awr_weights(std::span<const double> advantage, double beta, double max_weight);

// -------------------------------------------------------------- imagination

/// A real transition batch drawn from the dataset, in raw units.
struct AgentBatch {
  std::vector<std::size_t> traj, t;
  Matrix s, a, s_next;
  std::vector<double> r;
};

AgentBatch sample_agent_batch(const OfflineDataset& data, std::size_t batch, Rng& rng);

/// Precomputed DWM continuations: `samples` draws for every (trajectory, t, g_eval).
class ImaginationCache {
 public:
  ImaginationCache() = default;
  static ImaginationCache build(const DiffusionWorldModel& model, const OfflineDataset& data,
                                const std::vector<double>& g_eval, std::size_t samples, std::uint64_t seed);

  ImaginedSeq get(std::size_t traj, std::size_t t, std::size_t g_index, std::size_t sample) const;
  std::size_t samples() const { return samples_; }
  std::size_t g_count() const { return g_eval_.size(); }

 private:
  std::size_t offset(std::size_t traj, std::size_t t, std::size_t g, std::size_t j) const;
  std::size_t state_dim_ = 0, rewards_per_seq_ = 0, states_per_seq_ = 0;
  std::size_t steps_per_traj_ = 0, samples_ = 0;
  std::vector<double> g_eval_;
  std::vector<double> rewards_, states_;
};

/// Supplies imagined continuations for an agent batch.
struct ImaginationSourceSet {
  ModelSource source = ModelSource::none;
  const DiffusionWorldModel* dwm = nullptr;
  const OneStepModel* onestep = nullptr;
  const ImaginationCache* cache = nullptr;
};

// ---------------------------------------------------------------- updates

struct LossReport {
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  double value_loss = 0.0;
  double q_mean = 0.0;
  double target_mean = 0.0;
  bool actor_updated = false;
  bool targets_updated = false;
};

/// y = r + gamma * min_i Qbar_i(s', clip(pibar(s') + clip(eps, -C, C), -1, 1)) per row,
/// eps ~ N(0, sigma^2). The normalized next states are rows of s_next_norm.
std::vector<double> td3_target_value(const ActorCriticState& st, const Matrix& s_next_norm,
                                     std::span<const double> r, double gamma, const Td3Config& cfg, Rng& rng);

/// Bootstrap values at a batch of normalized states: the smoothed twin-critic
/// minimum for TD3+BC, V for IQL/PQL.
std::vector<double> bootstrap_values(const ActorCriticState& st, const Matrix& s_norm, const AgentConfig& cfg,
                                     Rng& rng);

/// Critic targets for a batch of imagined sequences (raw units).
std::vector<double> critic_targets(const ActorCriticState& st, const std::vector<ImaginedSeq>& seqs,
                                   const Normalizer& normalizer, const AgentConfig& cfg, Rng& rng);

/// Imagined sequences for a batch from the configured source. For PQL the
/// m samples per row are reduced with pql_sequence.
std::vector<ImaginedSeq> imagine(const ActorCriticState& st, const AgentBatch& batch, const Normalizer& normalizer,
                                 const AgentConfig& cfg, const ImaginationSourceSet& src, Rng& rng);

LossReport td3bc_update(ActorCriticState& st, const AgentBatch& batch, const std::vector<ImaginedSeq>& seqs,
                        const Normalizer& normalizer, const AgentConfig& cfg, Rng& rng);
LossReport iql_update(ActorCriticState& st, const AgentBatch& batch, const std::vector<ImaginedSeq>& seqs,
                      const Normalizer& normalizer, const AgentConfig& cfg, Rng& rng);
/// IQL with an MSE value loss; seqs already carry penalized rewards.
LossReport pql_update(ActorCriticState& st, const AgentBatch& batch, const std::vector<ImaginedSeq>& seqs,
                      const Normalizer& normalizer, const AgentConfig& cfg, Rng& rng);

// ---------------------------------------------------------------- policies

/// Deterministic policy over raw observations (the mean action for IQL/PQL).
class AgentPolicy final : public Policy {
 public:
  AgentPolicy(const ActorCriticState& st, const Normalizer& normalizer, std::string tag);
  void act(std::span<const double> state, std::span<double> action) override;
  std::string tag() const override { return tag_; }

 private:
  const ActorCriticState& st_;
  const Normalizer& normalizer_;
  std::string tag_;
};

void save_agent(const std::filesystem::path& path, const ActorCriticState& st, const Normalizer& normalizer,
                const AgentConfig& cfg, std::uint64_t seed);
struct LoadedAgent {
  ActorCriticState state;
  Normalizer normalizer;
  AgentConfig config;
};
LoadedAgent load_agent(const std::filesystem::path& path);

// ---------------------------------------------------------------- training

struct TrainLogRow {
  std::uint64_t iteration = 0;
  LossReport losses;
  std::optional<ReturnReport> eval;
};

struct TrainResult {
  ActorCriticState state;
  std::vector<TrainLogRow> log;
  std::vector<std::pair<std::uint64_t, double>> wall_seconds;  // per logged iteration
  ReturnReport final_eval;
};

/// Runs cfg.iterations updates. Evaluates every eval_every iterations and at the end.
/// The progress callback, when set, receives each evaluated row.
TrainResult train_offline_agent(const OfflineDataset& data, const EnvSpec& env, const AgentConfig& cfg,
                                const ImaginationSourceSet& src, const ReturnAnchors& anchors, std::uint64_t seed,
                                const std::function<void(const TrainLogRow&)>& progress = {});

/// CSV: iteration,critic_loss,actor_loss,value_loss,q_mean,target_mean,eval_return_mean,eval_return_std,
/// eval_normalized_mean,eval_normalized_std (eval fields empty when not evaluated).
std::string train_log_csv(const std::vector<TrainLogRow>& log);
std::string timing_csv(const std::vector<std::pair<std::uint64_t, double>>& wall);

}  // namespace dwmlab
