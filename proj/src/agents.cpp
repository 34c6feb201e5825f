#include "dwmlab/agents.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dwmlab/checkpoint.hpp"
#include "dwmlab/errors.hpp"
#include "dwmlab/log.hpp"

namespace dwmlab {

// ------------------------------------------------------------------ strings

Algorithm algorithm_from_string(const std::string& s) {
  if (s == "td3bc") return Algorithm::td3bc;
  if (s == "iql") return Algorithm::iql;
  if (s == "pql") return Algorithm::pql;
  throw ConfigError("unknown algorithm: " + s);
}

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::td3bc: return "td3bc";
    case Algorithm::iql: return "iql";
    case Algorithm::pql: return "pql";
  }
  return "td3bc";
}

ModelSource model_source_from_string(const std::string& s) {
  if (s == "dwm") return ModelSource::dwm;
  if (s == "onestep") return ModelSource::onestep;
  if (s == "none") return ModelSource::none;
  throw ConfigError("unknown model source: " + s);
}

std::string to_string(ModelSource s) {
  switch (s) {
    case ModelSource::dwm: return "dwm";
    case ModelSource::onestep: return "onestep";
    case ModelSource::none: return "none";
  }
  return "none";
}

ImaginationMode imagination_mode_from_string(const std::string& s) {
  if (s == "cached") return ImaginationMode::cached;
  if (s == "fresh") return ImaginationMode::fresh;
  throw ConfigError("unknown imagination mode: " + s);
}

std::string to_string(ImaginationMode m) { return m == ImaginationMode::cached ? "cached" : "fresh"; }

LambdaMode lambda_mode_from_string(const std::string& s) {
  if (s == "auto") return LambdaMode::automatic;
  if (s == "on") return LambdaMode::on;
  if (s == "off") return LambdaMode::off;
  throw ConfigError("unknown lambda_return mode: " + s);
}

std::string to_string(LambdaMode m) {
  switch (m) {
    case LambdaMode::automatic: return "auto";
    case LambdaMode::on: return "on";
    case LambdaMode::off: return "off";
  }
  return "auto";
}

// ------------------------------------------------------------------- config

bool AgentConfig::uses_lambda() const {
  if (lambda_return == LambdaMode::automatic) return algorithm != Algorithm::td3bc;
  return lambda_return == LambdaMode::on;
}

void AgentConfig::validate() const {
  if (H < 1) throw ConfigError("agent: H must be at least 1");
  if (source == ModelSource::none && H != 1) throw ConfigError("agent: source 'none' supports only H = 1");
  if (source == ModelSource::none && algorithm == Algorithm::pql)
    throw ConfigError("agent: pql needs a world model source");
  if (g_eval.empty()) throw ConfigError("agent: g_eval list must not be empty");
  for (double g : g_eval)
    if (!std::isfinite(g)) throw ConfigError("agent: g_eval values must be finite");
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("agent: gamma must lie in (0, 1)");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("agent: lambda must lie in [0, 1]");
  if (hidden.empty()) throw ConfigError("agent: at least one hidden layer required");
  if (!(lr > 0.0)) throw ConfigError("agent: lr must be positive");
  if (batch == 0 || iterations == 0 || eval_every == 0 || eval_episodes == 0)
    throw ConfigError("agent: batch, iterations, eval_every and eval_episodes must be positive");
  if (!(target_mix >= 0.0 && target_mix <= 1.0)) throw ConfigError("agent: target_mix must lie in [0, 1]");
  if (cache_samples == 0) throw ConfigError("agent: cache_samples must be positive");
  if (!(onestep_noise_scale >= 0.0)) throw ConfigError("agent: onestep_noise_scale must be non-negative");
  if (td3.policy_delay == 0 || td3.target_every == 0 || iql.target_every == 0)
    throw ConfigError("agent: update periods must be positive");
  if (!(td3.policy_noise >= 0.0 && td3.noise_clip >= 0.0 && td3.alpha >= 0.0))
    throw ConfigError("agent: td3 noise, clip and alpha must be non-negative");
  if (!(iql.expectile > 0.0 && iql.expectile < 1.0)) throw ConfigError("agent: expectile must lie in (0, 1)");
  if (!(iql.beta >= 0.0 && iql.max_weight > 0.0)) throw ConfigError("agent: beta >= 0 and max_weight > 0 required");
  if (!(iql.log_std_min < iql.log_std_max)) throw ConfigError("agent: log_std_min must be below log_std_max");
  if (!(pql.kappa >= 0.0)) throw ConfigError("agent: kappa must be non-negative");
  if (algorithm == Algorithm::pql && pql.m < 2) throw ConfigError("agent: pql needs m >= 2");
  if (algorithm == Algorithm::pql && source == ModelSource::dwm && imagination == ImaginationMode::cached &&
      cache_samples < pql.m)
    throw ConfigError("agent: cache_samples must be at least pql.m");
}

nlohmann::json agent_config_to_json(const AgentConfig& c) {
  return {{"algorithm", to_string(c.algorithm)},
          {"source", to_string(c.source)},
          {"H", c.H},
          {"g_eval", c.g_eval},
          {"gamma", c.gamma},
          {"lambda_return", to_string(c.lambda_return)},
          {"lambda", c.lambda},
          {"hidden", c.hidden},
          {"lr", c.lr},
          {"batch", c.batch},
          {"target_mix", c.target_mix},
          {"iterations", c.iterations},
          {"eval_every", c.eval_every},
          {"eval_episodes", c.eval_episodes},
          {"imagination", to_string(c.imagination)},
          {"cache_samples", c.cache_samples},
          {"onestep_noise_scale", c.onestep_noise_scale},
          {"td3",
           {{"policy_noise", c.td3.policy_noise},
            {"noise_clip", c.td3.noise_clip},
            {"alpha", c.td3.alpha},
            {"policy_delay", c.td3.policy_delay},
            {"target_every", c.td3.target_every}}},
          {"iql",
           {{"expectile", c.iql.expectile},
            {"beta", c.iql.beta},
            {"max_weight", c.iql.max_weight},
            {"target_every", c.iql.target_every},
            {"log_std_min", c.iql.log_std_min},
            {"log_std_max", c.iql.log_std_max}}},
          {"pql", {{"kappa", c.pql.kappa}, {"m", c.pql.m}}}};
}

AgentConfig agent_config_from_json(const nlohmann::json& j) {
  AgentConfig c;
  c.algorithm = algorithm_from_string(j.at("algorithm").get<std::string>());
  c.source = model_source_from_string(j.at("source").get<std::string>());
  c.H = j.at("H").get<std::size_t>();
  c.g_eval = j.at("g_eval").get<std::vector<double>>();
  c.gamma = j.at("gamma").get<double>();
  c.lambda_return = lambda_mode_from_string(j.at("lambda_return").get<std::string>());
  c.lambda = j.at("lambda").get<double>();
  c.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  c.lr = j.at("lr").get<double>();
  c.batch = j.at("batch").get<std::size_t>();
  c.target_mix = j.at("target_mix").get<double>();
  c.iterations = j.at("iterations").get<std::size_t>();
  c.eval_every = j.at("eval_every").get<std::size_t>();
  c.eval_episodes = j.at("eval_episodes").get<std::size_t>();
  c.imagination = imagination_mode_from_string(j.at("imagination").get<std::string>());
  c.cache_samples = j.at("cache_samples").get<std::size_t>();
  c.onestep_noise_scale = j.at("onestep_noise_scale").get<double>();
  const auto& t = j.at("td3");
  c.td3.policy_noise = t.at("policy_noise").get<double>();
  c.td3.noise_clip = t.at("noise_clip").get<double>();
  c.td3.alpha = t.at("alpha").get<double>();
  c.td3.policy_delay = t.at("policy_delay").get<std::size_t>();
  c.td3.target_every = t.at("target_every").get<std::size_t>();
  const auto& q = j.at("iql");
  c.iql.expectile = q.at("expectile").get<double>();
  c.iql.beta = q.at("beta").get<double>();
  c.iql.max_weight = q.at("max_weight").get<double>();
  c.iql.target_every = q.at("target_every").get<std::size_t>();
  c.iql.log_std_min = q.at("log_std_min").get<double>();
  c.iql.log_std_max = q.at("log_std_max").get<double>();
  const auto& p = j.at("pql");
  c.pql.kappa = p.at("kappa").get<double>();
  c.pql.m = p.at("m").get<std::size_t>();
  return c;
}

// -------------------------------------------------------------------- state

namespace {

MlpArch mlp_arch(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out, Activation output) {
  MlpArch a;
  a.sizes.push_back(in);
  for (std::size_t h : hidden) a.sizes.push_back(h);
  a.sizes.push_back(out);
  a.hidden = Activation::relu;
  a.output = output;
  return a;
}

}  // namespace

ActorCriticState ActorCriticState::create(const AgentConfig& cfg, std::size_t state_dim, std::size_t action_dim,
                                          std::uint64_t seed) {
  ActorCriticState st;
  st.algorithm = cfg.algorithm;
  st.state_dim = state_dim;
  st.action_dim = action_dim;
  st.actor_net = Mlp(mlp_arch(state_dim, cfg.hidden, action_dim, Activation::tanh));
  st.critic_net = Mlp(mlp_arch(state_dim + action_dim, cfg.hidden, 1, Activation::identity));
  Rng rng(derive_seed(seed, 0x4143));
  st.actor = st.actor_net.make_params(rng);
  if (st.gaussian()) st.actor.resize(st.actor.size() + action_dim, 0.0);
  st.critic1 = st.critic_net.make_params(rng);
  st.critic2 = st.critic_net.make_params(rng);
  st.actor_target = st.actor;
  st.critic1_target = st.critic1;
  st.critic2_target = st.critic2;
  const AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8};
  st.actor_opt = AdamState(st.actor.size(), adam);
  st.critic1_opt = AdamState(st.critic1.size(), adam);
  st.critic2_opt = AdamState(st.critic2.size(), adam);
  if (st.gaussian()) {
    st.value_net = Mlp(mlp_arch(state_dim, cfg.hidden, 1, Activation::identity));
    st.value = st.value_net.make_params(rng);
    st.value_opt = AdamState(st.value.size(), adam);
  }
  return st;
}

void ActorCriticState::set_exec(kernels::Exec e) {
  actor_net.set_exec(e);
  critic_net.set_exec(e);
  value_net.set_exec(e);
}

// ----------------------------------------------------------- network passes

Matrix actor_action(const ActorCriticState& st, std::span<const double> actor_params, const Matrix& s_norm) {
  return st.actor_net.forward(st.actor_mlp_params(actor_params), s_norm);
}

std::vector<double> critic_value(const ActorCriticState& st, std::span<const double> critic_params,
                                 const Matrix& s_norm, const Matrix& a) {
  return st.critic_net.forward(critic_params, hconcat({&s_norm, &a})).data;
}

std::vector<double> state_value(const ActorCriticState& st, std::span<const double> value_params,
                                const Matrix& s_norm) {
  return st.value_net.forward(value_params, s_norm).data;
}

// -------------------------------------------------------------------- losses

double critic_mse_loss(const ActorCriticState& st, std::span<const double> critic_params, const Matrix& s_norm,
                       const Matrix& a, std::span<const double> y, std::span<double> grad) {
  const std::size_t B = s_norm.rows;
  MlpTape tape;
  const Matrix q = st.critic_net.forward(critic_params, hconcat({&s_norm, &a}), grad.empty() ? nullptr : &tape);
  double loss = 0.0;
  Matrix dq(B, 1);
  for (std::size_t b = 0; b < B; ++b) {
    const double d = q.data[b] - y[b];
    loss += d * d;
    dq.data[b] = 2.0 * d / static_cast<double>(B);
  }
  if (!grad.empty()) st.critic_net.backward(critic_params, tape, dq, grad);
  return loss / static_cast<double>(B);
}

namespace {

template <typename Loss, typename Grad>
double value_loss(const ActorCriticState& st, std::span<const double> value_params, const Matrix& s_norm,
                  std::span<const double> q, std::span<double> grad, Loss loss_fn, Grad grad_fn) {
  const std::size_t B = s_norm.rows;
  MlpTape tape;
  const Matrix v = st.value_net.forward(value_params, s_norm, grad.empty() ? nullptr : &tape);
  double loss = 0.0;
  Matrix dv(B, 1);
  for (std::size_t b = 0; b < B; ++b) {
    const double u = q[b] - v.data[b];
    loss += loss_fn(u);
    dv.data[b] = -grad_fn(u) / static_cast<double>(B);
  }
  if (!grad.empty()) st.value_net.backward(value_params, tape, dv, grad);
  return loss / static_cast<double>(B);
}

}  // namespace

double expectile_value_loss(const ActorCriticState& st, std::span<const double> value_params, const Matrix& s_norm,
                            std::span<const double> q, double tau, std::span<double> grad) {
  return value_loss(
      st, value_params, s_norm, q, grad, [tau](double u) { return expectile_loss(u, tau); },
      [tau](double u) { return expectile_grad(u, tau); });
}

double value_mse_loss(const ActorCriticState& st, std::span<const double> value_params, const Matrix& s_norm,
                      std::span<const double> q, std::span<double> grad) {
  return value_loss(
      st, value_params, s_norm, q, grad, [](double u) { return u * u; }, [](double u) { return 2.0 * u; });
}

double td3bc_lambda(double alpha, std::span<const double> q) {
  double m = 0.0;
  for (double v : q) m += std::abs(v);
  m /= static_cast<double>(q.size());
  return alpha / std::max(m, 1e-8);
}

double td3bc_actor_loss(const ActorCriticState& st, std::span<const double> actor_params,
                        std::span<const double> critic_params, const Matrix& s_norm, const Matrix& a,
                        double lambda_tilde, std::span<double> grad) {
  const std::size_t B = s_norm.rows, ds = st.state_dim, da = st.action_dim;
  const bool want = !grad.empty();
  MlpTape actor_tape, critic_tape;
  const Matrix pi = st.actor_net.forward(st.actor_mlp_params(actor_params), s_norm, want ? &actor_tape : nullptr);
  const Matrix q = st.critic_net.forward(critic_params, hconcat({&s_norm, &pi}), want ? &critic_tape : nullptr);
  const double inv_b = 1.0 / static_cast<double>(B);
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    loss -= lambda_tilde * q.data[b] * inv_b;
    for (std::size_t j = 0; j < da; ++j) {
      const double d = a(b, j) - pi(b, j);
      loss += d * d * inv_b;
    }
  }
  if (!want) return loss;
  Matrix dq(B, 1, -lambda_tilde * inv_b);
  std::vector<double> critic_scratch(critic_params.size(), 0.0);
  Matrix d_input;
  st.critic_net.backward(critic_params, critic_tape, dq, critic_scratch, &d_input);
  Matrix dpi(B, da);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < da; ++j) dpi(b, j) = d_input(b, ds + j) - 2.0 * (a(b, j) - pi(b, j)) * inv_b;
  st.actor_net.backward(st.actor_mlp_params(actor_params), actor_tape, dpi,
                        grad.subspan(0, st.actor_net.param_count()));
  return loss;
}

namespace {

double clamp_log_std(double v, const IqlConfig& cfg) { return std::clamp(v, cfg.log_std_min, cfg.log_std_max); }

}  // namespace

std::vector<double> policy_log_prob(const ActorCriticState& st, std::span<const double> actor_params,
                                    const Matrix& s_norm, const Matrix& a, const IqlConfig& cfg) {
  const std::size_t B = s_norm.rows, da = st.action_dim;
  const Matrix mu = actor_action(st, actor_params, s_norm);
  const auto log_std = actor_params.subspan(st.actor_net.param_count(), da);
  const double half_log2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  std::vector<double> out(B, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < da; ++j) {
      const double ls = clamp_log_std(log_std[j], cfg);
      const double z = (a(b, j) - mu(b, j)) * std::exp(-ls);
      out[b] += -0.5 * z * z - ls - half_log2pi;
    }
  return out;
}

double awr_actor_loss(const ActorCriticState& st, std::span<const double> actor_params, const Matrix& s_norm,
                      const Matrix& a, std::span<const double> weights, const IqlConfig& cfg,
                      std::span<double> grad) {
  const std::size_t B = s_norm.rows, da = st.action_dim, n_mlp = st.actor_net.param_count();
  const bool want = !grad.empty();
  MlpTape tape;
  const Matrix mu = st.actor_net.forward(st.actor_mlp_params(actor_params), s_norm, want ? &tape : nullptr);
  const auto log_std = actor_params.subspan(n_mlp, da);
  const double half_log2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  const double inv_b = 1.0 / static_cast<double>(B);
  double loss = 0.0;
  Matrix dmu(B, da);
  std::vector<double> dls(da, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < da; ++j) {
      const double ls = clamp_log_std(log_std[j], cfg);
      const double inv_var = std::exp(-2.0 * ls);
      const double d = a(b, j) - mu(b, j);
      loss -= weights[b] * (-0.5 * d * d * inv_var - ls - half_log2pi) * inv_b;
      dmu(b, j) = -weights[b] * d * inv_var * inv_b;
      dls[j] += -weights[b] * (d * d * inv_var - 1.0) * inv_b;
    }
  if (!want) return loss;
  st.actor_net.backward(st.actor_mlp_params(actor_params), tape, dmu, grad.subspan(0, n_mlp));
  for (std::size_t j = 0; j < da; ++j) {
    const bool inside = log_std[j] > cfg.log_std_min && log_std[j] < cfg.log_std_max;
    if (inside) grad[n_mlp + j] += dls[j];
  }
  return loss;
}

std::vector<double> awr_weights(std::span<const double> advantage, double beta, double max_weight) {
  std::vector<double> w(advantage.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::min(std::exp(beta * advantage[i]), max_weight);
  return w;
}

// --------------------------------------------------------------- batches

AgentBatch sample_agent_batch(const OfflineDataset& data, std::size_t batch, Rng& rng) {
  const std::size_t L = data.episode_length();
  if (L < 2) throw ConfigError("sample_agent_batch: episodes need at least two steps");
  const std::size_t ds = data.state_dim, da = data.action_dim;
  AgentBatch ab;
  ab.traj.resize(batch);
  ab.t.resize(batch);
  ab.s.resize(batch, ds);
  ab.a.resize(batch, da);
  ab.s_next.resize(batch, ds);
  ab.r.resize(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t i = rng.index(data.trajectories.size());
    const std::size_t t = rng.index(L - 1);
    const auto& tr = data.trajectories[i];
    ab.traj[b] = i;
    ab.t[b] = t;
    std::copy(tr.state(t).begin(), tr.state(t).end(), ab.s.row(b).begin());
    std::copy(tr.action(t).begin(), tr.action(t).end(), ab.a.row(b).begin());
    std::copy(tr.state(t + 1).begin(), tr.state(t + 1).end(), ab.s_next.row(b).begin());
    ab.r[b] = tr.rewards[t];
  }
  return ab;
}

namespace {

Matrix normalize_states(const Normalizer& n, const Matrix& raw) {
  Matrix out(raw.rows, raw.cols);
  for (std::size_t b = 0; b < raw.rows; ++b) n.apply_obs(raw.row(b), out.row(b));
  return out;
}

}  // namespace

// ------------------------------------------------------- imagination cache

std::size_t ImaginationCache::offset(std::size_t traj, std::size_t t, std::size_t g, std::size_t j) const {
  return ((traj * steps_per_traj_ + t) * g_eval_.size() + g) * samples_ + j;
}

ImaginationCache ImaginationCache::build(const DiffusionWorldModel& model, const OfflineDataset& data,
                                         const std::vector<double>& g_eval, std::size_t samples,
                                         std::uint64_t seed) {
  if (samples == 0 || g_eval.empty()) throw ConfigError("imagination cache: samples and g_eval must be non-empty");
  ImaginationCache c;
  const auto& lay = model.layout;
  c.state_dim_ = lay.state_dim;
  c.rewards_per_seq_ = lay.horizon;
  c.states_per_seq_ = lay.horizon - 1;
  c.steps_per_traj_ = data.episode_length() - 1;
  c.samples_ = samples;
  c.g_eval_ = g_eval;
  const std::size_t n_traj = data.trajectories.size();
  const std::size_t total = n_traj * c.steps_per_traj_ * g_eval.size() * samples;
  c.rewards_.resize(total * c.rewards_per_seq_);
  c.states_.resize(total * c.states_per_seq_ * c.state_dim_);

  Rng rng(seed);
  constexpr std::size_t kChunk = 512;
  const std::size_t rows_per_g = n_traj * c.steps_per_traj_ * samples;
  for (std::size_t g = 0; g < g_eval.size(); ++g) {
    const SampleOptions opt = default_sample_options(model.config, g_eval[g]);
    for (std::size_t start = 0; start < rows_per_g; start += kChunk) {
      const std::size_t n = std::min(kChunk, rows_per_g - start);
      Matrix s(n, lay.state_dim), a(n, lay.action_dim);
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t flat = (start + k) / samples;
        const auto& tr = data.trajectories[flat / c.steps_per_traj_];
        const std::size_t t = flat % c.steps_per_traj_;
        std::copy(tr.state(t).begin(), tr.state(t).end(), s.row(k).begin());
        std::copy(tr.action(t).begin(), tr.action(t).end(), a.row(k).begin());
      }
      const auto seqs = sample_dwm(model, s, a, opt, rng);
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t flat = (start + k) / samples, j = (start + k) % samples;
        const std::size_t off = c.offset(flat / c.steps_per_traj_, flat % c.steps_per_traj_, g, j);
        std::copy(seqs[k].rewards.begin(), seqs[k].rewards.end(),
                  c.rewards_.begin() + static_cast<long>(off * c.rewards_per_seq_));
        std::copy(seqs[k].states.begin(), seqs[k].states.end(),
                  c.states_.begin() + static_cast<long>(off * c.states_per_seq_ * c.state_dim_));
      }
    }
  }
  return c;
}

ImaginedSeq ImaginationCache::get(std::size_t traj, std::size_t t, std::size_t g_index, std::size_t sample) const {
  const std::size_t off = offset(traj, t, g_index, sample);
  ImaginedSeq seq;
  seq.state_dim = state_dim_;
  seq.source = ImaginationSource::dwm;
  seq.g_eval = g_eval_.at(g_index);
  const auto r0 = rewards_.begin() + static_cast<long>(off * rewards_per_seq_);
  seq.rewards.assign(r0, r0 + static_cast<long>(rewards_per_seq_));
  const auto s0 = states_.begin() + static_cast<long>(off * states_per_seq_ * state_dim_);
  seq.states.assign(s0, s0 + static_cast<long>(states_per_seq_ * state_dim_));
  return seq;
}

// ------------------------------------------------------------ imagination

namespace {

// m distinct indices out of n by a partial Fisher-Yates shuffle.
std::vector<std::size_t> distinct_indices(std::size_t n, std::size_t m, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < m; ++i) std::swap(idx[i], idx[i + rng.index(n - i)]);
  idx.resize(m);
  return idx;
}

Matrix repeat_rows(const Matrix& m, std::size_t times) {
  Matrix out(m.rows * times, m.cols);
  for (std::size_t b = 0; b < m.rows; ++b)
    for (std::size_t k = 0; k < times; ++k)
      std::copy(m.row(b).begin(), m.row(b).end(), out.row(b * times + k).begin());
  return out;
}

}  // namespace

std::vector<ImaginedSeq> imagine(const ActorCriticState& st, const AgentBatch& batch, const Normalizer& normalizer,
                                 const AgentConfig& cfg, const ImaginationSourceSet& src, Rng& rng) {
  const std::size_t B = batch.s.rows;
  const std::size_t m = cfg.algorithm == Algorithm::pql ? cfg.pql.m : 1;
  std::vector<ImaginedSeq> raw;  // B * m rows, row-major by batch item
  switch (src.source) {
    case ModelSource::none: {
      raw.resize(B);
      for (std::size_t b = 0; b < B; ++b) {
        raw[b].state_dim = st.state_dim;
        raw[b].source = ImaginationSource::onestep;
        raw[b].rewards = {batch.r[b]};
        raw[b].states.assign(batch.s_next.row(b).begin(), batch.s_next.row(b).end());
      }
      break;
    }
    case ModelSource::dwm: {
      if (!src.dwm) throw MissingArtifactError("agent: dwm source selected but no diffusion model supplied");
      const std::size_t g = rng.index(cfg.g_eval.size());
      if (cfg.imagination == ImaginationMode::cached) {
        if (!src.cache) throw ConfigError("agent: cached imagination requested without a cache");
        raw.reserve(B * m);
        for (std::size_t b = 0; b < B; ++b) {
          if (m == 1) {
            raw.push_back(src.cache->get(batch.traj[b], batch.t[b], g, rng.index(src.cache->samples())));
          } else {
            for (std::size_t j : distinct_indices(src.cache->samples(), m, rng))
              raw.push_back(src.cache->get(batch.traj[b], batch.t[b], g, j));
          }
        }
      } else {
        SampleOptions opt = default_sample_options(src.dwm->config, cfg.g_eval[g]);
        raw = sample_dwm(*src.dwm, repeat_rows(batch.s, m), repeat_rows(batch.a, m), opt, rng);
      }
      break;
    }
    case ModelSource::onestep: {
      if (!src.onestep) throw MissingArtifactError("agent: onestep source selected but no one-step model supplied");
      const auto& policy_params = st.algorithm == Algorithm::td3bc ? st.actor_target : st.actor;
      BatchPolicy policy = [&](std::size_t, const Matrix& states) {
        return actor_action(st, policy_params, normalize_states(normalizer, states));
      };
      raw = recursive_rollout(*src.onestep, repeat_rows(batch.s, m), repeat_rows(batch.a, m), cfg.H, policy, rng,
                              cfg.onestep_noise_scale);
      break;
    }
  }
  if (m == 1) return raw;
  std::vector<ImaginedSeq> out;
  out.reserve(B);
  for (std::size_t b = 0; b < B; ++b)
    out.push_back(pql_sequence(std::span<const ImaginedSeq>(raw.data() + b * m, m), cfg.pql.kappa));
  return out;
}

// ------------------------------------------------------------------ targets

std::vector<double> bootstrap_values(const ActorCriticState& st, const Matrix& s_norm, const AgentConfig& cfg,
                                     Rng& rng) {
  if (st.algorithm != Algorithm::td3bc) return state_value(st, st.value, s_norm);
  Matrix a = actor_action(st, st.actor_target, s_norm);
  const auto& t = cfg.td3;
  for (double& v : a.data) {
    const double eps = std::clamp(t.policy_noise * rng.normal(), -t.noise_clip, t.noise_clip);
    v = std::clamp(v + eps, -1.0, 1.0);
  }
  const auto q1 = critic_value(st, st.critic1_target, s_norm, a);
  const auto q2 = critic_value(st, st.critic2_target, s_norm, a);
  std::vector<double> q(q1.size());
  for (std::size_t b = 0; b < q.size(); ++b) q[b] = std::min(q1[b], q2[b]);
  return q;
}

std::vector<double> td3_target_value(const ActorCriticState& st, const Matrix& s_next_norm,
                                     std::span<const double> r, double gamma, const Td3Config& cfg, Rng& rng) {
  AgentConfig ac;
  ac.algorithm = Algorithm::td3bc;
  ac.td3 = cfg;
  const auto boot = bootstrap_values(st, s_next_norm, ac, rng);
  std::vector<double> y(boot.size());
  for (std::size_t b = 0; b < y.size(); ++b) y[b] = r[b] + gamma * boot[b];
  return y;
}

std::vector<double> critic_targets(const ActorCriticState& st, const std::vector<ImaginedSeq>& seqs,
                                   const Normalizer& normalizer, const AgentConfig& cfg, Rng& rng) {
  const std::size_t B = seqs.size(), H = cfg.H;
  const bool lam = cfg.uses_lambda();
  // boot[h - 1][b] is the bootstrap at s_{t+h}; only h = H is needed without lambda.
  std::vector<std::vector<double>> boot(H);
  for (std::size_t h = lam ? 1 : H; h <= H; ++h) {
    Matrix s(B, st.state_dim);
    for (std::size_t b = 0; b < B; ++b) {
      if (H > seqs[b].max_horizon())
        throw ConfigError("agent: H=" + std::to_string(H) + " exceeds the imagined horizon " +
                          std::to_string(seqs[b].max_horizon()));
      normalizer.apply_obs(seqs[b].state(h), s.row(b));
    }
    boot[h - 1] = bootstrap_values(st, s, cfg, rng);
  }
  std::vector<double> y(B);
  std::vector<double> bvec(H);
  for (std::size_t b = 0; b < B; ++b) {
    ImaginedSeq seq = seqs[b];
    if (cfg.normalizes_reward())
      for (double& r : seq.rewards) r = normalizer.apply_reward(r);
    if (lam) {
      for (std::size_t h = 0; h < H; ++h) bvec[h] = boot[h][b];
      y[b] = lambda_return_target(seq, H, cfg.gamma, cfg.lambda, bvec);
    } else {
      y[b] = diff_mve_target(seq, H, cfg.gamma, boot[H - 1][b]);
    }
  }
  return y;
}

// ------------------------------------------------------------------ updates

namespace {

void check_finite(double v, const char* what, std::uint64_t iteration) {
  if (!std::isfinite(v)) {
    std::ostringstream msg;
    msg << what << " became non-finite at iteration " << iteration;
    throw NumericalError(msg.str());
  }
}

double update_critics(ActorCriticState& st, const Matrix& s, const Matrix& a, const std::vector<double>& y) {
  std::vector<double> g1(st.critic1.size(), 0.0), g2(st.critic2.size(), 0.0);
  const double l1 = critic_mse_loss(st, st.critic1, s, a, y, g1);
  const double l2 = critic_mse_loss(st, st.critic2, s, a, y, g2);
  check_finite(l1 + l2, "critic loss", st.iteration);
  st.critic1_opt.step(st.critic1, g1);
  st.critic2_opt.step(st.critic2, g2);
  return 0.5 * (l1 + l2);
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

LossReport iql_like_update(ActorCriticState& st, const AgentBatch& batch, const std::vector<ImaginedSeq>& seqs,
                           const Normalizer& normalizer, const AgentConfig& cfg, Rng& rng, bool expectile) {
  LossReport rep;
  const Matrix s = normalize_states(normalizer, batch.s);
  const auto y = critic_targets(st, seqs, normalizer, cfg, rng);
  rep.target_mean = mean_of(y);
  rep.q_mean = mean_of(critic_value(st, st.critic1, s, batch.a));

  const auto q1t = critic_value(st, st.critic1_target, s, batch.a);
  const auto q2t = critic_value(st, st.critic2_target, s, batch.a);
  std::vector<double> qmin(q1t.size());
  for (std::size_t b = 0; b < qmin.size(); ++b) qmin[b] = std::min(q1t[b], q2t[b]);
  std::vector<double> gv(st.value.size(), 0.0);
  rep.value_loss = expectile ? expectile_value_loss(st, st.value, s, qmin, cfg.iql.expectile, gv)
                             : value_mse_loss(st, st.value, s, qmin, gv);
  check_finite(rep.value_loss, "value loss", st.iteration);
  st.value_opt.step(st.value, gv);

  rep.critic_loss = update_critics(st, s, batch.a, y);
  ++st.iteration;

  const auto q1 = critic_value(st, st.critic1, s, batch.a);
  const auto q2 = critic_value(st, st.critic2, s, batch.a);
  const auto v = state_value(st, st.value, s);
  std::vector<double> adv(q1.size());
  for (std::size_t b = 0; b < adv.size(); ++b) adv[b] = std::min(q1[b], q2[b]) - v[b];
  const auto w = awr_weights(adv, cfg.iql.beta, cfg.iql.max_weight);
  std::vector<double> ga(st.actor.size(), 0.0);
  rep.actor_loss = awr_actor_loss(st, st.actor, s, batch.a, w, cfg.iql, ga);
  check_finite(rep.actor_loss, "actor loss", st.iteration);
  st.actor_opt.step(st.actor, ga);
  rep.actor_updated = true;

  if (st.iteration % cfg.iql.target_every == 0) {
    ema_mix(st.critic1_target, st.critic1, cfg.target_mix);
    ema_mix(st.critic2_target, st.critic2, cfg.target_mix);
    rep.targets_updated = true;
  }
  return rep;
}

}  // namespace

LossReport td3bc_update(ActorCriticState& st, const AgentBatch& batch, const std::vector<ImaginedSeq>& seqs,
                        const Normalizer& normalizer, const AgentConfig& cfg, Rng& rng) {
  LossReport rep;
  const Matrix s = normalize_states(normalizer, batch.s);
  const auto y = critic_targets(st, seqs, normalizer, cfg, rng);
  rep.target_mean = mean_of(y);
  rep.q_mean = mean_of(critic_value(st, st.critic1, s, batch.a));
  rep.critic_loss = update_critics(st, s, batch.a, y);
  ++st.iteration;

  if (st.iteration % cfg.td3.policy_delay == 0) {
    const Matrix pi = actor_action(st, st.actor, s);
    const double lambda_tilde = td3bc_lambda(cfg.td3.alpha, critic_value(st, st.critic1, s, pi));
    std::vector<double> ga(st.actor.size(), 0.0);
    rep.actor_loss = td3bc_actor_loss(st, st.actor, st.critic1, s, batch.a, lambda_tilde, ga);
    check_finite(rep.actor_loss, "actor loss", st.iteration);
    st.actor_opt.step(st.actor, ga);
    rep.actor_updated = true;
  }
  if (st.iteration % cfg.td3.target_every == 0) {
    ema_mix(st.critic1_target, st.critic1, cfg.target_mix);
    ema_mix(st.critic2_target, st.critic2, cfg.target_mix);
    ema_mix(st.actor_target, st.actor, cfg.target_mix);
    rep.targets_updated = true;
  }
  return rep;
}

LossReport iql_update(ActorCriticState& st, const AgentBatch& batch, const std::vector<ImaginedSeq>& seqs,
                      const Normalizer& normalizer, const AgentConfig& cfg, Rng& rng) {
  return iql_like_update(st, batch, seqs, normalizer, cfg, rng, true);
}

LossReport pql_update(ActorCriticState& st, const AgentBatch& batch, const std::vector<ImaginedSeq>& seqs,
                      const Normalizer& normalizer, const AgentConfig& cfg, Rng& rng) {
  return iql_like_update(st, batch, seqs, normalizer, cfg, rng, false);
}

// ----------------------------------------------------------------- policies

AgentPolicy::AgentPolicy(const ActorCriticState& st, const Normalizer& normalizer, std::string tag)
    : st_(st), normalizer_(normalizer), tag_(std::move(tag)) {}

void AgentPolicy::act(std::span<const double> state, std::span<double> action) {
  Matrix s(1, st_.state_dim);
  normalizer_.apply_obs(state, s.row(0));
  const Matrix a = actor_action(st_, st_.actor, s);
  std::copy(a.data.begin(), a.data.end(), action.begin());
}

void save_agent(const std::filesystem::path& path, const ActorCriticState& st, const Normalizer& normalizer,
                const AgentConfig& cfg, std::uint64_t seed) {
  Checkpoint ck;
  ck.header = {{"kind", "agent"},
               {"state_dim", st.state_dim},
               {"action_dim", st.action_dim},
               {"config", agent_config_to_json(cfg)},
               {"normalizer", normalizer_to_json(normalizer)},
               {"iteration", st.iteration},
               {"seed", seed}};
  ck.add("actor", st.actor);
  ck.add("critic1", st.critic1);
  ck.add("critic2", st.critic2);
  ck.add("actor_target", st.actor_target);
  ck.add("critic1_target", st.critic1_target);
  ck.add("critic2_target", st.critic2_target);
  if (st.gaussian()) ck.add("value", st.value);
  save_checkpoint(path, ck);
}

LoadedAgent load_agent(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  const auto& h = ck.header;
  if (h.value("kind", std::string{}) != "agent")
    throw FormatError(FormatError::Kind::malformed_header, path.string() + " is not an agent checkpoint");
  try {
    LoadedAgent out;
    out.config = agent_config_from_json(h.at("config"));
    out.normalizer = normalizer_from_json(h.at("normalizer"));
    auto& st = out.state;
    st = ActorCriticState::create(out.config, h.at("state_dim").get<std::size_t>(),
                                  h.at("action_dim").get<std::size_t>(), h.at("seed").get<std::uint64_t>());
    auto take = [&](const char* name, std::vector<double>& dst) {
      const auto& src = ck.block(name);
      if (src.size() != dst.size())
        throw FormatError(FormatError::Kind::count_mismatch, std::string("agent block ") + name + " has wrong size");
      dst = src;
    };
    take("actor", st.actor);
    take("critic1", st.critic1);
    take("critic2", st.critic2);
    take("actor_target", st.actor_target);
    take("critic1_target", st.critic1_target);
    take("critic2_target", st.critic2_target);
    if (st.gaussian()) take("value", st.value);
    st.iteration = h.at("iteration").get<std::uint64_t>();
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::malformed_header, std::string("agent checkpoint header: ") + e.what());
  }
}

// ----------------------------------------------------------------- training

TrainResult train_offline_agent(const OfflineDataset& data, const EnvSpec& env, const AgentConfig& cfg,
                                const ImaginationSourceSet& src, const ReturnAnchors& anchors, std::uint64_t seed,
                                const std::function<void(const TrainLogRow&)>& progress) {
  cfg.validate();
  if (src.source != cfg.source) throw ConfigError("agent: imagination source does not match the config");
  if (cfg.source == ModelSource::dwm) {
    if (!src.dwm) throw MissingArtifactError("agent: dwm source selected but no diffusion model supplied");
    if (cfg.H + 1 > src.dwm->config.T)
      throw ConfigError("agent: H=" + std::to_string(cfg.H) + " needs a world model with T > H");
  }
  if (cfg.source == ModelSource::onestep && !src.onestep)
    throw MissingArtifactError("agent: onestep source selected but no one-step model supplied");

  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  TrainResult res;
  res.state = ActorCriticState::create(cfg, data.state_dim, data.action_dim, derive_seed(seed, 1));
  auto& st = res.state;
  Rng batch_rng(derive_seed(seed, 2)), noise_rng(derive_seed(seed, 3)), imag_rng(derive_seed(seed, 4));
  const std::uint64_t eval_seed = derive_seed(seed, 5);

  ImaginationCache cache;
  ImaginationSourceSet sources = src;
  if (cfg.source == ModelSource::dwm && cfg.imagination == ImaginationMode::cached) {
    cache = ImaginationCache::build(*src.dwm, data, cfg.g_eval, cfg.cache_samples, derive_seed(seed, 6));
    sources.cache = &cache;
    log::debug("imagination cache built");
  }

  LossReport acc;
  std::size_t acc_n = 0, actor_n = 0;
  for (std::size_t i = 1; i <= cfg.iterations; ++i) {
    const AgentBatch batch = sample_agent_batch(data, cfg.batch, batch_rng);
    const auto seqs = imagine(st, batch, data.normalizer, cfg, sources, imag_rng);
    LossReport rep;
    switch (cfg.algorithm) {
      case Algorithm::td3bc: rep = td3bc_update(st, batch, seqs, data.normalizer, cfg, noise_rng); break;
      case Algorithm::iql: rep = iql_update(st, batch, seqs, data.normalizer, cfg, noise_rng); break;
      case Algorithm::pql: rep = pql_update(st, batch, seqs, data.normalizer, cfg, noise_rng); break;
    }
    acc.critic_loss += rep.critic_loss;
    acc.value_loss += rep.value_loss;
    acc.q_mean += rep.q_mean;
    acc.target_mean += rep.target_mean;
    if (rep.actor_updated) {
      acc.actor_loss += rep.actor_loss;
      ++actor_n;
    }
    ++acc_n;
    if (i % cfg.eval_every == 0 || i == cfg.iterations) {
      TrainLogRow row;
      row.iteration = i;
      row.losses.critic_loss = acc.critic_loss / static_cast<double>(acc_n);
      row.losses.value_loss = acc.value_loss / static_cast<double>(acc_n);
      row.losses.q_mean = acc.q_mean / static_cast<double>(acc_n);
      row.losses.target_mean = acc.target_mean / static_cast<double>(acc_n);
      row.losses.actor_loss = actor_n ? acc.actor_loss / static_cast<double>(actor_n) : 0.0;
      AgentPolicy policy(st, data.normalizer, to_string(cfg.algorithm));
      row.eval = evaluate_policy(env, policy, cfg.eval_episodes, eval_seed, anchors);
      res.log.push_back(row);
      res.wall_seconds.emplace_back(i, std::chrono::duration<double>(clock::now() - t0).count());
      if (progress) progress(row);
      acc = LossReport{};
      acc_n = actor_n = 0;
    }
  }
  res.final_eval = *res.log.back().eval;
  return res;
}

std::string train_log_csv(const std::vector<TrainLogRow>& log) {
  std::ostringstream os;
  os.precision(17);
  os << "iteration,critic_loss,actor_loss,value_loss,q_mean,target_mean,eval_return_mean,eval_return_std,"
        "eval_normalized_mean,eval_normalized_std\n";
  for (const auto& r : log) {
    os << r.iteration << ',' << r.losses.critic_loss << ',' << r.losses.actor_loss << ',' << r.losses.value_loss
       << ',' << r.losses.q_mean << ',' << r.losses.target_mean << ',';
    if (r.eval)
      os << r.eval->mean << ',' << r.eval->std << ',' << r.eval->normalized_mean << ',' << r.eval->normalized_std;
    else
      os << ",,,";
    os << '\n';
  }
  return os.str();
}

std::string timing_csv(const std::vector<std::pair<std::uint64_t, double>>& wall) {
  std::ostringstream os;
  os << "iteration,wall_seconds\n";
  for (const auto& [i, s] : wall) os << i << ',' << s << '\n';
  return os.str();
}

}  // namespace dwmlab
