#include "dwmlab/onestep.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dwmlab/checkpoint.hpp"
#include "dwmlab/errors.hpp"

namespace dwmlab {
namespace {

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

MlpArch head_arch(std::size_t in, std::size_t out, const OneStepConfig& cfg) {
  MlpArch a;
  a.sizes.push_back(in);
  for (std::size_t h : cfg.hidden) a.sizes.push_back(h);
  a.sizes.push_back(out);
  a.hidden = cfg.activation;
  a.output = Activation::identity;
  return a;
}

void build_nets(OneStepModel& m) {
  m.mean_net = Mlp(head_arch(m.input_dim(), m.output_dim(), m.config));
  m.var_net = Mlp(head_arch(m.input_dim(), m.output_dim(), m.config));
}

// Raw outputs of both heads plus the tapes needed for backward.
struct HeadPass {
  Matrix mean_raw, var_raw;
  MlpTape mean_tape, var_tape;
};

HeadPass run_heads(const OneStepModel& m, std::span<const double> params, const Matrix& input, bool record) {
  HeadPass hp;
  hp.mean_raw = m.mean_net.forward(m.mean_params(params), input, record ? &hp.mean_tape : nullptr);
  hp.var_raw = m.var_net.forward(m.var_params(params), input, record ? &hp.var_tape : nullptr);
  return hp;
}

GaussianPrediction finish(const OneStepModel& m, const Matrix& input, const HeadPass& hp) {
  GaussianPrediction g{hp.mean_raw, Matrix(hp.var_raw.rows, hp.var_raw.cols)};
  for (std::size_t b = 0; b < input.rows; ++b)
    for (std::size_t j = 0; j < m.state_dim; ++j) g.mean(b, j) += input(b, j);
  for (std::size_t j = 0; j < g.var.data.size(); ++j) g.var.data[j] = softplus(hp.var_raw.data[j]) + OneStepModel::kVarFloor;
  return g;
}

}  // namespace

void OneStepConfig::validate() const {
  if (hidden.empty()) throw ConfigError("onestep: at least one hidden layer required");
  if (batch == 0) throw ConfigError("onestep: batch must be positive");
  if (!(adam.lr > 0.0)) throw ConfigError("onestep: lr must be positive");
}

OneStepModel OneStepModel::create(const OfflineDataset& data, const OneStepConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  OneStepModel m;
  m.state_dim = data.state_dim;
  m.action_dim = data.action_dim;
  m.config = cfg;
  build_nets(m);
  Rng rng(derive_seed(seed, 0x4f5354));
  m.params.resize(m.mean_net.param_count() + m.var_net.param_count());
  std::span<double> p(m.params);
  m.mean_net.init_params(p.subspan(0, m.mean_net.param_count()), rng);
  m.var_net.init_params(p.subspan(m.mean_net.param_count()), rng);
  m.adam = AdamState(m.params.size(), cfg.adam);
  m.normalizer = data.normalizer;
  double max_norm = 0.0;
  for (const auto& tr : data.trajectories)
    for (std::size_t t = 0; t < tr.length(); ++t) {
      double n2 = 0.0;
      for (double v : tr.state(t)) n2 += v * v;
      max_norm = std::max(max_norm, std::sqrt(n2));
    }
  m.max_state_norm = std::max(max_norm, 1e-12);
  m.seed = seed;
  return m;
}

void save_onestep(const std::filesystem::path& path, const OneStepModel& m) {
  Checkpoint ck;
  ck.header = {{"kind", "onestep"},
               {"state_dim", m.state_dim},
               {"action_dim", m.action_dim},
               {"hidden", m.config.hidden},
               {"activation", to_string(m.config.activation)},
               {"lr", m.config.adam.lr},
               {"batch", m.config.batch},
               {"normalizer", normalizer_to_json(m.normalizer)},
               {"max_state_norm", m.max_state_norm},
               {"iteration", m.iteration},
               {"seed", m.seed}};
  ck.add("params", m.params);
  save_checkpoint(path, ck);
}

OneStepModel load_onestep(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  const auto& h = ck.header;
  if (h.value("kind", std::string{}) != "onestep")
    throw FormatError(FormatError::Kind::malformed_header, path.string() + " is not a one-step model");
  try {
    OneStepModel m;
    m.state_dim = h.at("state_dim").get<std::size_t>();
    m.action_dim = h.at("action_dim").get<std::size_t>();
    m.config.hidden = h.at("hidden").get<std::vector<std::size_t>>();
    m.config.activation = activation_from_string(h.at("activation").get<std::string>());
    m.config.adam.lr = h.at("lr").get<double>();
    m.config.batch = h.at("batch").get<std::size_t>();
    build_nets(m);
    m.params = ck.block("params");
    if (m.params.size() != m.mean_net.param_count() + m.var_net.param_count())
      throw FormatError(FormatError::Kind::count_mismatch, "one-step parameter count disagrees with architecture");
    m.adam = AdamState(m.params.size(), m.config.adam);
    m.normalizer = normalizer_from_json(h.at("normalizer"));
    m.max_state_norm = h.at("max_state_norm").get<double>();
    m.iteration = h.at("iteration").get<std::uint64_t>();
    m.seed = h.at("seed").get<std::uint64_t>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::malformed_header, std::string("one-step checkpoint header: ") + e.what());
  }
}

TransitionBatch sample_transitions(const OfflineDataset& data, std::size_t batch, Rng& rng) {
  const std::size_t L = data.episode_length();
  if (L < 2) throw ConfigError("sample_transitions: episodes need at least two steps");
  const std::size_t ds = data.state_dim, da = data.action_dim;
  TransitionBatch tb{Matrix(batch, ds + da), Matrix(batch, ds + 1)};
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& tr = data.trajectories[rng.index(data.trajectories.size())];
    const std::size_t t = rng.index(L - 1);
    auto in = tb.input.row(b);
    data.normalizer.apply_obs(tr.state(t), in.subspan(0, ds));
    std::copy(tr.action(t).begin(), tr.action(t).end(), in.begin() + static_cast<long>(ds));
    auto out = tb.target.row(b);
    data.normalizer.apply_obs(tr.state(t + 1), out.subspan(0, ds));
    out[ds] = data.normalizer.apply_reward(tr.rewards[t]);
  }
  return tb;
}

GaussianPrediction onestep_predict(const OneStepModel& model, std::span<const double> params, const Matrix& input) {
  return finish(model, input, run_heads(model, params, input, false));
}

double gaussian_nll(const Matrix& mean, const Matrix& var, const Matrix& target) {
  const double log2pi = std::log(2.0 * std::numbers::pi);
  double total = 0.0;
  for (std::size_t j = 0; j < mean.data.size(); ++j) {
    const double d = target.data[j] - mean.data[j];
    total += 0.5 * (d * d / var.data[j] + std::log(var.data[j]) + log2pi);
  }
  return total / static_cast<double>(mean.rows);
}

double onestep_nll_loss(const OneStepModel& model, std::span<const double> params, const TransitionBatch& batch,
                        std::span<double> grad) {
  const bool want_grad = !grad.empty();
  const HeadPass hp = run_heads(model, params, batch.input, want_grad);
  const GaussianPrediction g = finish(model, batch.input, hp);
  const double loss = gaussian_nll(g.mean, g.var, batch.target);
  if (!want_grad) return loss;
  const double inv_b = 1.0 / static_cast<double>(batch.input.rows);
  Matrix d_mean(g.mean.rows, g.mean.cols), d_var_raw(g.var.rows, g.var.cols);
  for (std::size_t j = 0; j < g.mean.data.size(); ++j) {
    const double d = batch.target.data[j] - g.mean.data[j];
    const double v = g.var.data[j];
    d_mean.data[j] = -d / v * inv_b;
    d_var_raw.data[j] = 0.5 * (1.0 / v - d * d / (v * v)) * sigmoid(hp.var_raw.data[j]) * inv_b;
  }
  const std::size_t nm = model.mean_net.param_count();
  model.mean_net.backward(model.mean_params(params), hp.mean_tape, d_mean, grad.subspan(0, nm));
  model.var_net.backward(model.var_params(params), hp.var_tape, d_var_raw, grad.subspan(nm));
  return loss;
}

double onestep_training_step(OneStepModel& model, const TransitionBatch& batch) {
  std::vector<double> grad(model.params.size(), 0.0);
  const double loss = onestep_nll_loss(model, model.params, batch, grad);
  if (!std::isfinite(loss)) {
    std::ostringstream msg;
    msg << "one-step training diverged at iteration " << model.iteration << ": loss=" << loss;
    throw NumericalError(msg.str());
  }
  model.adam.step(model.params, grad);
  ++model.iteration;
  return loss;
}

namespace {

// Normalized inputs for raw state/action rows.
Matrix model_inputs(const OneStepModel& m, const Matrix& states, const Matrix& actions) {
  Matrix in(states.rows, m.input_dim());
  for (std::size_t b = 0; b < states.rows; ++b) {
    auto row = in.row(b);
    m.normalizer.apply_obs(states.row(b), row.subspan(0, m.state_dim));
    for (std::size_t j = 0; j < m.action_dim; ++j) row[m.state_dim + j] = actions(b, j);
  }
  return in;
}

// Draw normalized outputs and write raw next states / rewards.
void draw_outputs(const OneStepModel& m, const GaussianPrediction& g, Rng& rng, double noise_scale, Matrix& next,
                  std::vector<double>& rewards) {
  std::vector<double> z(m.state_dim);
  next.resize(g.mean.rows, m.state_dim);
  rewards.resize(g.mean.rows);
  for (std::size_t b = 0; b < g.mean.rows; ++b) {
    for (std::size_t j = 0; j < m.state_dim; ++j) {
      const double e = noise_scale == 0.0 ? 0.0 : rng.normal();
      z[j] = g.mean(b, j) + noise_scale * std::sqrt(g.var(b, j)) * e;
    }
    const double e = noise_scale == 0.0 ? 0.0 : rng.normal();
    const double zr = g.mean(b, m.state_dim) + noise_scale * std::sqrt(g.var(b, m.state_dim)) * e;
    m.normalizer.invert_obs(z, next.row(b));
    rewards[b] = m.normalizer.invert_reward(zr);
  }
}

}  // namespace

void onestep_sample(const OneStepModel& model, std::span<const double> s, std::span<const double> a, Rng& rng,
                    std::span<double> next_state, double& reward, double noise_scale) {
  if (s.size() != model.state_dim || a.size() != model.action_dim || next_state.size() != model.state_dim)
    throw std::invalid_argument("onestep_sample: dimension mismatch");
  Matrix sm(1, model.state_dim), am(1, model.action_dim);
  std::copy(s.begin(), s.end(), sm.data.begin());
  std::copy(a.begin(), a.end(), am.data.begin());
  const auto g = onestep_predict(model, model.params, model_inputs(model, sm, am));
  Matrix next;
  std::vector<double> r;
  draw_outputs(model, g, rng, noise_scale, next, r);
  std::copy(next.data.begin(), next.data.end(), next_state.begin());
  reward = r[0];
}

std::vector<ImaginedSeq> recursive_rollout(const OneStepModel& model, const Matrix& states, const Matrix& actions,
                                           std::size_t H, const BatchPolicy& policy, Rng& rng, double noise_scale) {
  if (H == 0) throw ConfigError("recursive_rollout: H must be at least 1");
  if (states.cols != model.state_dim || actions.cols != model.action_dim || states.rows != actions.rows)
    throw std::invalid_argument("recursive_rollout: state/action shape mismatch");
  const std::size_t B = states.rows;
  std::vector<ImaginedSeq> out(B);
  for (auto& seq : out) {
    seq.state_dim = model.state_dim;
    seq.source = ImaginationSource::onestep;
    seq.rewards.resize(H);
    seq.states.resize(H * model.state_dim);
  }
  const double limit = 1e3 * model.max_state_norm;
  Matrix cur_s = states, cur_a = actions, next;
  std::vector<double> rewards;
  for (std::size_t h = 0; h < H; ++h) {
    if (h > 0) {
      cur_a = policy(h, cur_s);
      if (cur_a.rows != B || cur_a.cols != model.action_dim)
        throw std::invalid_argument("recursive_rollout: policy returned a wrongly shaped action batch");
    }
    const auto g = onestep_predict(model, model.params, model_inputs(model, cur_s, cur_a));
    draw_outputs(model, g, rng, noise_scale, next, rewards);
    for (std::size_t b = 0; b < B; ++b) {
      double n2 = 0.0;
      for (double v : next.row(b)) n2 += v * v;
      if (!(std::sqrt(n2) <= limit)) {
        std::ostringstream msg;
        msg << "one-step rollout diverged at step " << h + 1 << ", row " << b << ": |s|=" << std::sqrt(n2)
            << " exceeds " << limit;
        throw NumericalError(msg.str());
      }
      out[b].rewards[h] = rewards[b];
      std::copy(next.row(b).begin(), next.row(b).end(), out[b].state(h + 1).begin());
    }
    cur_s = next;
  }
  return out;
}

}  // namespace dwmlab
