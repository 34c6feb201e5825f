#include "dwmlab/diffusion.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dwmlab/checkpoint.hpp"
#include "dwmlab/errors.hpp"

namespace dwmlab {

// ------------------------------------------------------------------ schedule

double NoiseSchedule::transition_alpha(std::size_t kp, std::size_t k) const {
  if (kp + 1 == k) return 1.0 - beta[k];
  return alpha_bar[k] / alpha_bar[kp];
}

NoiseSchedule cosine_schedule(std::size_t K, double s) {
  if (K == 0) throw ConfigError("cosine_schedule: K must be at least 1");
  auto f = [K, s](double k) {
    const double c = std::cos(((k / static_cast<double>(K) + s) / (1.0 + s)) * std::numbers::pi / 2.0);
    return c * c;
  };
  NoiseSchedule ns;
  ns.K = K;
  ns.beta.assign(K + 1, 0.0);
  ns.alpha_bar.assign(K + 1, 1.0);
  ns.sigma.assign(K + 1, 0.0);
  const double f0 = f(0.0);
  for (std::size_t k = 1; k <= K; ++k) {
    const double prev = f(static_cast<double>(k - 1)) / f0;
    const double cur = f(static_cast<double>(k)) / f0;
    ns.beta[k] = std::min(1.0 - cur / prev, 0.999);
    ns.alpha_bar[k] = ns.alpha_bar[k - 1] * (1.0 - ns.beta[k]);
    ns.sigma[k] = std::sqrt(ns.beta[k] * (1.0 - ns.alpha_bar[k - 1]) / (1.0 - ns.alpha_bar[k]));
  }
  return ns;
}

std::vector<double> forward_noise(std::span<const double> x0, std::size_t k, std::span<const double> eps,
                                  const NoiseSchedule& schedule) {
  if (x0.size() != eps.size()) throw std::invalid_argument("forward_noise: dimension mismatch");
  if (k < 1 || k > schedule.K) throw std::invalid_argument("forward_noise: k outside [1, K]");
  const double a = std::sqrt(schedule.alpha_bar[k]);
  const double b = std::sqrt(1.0 - schedule.alpha_bar[k]);
  std::vector<double> xk(x0.size());
  for (std::size_t j = 0; j < x0.size(); ++j) xk[j] = a * x0[j] + b * eps[j];
  return xk;
}

std::vector<std::size_t> stride_steps(std::size_t K, double r_infer) {
  if (!(r_infer > 0.0 && r_infer <= 1.0)) throw ConfigError("stride_steps: r_infer must lie in (0, 1]");
  if (K == 0) throw ConfigError("stride_steps: K must be at least 1");
  const auto n = static_cast<std::size_t>(std::ceil(r_infer * static_cast<double>(K) - 1e-12));
  const std::size_t N = std::clamp<std::size_t>(n, 1, K);
  if (N == 1) return {K};
  std::vector<std::size_t> steps;
  for (std::size_t i = 0; i < N; ++i) {
    const double v = 1.0 + static_cast<double>(K - 1) * static_cast<double>(i) / static_cast<double>(N - 1);
    const auto s = static_cast<std::size_t>(std::llround(v));
    if (steps.empty() || steps.back() != s) steps.push_back(s);
  }
  steps.back() = K;
  return steps;
}

// -------------------------------------------------------------------- config

OutputParam output_param_from_string(const std::string& s) {
  if (s == "eps") return OutputParam::eps;
  if (s == "x0") return OutputParam::x0;
  throw ConfigError("unknown output parameterization: " + s);
}

std::string to_string(OutputParam p) { return p == OutputParam::eps ? "eps" : "x0"; }

void DwmConfig::validate() const {
  if (T < 2) throw ConfigError("dwm: T must be at least 2");
  if (K < 1) throw ConfigError("dwm: K must be at least 1");
  if (!(p_uncond >= 0.0 && p_uncond <= 1.0)) throw ConfigError("dwm: p_uncond must lie in [0, 1]");
  if (!(temperature >= 0.0)) throw ConfigError("dwm: temperature must be non-negative");
  if (!(r_infer > 0.0 && r_infer <= 1.0)) throw ConfigError("dwm: r_infer must lie in (0, 1]");
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("dwm: gamma must lie in (0, 1)");
  if (hidden.empty()) throw ConfigError("dwm: at least one hidden layer required");
  if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw ConfigError("dwm: ema_decay must lie in [0, 1]");
  if (ema_every == 0 || batch == 0) throw ConfigError("dwm: batch and ema_every must be positive");
}

// ----------------------------------------------------------- noise predictor

NoisePredictor::NoisePredictor(WindowLayout layout, const DwmConfig& cfg)
    : layout_(layout),
      embed_dim_(cfg.embed_dim),
      encoding_dim_(cfg.step_encoding_dim),
      output_(cfg.output),
      alpha_bar_(cosine_schedule(cfg.K).alpha_bar) {
  MlpArch main_arch;
  main_arch.sizes.push_back(layout.dim() + 2 * cfg.embed_dim + 1);
  for (std::size_t h : cfg.hidden) main_arch.sizes.push_back(h);
  main_arch.sizes.push_back(layout.dim());
  main_arch.hidden = cfg.activation;
  main_ = Mlp(main_arch);
  step_ = Mlp(MlpArch{{cfg.step_encoding_dim, cfg.embed_dim, cfg.embed_dim}, cfg.activation, Activation::identity});
  rtg_ = Mlp(MlpArch{{1, cfg.embed_dim, cfg.embed_dim}, cfg.activation, Activation::identity});
}

void NoisePredictor::set_exec(kernels::Exec e) {
  main_.set_exec(e);
  step_.set_exec(e);
  rtg_.set_exec(e);
}

std::vector<double> NoisePredictor::step_encoding(std::size_t k, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> out(dim, 0.0);
  const double scale = half > 1 ? std::log(10000.0) / static_cast<double>(half - 1) : 0.0;
  for (std::size_t j = 0; j < half; ++j) {
    const double arg = static_cast<double>(k) * std::exp(-scale * static_cast<double>(j));
    out[j] = std::sin(arg);
    out[half + j] = std::cos(arg);
  }
  return out;
}

std::vector<double> NoisePredictor::init_params(Rng& rng) const {
  std::vector<double> p(param_count());
  std::span<double> all(p);
  main_.init_params(all.subspan(0, main_.param_count()), rng);
  step_.init_params(all.subspan(main_.param_count(), step_.param_count()), rng);
  rtg_.init_params(all.subspan(main_.param_count() + step_.param_count(), rtg_.param_count()), rng);
  return p;
}

Matrix NoisePredictor::forward(std::span<const double> params, const Matrix& xk, std::span<const std::size_t> k,
                               std::span<const double> g, std::span<const std::uint8_t> null_flag,
                               Tape* tape) const {
  const std::size_t B = xk.rows;
  if (params.size() != param_count()) throw std::invalid_argument("NoisePredictor: parameter size mismatch");
  if (xk.cols != layout_.dim() || k.size() != B || g.size() != B || null_flag.size() != B)
    throw std::invalid_argument("NoisePredictor: batch shape mismatch");
  const auto p_main = params.subspan(0, main_.param_count());
  const auto p_step = params.subspan(main_.param_count(), step_.param_count());
  const auto p_rtg = params.subspan(main_.param_count() + step_.param_count(), rtg_.param_count());

  Matrix features(B, encoding_dim_);
  for (std::size_t b = 0; b < B; ++b) {
    const auto enc = step_encoding(k[b], encoding_dim_);
    std::copy(enc.begin(), enc.end(), features.row(b).begin());
  }
  Matrix gin(B, 1), flag(B, 1);
  for (std::size_t b = 0; b < B; ++b) {
    gin(b, 0) = null_flag[b] ? 0.0 : g[b];
    flag(b, 0) = null_flag[b] ? 1.0 : 0.0;
  }
  const Matrix temb = step_.forward(p_step, features, tape ? &tape->step : nullptr);
  const Matrix gemb = rtg_.forward(p_rtg, gin, tape ? &tape->rtg : nullptr);
  const Matrix input = hconcat({&xk, &temb, &gemb, &flag});
  Matrix out = main_.forward(p_main, input, tape ? &tape->main : nullptr);
  if (output_ == OutputParam::eps) return out;
  if (tape) tape->out_scale.resize(B);
  for (std::size_t b = 0; b < B; ++b) {
    if (k[b] < 1 || k[b] >= alpha_bar_.size()) throw std::invalid_argument("NoisePredictor: step out of range");
    const double sa = std::sqrt(alpha_bar_[k[b]]), s1 = std::sqrt(1.0 - alpha_bar_[k[b]]);
    auto row = out.row(b);
    const auto x = xk.row(b);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = (x[j] - sa * row[j]) / s1;
    if (tape) tape->out_scale[b] = -sa / s1;
  }
  return out;
}

void NoisePredictor::backward(std::span<const double> params, const Tape& tape, const Matrix& d_eps,
                              std::span<double> grad) const {
  const std::size_t n_main = main_.param_count(), n_step = step_.param_count(), n_rtg = rtg_.param_count();
  Matrix d_input;
  if (output_ == OutputParam::x0) {
    Matrix d_out = d_eps;
    for (std::size_t b = 0; b < d_out.rows; ++b)
      for (double& v : d_out.row(b)) v *= tape.out_scale[b];
    main_.backward(params.subspan(0, n_main), tape.main, d_out, grad.subspan(0, n_main), &d_input);
  } else {
    main_.backward(params.subspan(0, n_main), tape.main, d_eps, grad.subspan(0, n_main), &d_input);
  }
  const Matrix d_temb = column_slice(d_input, layout_.dim(), embed_dim_);
  const Matrix d_gemb = column_slice(d_input, layout_.dim() + embed_dim_, embed_dim_);
  step_.backward(params.subspan(n_main, n_step), tape.step, d_temb, grad.subspan(n_main, n_step));
  rtg_.backward(params.subspan(n_main + n_step, n_rtg), tape.rtg, d_gemb, grad.subspan(n_main + n_step, n_rtg));
}

// --------------------------------------------------------------------- model

DiffusionWorldModel DiffusionWorldModel::create(const OfflineDataset& data, const DwmConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.T > data.episode_length()) throw ConfigError("dwm: T exceeds the dataset episode length");
  DiffusionWorldModel m;
  m.layout = {data.state_dim, data.action_dim, cfg.T};
  m.config = cfg;
  m.config.gamma = data.gamma;
  m.schedule = cosine_schedule(cfg.K);
  m.net = NoisePredictor(m.layout, cfg);
  Rng rng(derive_seed(seed, 0x44574d));
  m.params = m.net.init_params(rng);
  m.ema = EmaTracker(m.params, 1.0 - cfg.ema_decay);
  m.adam = AdamState(m.params.size(), cfg.adam);
  m.normalizer = data.normalizer;
  m.reward_scale = data.reward_scale;
  m.seed = seed;
  return m;
}

nlohmann::json dwm_config_to_json(const DwmConfig& c) {
  return {{"T", c.T},
          {"K", c.K},
          {"p_uncond", c.p_uncond},
          {"omega", c.omega},
          {"temperature", c.temperature},
          {"r_infer", c.r_infer},
          {"gamma", c.gamma},
          {"rtg_mode", to_string(c.rtg_mode)},
          {"prefix_conditioning", c.prefix_conditioning},
          {"hidden", c.hidden},
          {"activation", to_string(c.activation)},
          {"step_encoding_dim", c.step_encoding_dim},
          {"embed_dim", c.embed_dim},
          {"output", to_string(c.output)},
          {"lr", c.adam.lr},
          {"batch", c.batch},
          {"ema_decay", c.ema_decay},
          {"ema_every", c.ema_every},
          {"ema_start", c.ema_start}};
}

DwmConfig dwm_config_from_json(const nlohmann::json& j) {
  DwmConfig c;
  c.T = j.at("T").get<std::size_t>();
  c.K = j.at("K").get<std::size_t>();
  c.p_uncond = j.at("p_uncond").get<double>();
  c.omega = j.at("omega").get<double>();
  c.temperature = j.at("temperature").get<double>();
  c.r_infer = j.at("r_infer").get<double>();
  c.gamma = j.at("gamma").get<double>();
  c.rtg_mode = rtg_mode_from_string(j.at("rtg_mode").get<std::string>());
  c.prefix_conditioning = j.at("prefix_conditioning").get<bool>();
  c.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  c.activation = activation_from_string(j.at("activation").get<std::string>());
  c.step_encoding_dim = j.at("step_encoding_dim").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.output = output_param_from_string(j.at("output").get<std::string>());
  c.adam.lr = j.at("lr").get<double>();
  c.batch = j.at("batch").get<std::size_t>();
  c.ema_decay = j.at("ema_decay").get<double>();
  c.ema_every = j.at("ema_every").get<std::size_t>();
  c.ema_start = j.at("ema_start").get<std::size_t>();
  return c;
}

void save_dwm(const std::filesystem::path& path, const DiffusionWorldModel& m) {
  Checkpoint ck;
  ck.header = {{"kind", "dwm"},
               {"state_dim", m.layout.state_dim},
               {"action_dim", m.layout.action_dim},
               {"config", dwm_config_to_json(m.config)},
               {"normalizer", normalizer_to_json(m.normalizer)},
               {"reward_scale", m.reward_scale},
               {"iteration", m.iteration},
               {"param_count", m.params.size()},
               {"seed", m.seed}};
  ck.add("params", m.params);
  ck.add("ema", m.ema.shadow());
  save_checkpoint(path, ck);
}

DiffusionWorldModel load_dwm(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  const auto& h = ck.header;
  if (h.value("kind", std::string{}) != "dwm")
    throw FormatError(FormatError::Kind::malformed_header, path.string() + " is not a diffusion world model");
  try {
    DiffusionWorldModel m;
    m.config = dwm_config_from_json(h.at("config"));
    m.layout = {h.at("state_dim").get<std::size_t>(), h.at("action_dim").get<std::size_t>(), m.config.T};
    m.schedule = cosine_schedule(m.config.K);
    m.net = NoisePredictor(m.layout, m.config);
    m.params = ck.block("params");
    if (m.params.size() != m.net.param_count())
      throw FormatError(FormatError::Kind::count_mismatch, "dwm parameter count disagrees with architecture");
    m.ema = EmaTracker(ck.block("ema"), 1.0 - m.config.ema_decay);
    m.adam = AdamState(m.params.size(), m.config.adam);
    m.normalizer = normalizer_from_json(h.at("normalizer"));
    m.reward_scale = h.at("reward_scale").get<double>();
    m.iteration = h.at("iteration").get<std::uint64_t>();
    m.seed = h.at("seed").get<std::uint64_t>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::malformed_header, std::string("dwm checkpoint header: ") + e.what());
  }
}

// ------------------------------------------------------------------ training

DiffusionDraws draw_diffusion_noise(std::size_t batch, std::size_t dim, std::size_t K, double p_uncond, Rng& rng) {
  DiffusionDraws d;
  d.k.resize(batch);
  d.eps.resize(batch, dim);
  d.null_flag.resize(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    d.k[b] = 1 + rng.index(K);
    for (double& e : d.eps.row(b)) e = rng.normal();
    d.null_flag[b] = rng.bernoulli(p_uncond) ? 1 : 0;
  }
  return d;
}

Matrix noised_inputs(const Matrix& x0, const DiffusionDraws& draws, const NoiseSchedule& schedule,
                     std::size_t prefix_dim) {
  Matrix xk(x0.rows, x0.cols);
  for (std::size_t b = 0; b < x0.rows; ++b) {
    const auto row = forward_noise(x0.row(b), draws.k[b], draws.eps.row(b), schedule);
    std::copy(row.begin(), row.end(), xk.row(b).begin());
    for (std::size_t j = 0; j < prefix_dim; ++j) xk(b, j) = x0(b, j);
  }
  return xk;
}

double diffusion_loss(const NoisePredictor& net, std::span<const double> params, const Matrix& x0,
                      std::span<const double> rtg, const DiffusionDraws& draws, const NoiseSchedule& schedule,
                      std::size_t prefix_dim, std::span<double> grad) {
  const std::size_t B = x0.rows;
  const Matrix xk = noised_inputs(x0, draws, schedule, prefix_dim);
  NoisePredictor::Tape tape;
  const Matrix pred = net.forward(params, xk, draws.k, rtg, draws.null_flag, grad.empty() ? nullptr : &tape);
  double loss = 0.0;
  Matrix d_eps(B, x0.cols);
  const double inv_b = 1.0 / static_cast<double>(B);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = prefix_dim; j < x0.cols; ++j) {
      const double diff = pred(b, j) - draws.eps(b, j);
      loss += diff * diff;
      d_eps(b, j) = 2.0 * diff * inv_b;
    }
  loss *= inv_b;
  if (!grad.empty()) net.backward(params, tape, d_eps, grad);
  return loss;
}

double dwm_training_step(DiffusionWorldModel& model, const WindowBatch& batch, Rng& rng) {
  const auto& cfg = model.config;
  if (batch.layout.dim() != model.layout.dim() || batch.layout.horizon != model.layout.horizon)
    throw ConfigError("dwm_training_step: window layout does not match the model");
  const DiffusionDraws draws = draw_diffusion_noise(batch.x0.rows, model.layout.dim(), cfg.K, cfg.p_uncond, rng);
  std::vector<double> grad(model.params.size(), 0.0);
  const double loss = diffusion_loss(model.net, model.params, batch.x0, batch.rtg, draws, model.schedule,
                                     cfg.prefix_conditioning ? model.layout.prefix_dim() : 0, grad);
  if (!std::isfinite(loss)) {
    std::ostringstream msg;
    msg << "dwm training diverged at iteration " << model.iteration << ": loss=" << loss;
    double gnorm = 0.0;
    for (double g : grad) gnorm += g * g;
    msg << " grad_norm=" << std::sqrt(gnorm);
    throw NumericalError(msg.str());
  }
  model.adam.step(model.params, grad);
  ++model.iteration;
  if (model.iteration < cfg.ema_start)
    model.ema.shadow() = model.params;
  else if (model.iteration % cfg.ema_every == 0)
    model.ema.update(model.params);
  return loss;
}

// ------------------------------------------------------------------ sampling

Matrix guided_epsilon(const NoisePredictor& net, std::span<const double> params, const Matrix& xk, std::size_t k,
                      double g_eval, double omega) {
  const std::vector<double> gs(xk.rows, g_eval);
  return guided_epsilon(net, params, xk, k, gs, omega);
}

Matrix guided_epsilon(const NoisePredictor& net, std::span<const double> params, const Matrix& xk, std::size_t k,
                      std::span<const double> gs, double omega) {
  const std::size_t B = xk.rows;
  if (gs.size() != B) throw std::invalid_argument("guided_epsilon: one RTG per row required");
  const std::vector<std::size_t> ks(B, k);
  if (omega == 1.0 || omega == 0.0) {
    const std::vector<std::uint8_t> flags(B, omega == 1.0 ? 0 : 1);
    return net.forward(params, xk, ks, gs, flags);
  }
  // Both branches in one stacked forward pass: rows [0, B) conditioned, [B, 2B) null.
  Matrix stacked(2 * B, xk.cols);
  std::copy(xk.data.begin(), xk.data.end(), stacked.data.begin());
  std::copy(xk.data.begin(), xk.data.end(), stacked.data.begin() + static_cast<long>(xk.data.size()));
  std::vector<std::size_t> ks2(2 * B, k);
  std::vector<double> gs2(2 * B);
  std::copy(gs.begin(), gs.end(), gs2.begin());
  std::copy(gs.begin(), gs.end(), gs2.begin() + static_cast<long>(B));
  std::vector<std::uint8_t> flags(2 * B, 0);
  std::fill(flags.begin() + static_cast<long>(B), flags.end(), 1);
  const Matrix both = net.forward(params, stacked, ks2, gs2, flags);
  Matrix out(B, xk.cols);
  const std::size_t n = xk.data.size();
  for (std::size_t j = 0; j < n; ++j) out.data[j] = omega * both.data[j] + (1.0 - omega) * both.data[n + j];
  return out;
}

void posterior_step(std::span<double> xk, std::span<const double> eps_hat, std::size_t kp, std::size_t k,
                    const NoiseSchedule& schedule, double temperature, Rng& rng, std::span<double> x0_hat) {
  if (!(kp < k) || k > schedule.K) throw std::invalid_argument("posterior_step: requires kp < k <= K");
  if (eps_hat.size() != xk.size()) throw std::invalid_argument("posterior_step: dimension mismatch");
  const double ab_k = schedule.alpha_bar[k];
  const double ab_p = schedule.alpha_bar[kp];
  const double a_t = schedule.transition_alpha(kp, k);
  const double b_t = (kp + 1 == k) ? schedule.beta[k] : 1.0 - a_t;
  const double inv_sqrt_ab = 1.0 / std::sqrt(ab_k);
  const double sqrt_one_minus_ab = std::sqrt(1.0 - ab_k);
  const double c0 = std::sqrt(ab_p) * b_t / (1.0 - ab_k);
  const double ck = std::sqrt(a_t) * (1.0 - ab_p) / (1.0 - ab_k);
  const double var = b_t * (1.0 - ab_p) / (1.0 - ab_k);
  const double noise_std = temperature * std::sqrt(var);
  for (std::size_t j = 0; j < xk.size(); ++j) {
    const double x0 = (xk[j] - sqrt_one_minus_ab * eps_hat[j]) * inv_sqrt_ab;
    if (!x0_hat.empty()) x0_hat[j] = x0;
    const double mean = c0 * x0 + ck * xk[j];
    xk[j] = (kp == 0 || noise_std == 0.0) ? mean : mean + noise_std * rng.normal();
  }
}

SampleOptions default_sample_options(const DwmConfig& cfg, double g_eval) {
  SampleOptions o;
  o.g_eval = g_eval;
  o.omega = cfg.omega;
  o.temperature = cfg.temperature;
  o.r_infer = cfg.r_infer;
  return o;
}

namespace {

void write_prefix(Matrix& x, const Matrix& prefix) {
  for (std::size_t b = 0; b < x.rows; ++b)
    for (std::size_t j = 0; j < prefix.cols; ++j) x(b, j) = prefix(b, j);
}

void check_finite(const Matrix& x, std::size_t k) {
  for (std::size_t j = 0; j < x.data.size(); ++j)
    if (!std::isfinite(x.data[j]))
      throw NumericalError("dwm sampler produced a non-finite value at step " + std::to_string(k) + ", row " +
                           std::to_string(j / x.cols) + ", coordinate " + std::to_string(j % x.cols));
}

std::vector<double> row_rtgs(const SampleOptions& opt, std::size_t B) {
  if (opt.g_rows.empty()) {
    if (!std::isfinite(opt.g_eval)) throw ConfigError("sampler: g_eval must be finite");
    return std::vector<double>(B, opt.g_eval);
  }
  if (opt.g_rows.size() != B) throw std::invalid_argument("sampler: g_rows needs one value per row");
  for (double g : opt.g_rows)
    if (!std::isfinite(g)) throw ConfigError("sampler: g_eval must be finite");
  return opt.g_rows;
}

Matrix run_reverse(const DiffusionWorldModel& model, const Matrix& prefix, const SampleOptions& opt,
                   const std::vector<std::size_t>& steps, Rng& rng) {
  if (prefix.cols != model.layout.prefix_dim()) throw std::invalid_argument("sampler: prefix width mismatch");
  if (steps.empty() || steps.back() != model.config.K) throw std::invalid_argument("sampler: steps must end at K");
  const std::size_t B = prefix.rows, D = model.layout.dim();
  const auto gs = row_rtgs(opt, B);
  const auto params = model.sampling_params();
  Matrix x(B, D);
  for (double& v : x.data) v = rng.normal();
  write_prefix(x, prefix);
  if (opt.observer) opt.observer(steps.back(), x);
  for (std::size_t i = steps.size(); i-- > 0;) {
    const std::size_t k = steps[i];
    const std::size_t kp = i > 0 ? steps[i - 1] : 0;
    const Matrix eps = guided_epsilon(model.net, params, x, k, gs, opt.omega);
    for (std::size_t b = 0; b < B; ++b)
      posterior_step(x.row(b), eps.row(b), kp, k, model.schedule, opt.temperature, rng);
    write_prefix(x, prefix);
    check_finite(x, kp);
    if (opt.observer) opt.observer(kp, x);
  }
  return x;
}

}  // namespace

Matrix sample_windows_normalized(const DiffusionWorldModel& model, const Matrix& prefix, const SampleOptions& opt,
                                 Rng& rng) {
  const auto steps = opt.steps.empty() ? stride_steps(model.config.K, opt.r_infer) : opt.steps;
  return run_reverse(model, prefix, opt, steps, rng);
}

Matrix sample_windows_full(const DiffusionWorldModel& model, const Matrix& prefix, const SampleOptions& opt,
                           Rng& rng) {
  if (prefix.cols != model.layout.prefix_dim()) throw std::invalid_argument("sampler: prefix width mismatch");
  const std::size_t B = prefix.rows, D = model.layout.dim(), K = model.config.K;
  const auto gs = row_rtgs(opt, B);
  const auto params = model.sampling_params();
  Matrix x(B, D);
  for (double& v : x.data) v = rng.normal();
  write_prefix(x, prefix);
  if (opt.observer) opt.observer(K, x);
  for (std::size_t k = K; k >= 1; --k) {
    const Matrix eps = guided_epsilon(model.net, params, x, k, gs, opt.omega);
    for (std::size_t b = 0; b < B; ++b)
      posterior_step(x.row(b), eps.row(b), k - 1, k, model.schedule, opt.temperature, rng);
    write_prefix(x, prefix);
    check_finite(x, k - 1);
    if (opt.observer) opt.observer(k - 1, x);
  }
  return x;
}

ImaginedSeq unflatten_window(const DiffusionWorldModel& model, std::span<const double> x0, double g_eval) {
  const auto& lay = model.layout;
  ImaginedSeq seq;
  seq.state_dim = lay.state_dim;
  seq.source = ImaginationSource::dwm;
  seq.g_eval = g_eval;
  seq.rewards.resize(lay.horizon);
  seq.states.resize((lay.horizon - 1) * lay.state_dim);
  for (std::size_t h = 0; h < lay.horizon; ++h) {
    seq.rewards[h] = model.normalizer.invert_reward(x0[lay.reward_offset(h)]);
    if (h > 0) model.normalizer.invert_obs(x0.subspan(lay.state_offset(h), lay.state_dim), seq.state(h));
  }
  return seq;
}

std::vector<ImaginedSeq> sample_dwm(const DiffusionWorldModel& model, const Matrix& states, const Matrix& actions,
                                    const SampleOptions& opt, Rng& rng) {
  const auto& lay = model.layout;
  if (states.cols != lay.state_dim || actions.cols != lay.action_dim || states.rows != actions.rows)
    throw std::invalid_argument("sample_dwm: state/action shape mismatch");
  Matrix prefix(states.rows, lay.prefix_dim());
  for (std::size_t b = 0; b < states.rows; ++b) {
    model.normalizer.apply_obs(states.row(b), prefix.row(b).subspan(0, lay.state_dim));
    for (std::size_t j = 0; j < lay.action_dim; ++j) prefix(b, lay.state_dim + j) = actions(b, j);
  }
  const Matrix x0 = sample_windows_normalized(model, prefix, opt, rng);
  std::vector<ImaginedSeq> out;
  out.reserve(states.rows);
  for (std::size_t b = 0; b < states.rows; ++b)
    out.push_back(unflatten_window(model, x0.row(b), opt.g_rows.empty() ? opt.g_eval : opt.g_rows[b]));
  return out;
}

std::vector<ImaginedSeq> sample_dwm(const DiffusionWorldModel& model, const Matrix& states, const Matrix& actions,
                                    double g_eval, std::uint64_t seed) {
  Rng rng(seed);
  return sample_dwm(model, states, actions, default_sample_options(model.config, g_eval), rng);
}

}  // namespace dwmlab
