#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dwmlab/dataset.hpp"
#include "dwmlab/imagined.hpp"
#include "dwmlab/matrix.hpp"
#include "dwmlab/mlp.hpp"
#include "dwmlab/optim.hpp"
#include "dwmlab/rng.hpp"

namespace dwmlab {

// ------------------------------------------------------------------ schedule

/// Variance schedule over K diffusion steps. Index 0 is the clean data:
/// alpha_bar[0] = 1, beta[0] = sigma[0] = 0.
struct NoiseSchedule {
  std::size_t K = 0;
  std::vector<double> beta;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;  // posterior std for the adjacent step k -> k-1

  /// alpha_bar[k] / alpha_bar[kp]; for adjacent steps this is exactly 1 - beta[k].
  double transition_alpha(std::size_t kp, std::size_t k) const;
};

/// Cosine schedule: alpha_bar from f(k) = cos^2(((k/K + s) / (1 + s)) * pi/2),
/// beta clipped at 0.999, alpha_bar recomputed from the clipped betas.
NoiseSchedule cosine_schedule(std::size_t K, double s = 0.008);

/// x^k = sqrt(alpha_bar_k) x0 + sqrt(1 - alpha_bar_k) eps, for 1 <= k <= K.
std::vector<double> forward_noise(std::span<const double> x0, std::size_t k, std::span<const double> eps,
                                  const NoiseSchedule& schedule);

/// N = ceil(r_infer * K) steps, equally spaced in [1, K], rounded and
/// deduplicated, ascending, always ending at K.
std::vector<std::size_t> stride_steps(std::size_t K, double r_infer);

// -------------------------------------------------------------------- config

/// What the network's last layer emits. Both are read out as a noise
/// prediction; x0 converts its output with eps = (x^k - sqrt(ab_k) out) / sqrt(1 - ab_k).
enum class OutputParam { eps, x0 };

OutputParam output_param_from_string(const std::string& s);
std::string to_string(OutputParam p);

struct DwmConfig {
  std::size_t T = 8;
  std::size_t K = 5;
  double p_uncond = 0.25;
  double omega = 1.0;
  double temperature = 0.5;
  double r_infer = 0.5;
  double gamma = 0.99;
  RtgMode rtg_mode = RtgMode::episode;
  /// Overwrite the (s_t, a_t) prefix of x^k with clean values during training,
  /// matching what the sampler feeds the network.
  bool prefix_conditioning = true;

  std::vector<std::size_t> hidden = {256, 256, 256};
  Activation activation = Activation::mish;
  std::size_t step_encoding_dim = 16;
  std::size_t embed_dim = 32;
  OutputParam output = OutputParam::x0;

  AdamConfig adam{1e-3, 0.9, 0.999, 1e-8};
  std::size_t batch = 64;
  double ema_decay = 0.995;
  std::size_t ema_every = 10;
  /// The shadow copies the live weights until this many iterations have run.
  std::size_t ema_start = 1000;

  /// Throws ConfigError when a field is out of range.
  void validate() const;
};

// ----------------------------------------------------------- noise predictor

/// eps_theta(x^k, k, y): a main MLP over [x^k | step embedding | RTG embedding | null flag].
/// The step embedding is a sinusoidal encoding followed by a 2-layer MLP; the
/// RTG embedding is a 2-layer MLP of g. The null condition is (g = 0, flag = 1).
class NoisePredictor {
 public:
  NoisePredictor() = default;
  NoisePredictor(WindowLayout layout, const DwmConfig& cfg);

  struct Tape {
    MlpTape main, step, rtg;
    Matrix step_features;
    std::vector<double> out_scale;  // d eps / d out per row
  };

  std::size_t param_count() const { return main_.param_count() + step_.param_count() + rtg_.param_count(); }
  std::vector<double> init_params(Rng& rng) const;
  const WindowLayout& layout() const { return layout_; }
  std::size_t flag_column() const { return layout_.dim() + 2 * embed_dim_; }
  /// Offset in the flat parameter vector of the main network's first-layer weight row fed by the flag.
  std::size_t flag_weight_offset() const { return flag_column() * main_.arch().sizes[1]; }
  std::size_t first_hidden_width() const { return main_.arch().sizes[1]; }

  Matrix forward(std::span<const double> params, const Matrix& xk, std::span<const std::size_t> k,
                 std::span<const double> g, std::span<const std::uint8_t> null_flag, Tape* tape = nullptr) const;
  void backward(std::span<const double> params, const Tape& tape, const Matrix& d_eps, std::span<double> grad) const;

  void set_exec(kernels::Exec e);

  static std::vector<double> step_encoding(std::size_t k, std::size_t dim);

 private:
  WindowLayout layout_;
  std::size_t embed_dim_ = 0;
  std::size_t encoding_dim_ = 0;
  OutputParam output_ = OutputParam::eps;
  std::vector<double> alpha_bar_;
  Mlp main_, step_, rtg_;
};

// --------------------------------------------------------------------- model

struct DiffusionWorldModel {
  WindowLayout layout;
  DwmConfig config;
  NoiseSchedule schedule;
  NoisePredictor net;
  std::vector<double> params;
  EmaTracker ema;
  AdamState adam;
  Normalizer normalizer;
  double reward_scale = 1.0;
  std::uint64_t iteration = 0;
  std::uint64_t seed = 0;

  /// Fresh model sized for the dataset's state/action dims.
  static DiffusionWorldModel create(const OfflineDataset& data, const DwmConfig& cfg, std::uint64_t seed);

  /// Parameters used for sampling (the EMA shadow).
  std::span<const double> sampling_params() const { return ema.shadow(); }
};

nlohmann::json dwm_config_to_json(const DwmConfig& c);
DwmConfig dwm_config_from_json(const nlohmann::json& j);

void save_dwm(const std::filesystem::path& path, const DiffusionWorldModel& model);
DiffusionWorldModel load_dwm(const std::filesystem::path& path);

// ------------------------------------------------------------------ training

/// Random draws of one training step: step k, noise eps and null flag b per window.
struct DiffusionDraws {
  std::vector<std::size_t> k;
  Matrix eps;
  std::vector<std::uint8_t> null_flag;
};

DiffusionDraws draw_diffusion_noise(std::size_t batch, std::size_t dim, std::size_t K, double p_uncond, Rng& rng);

/// Noised inputs x^k for each row; with prefix_dim > 0 the first prefix_dim
/// coordinates are replaced by the clean values of x0.
Matrix noised_inputs(const Matrix& x0, const DiffusionDraws& draws, const NoiseSchedule& schedule,
                     std::size_t prefix_dim);

/// mean_b || eps_theta(x^k, k, b ? null : g) - eps ||^2 over the coordinates
/// after the first prefix_dim; accumulates the parameter gradient into grad
/// when it is non-empty.
double diffusion_loss(const NoisePredictor& net, std::span<const double> params, const Matrix& x0,
                      std::span<const double> rtg, const DiffusionDraws& draws, const NoiseSchedule& schedule,
                      std::size_t prefix_dim, std::span<double> grad);

/// One optimizer step on a window batch; refreshes the EMA every ema_every
/// iterations, or copies the live weights before ema_start.
/// Raises NumericalError on a non-finite loss.
double dwm_training_step(DiffusionWorldModel& model, const WindowBatch& batch, Rng& rng);

// ------------------------------------------------------------------ sampling

/// omega * eps(x, k, g) + (1 - omega) * eps(x, k, null), for every row.
Matrix guided_epsilon(const NoisePredictor& net, std::span<const double> params, const Matrix& xk, std::size_t k,
                      double g_eval, double omega);
/// Same with one conditioning RTG per row.
Matrix guided_epsilon(const NoisePredictor& net, std::span<const double> params, const Matrix& xk, std::size_t k,
                      std::span<const double> g_rows, double omega);

/// Estimate x0 from x^k and eps_hat, then move to step kp < k using the
/// posterior q(x^kp | x^k, x0_hat) with variance scaled by temperature^2.
/// At kp = 0 the mean is returned without noise. When x0_hat is non-empty
/// it receives the estimate.
void posterior_step(std::span<double> xk, std::span<const double> eps_hat, std::size_t kp, std::size_t k,
                    const NoiseSchedule& schedule, double temperature, Rng& rng, std::span<double> x0_hat = {});

struct SampleOptions {
  double g_eval = 0.8;
  /// Per-row conditioning RTGs; when non-empty they replace g_eval.
  std::vector<double> g_rows;
  double omega = 1.0;
  double temperature = 0.5;
  /// Ascending denoising steps ending at K; empty means stride_steps(K, r_infer).
  std::vector<std::size_t> steps;
  double r_infer = 0.5;
  /// Called with (k, x^k) after every conditioning overwrite, including the initial one.
  std::function<void(std::size_t, const Matrix&)> observer;
};

SampleOptions default_sample_options(const DwmConfig& cfg, double g_eval);

/// Reverse process from x^K ~ N(0, I) over the given step list with the
/// prefix rows of `prefix` (normalized s_t, a_t) written in after every step.
/// Returns normalized x^0 (batch x window dim).
Matrix sample_windows_normalized(const DiffusionWorldModel& model, const Matrix& prefix, const SampleOptions& opt,
                                 Rng& rng);

/// The full K-step reverse process, one adjacent step at a time.
Matrix sample_windows_full(const DiffusionWorldModel& model, const Matrix& prefix, const SampleOptions& opt, Rng& rng);

/// Raw-unit imagination for raw states (batch x d_s) and actions (batch x d_a).
std::vector<ImaginedSeq> sample_dwm(const DiffusionWorldModel& model, const Matrix& states, const Matrix& actions,
                                    const SampleOptions& opt, Rng& rng);

/// Seeded convenience form.
std::vector<ImaginedSeq> sample_dwm(const DiffusionWorldModel& model, const Matrix& states, const Matrix& actions,
                                    double g_eval, std::uint64_t seed);

/// Unflatten a normalized window into raw rewards and states.
ImaginedSeq unflatten_window(const DiffusionWorldModel& model, std::span<const double> x0, double g_eval);

}  // namespace dwmlab
