// Acceptance run: prints one PASS/FAIL line per criterion, plus INFO lines.
// Exit status is the number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "dwmlab/agents.hpp"
#include "dwmlab/checkpoint.hpp"
#include "dwmlab/cli.hpp"
#include "dwmlab/diffusion.hpp"
#include "dwmlab/harness.hpp"
#include "dwmlab/log.hpp"
#include "dwmlab/onestep.hpp"
#include "dwmlab/value_targets.hpp"
#include "testing.hpp"

using namespace dwmlab;
namespace fs = std::filesystem;
using testing::grad_check;
using testing::random_vector;

namespace {

int failures = 0;

void report(int id, bool pass, const std::string& detail) {
  std::cout << (pass ? "PASS" : "FAIL") << " criterion " << id << ": " << detail << std::endl;
  if (!pass) ++failures;
}

void info(const std::string& s) { std::cout << "INFO " << s << std::endl; }

/// Collects the worst deviation of a group of oracle comparisons.
struct Tally {
  double worst = 0.0;
  bool ok = true;
  std::vector<std::string> failed;
  void close(const std::string& what, double err, double tol) {
    worst = std::max(worst, err);
    if (!(err <= tol)) {
      ok = false;
      failed.push_back(fmt::format("{} ({:.3g})", what, err));
    }
  }
  void require(const std::string& what, bool cond) {
    if (!cond) {
      ok = false;
      failed.push_back(what);
    }
  }
  std::string summary() const {
    if (ok) return fmt::format("max deviation {:.3g}", worst);
    std::string s = "failed:";
    for (const auto& f : failed) s += " " + f;
    return s;
  }
};

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1, double hi = 1) {
  Matrix m(r, c);
  for (double& v : m.data) v = rng.uniform(lo, hi);
  return m;
}

ImaginedSeq random_seq(std::size_t T, std::size_t ds, Rng& rng) {
  ImaginedSeq s;
  s.state_dim = ds;
  s.rewards = random_vector(T, rng, 0, 1);
  s.states = random_vector((T - 1) * ds, rng, -2, 2);
  return s;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += fmt::format("{}{:.4g}", s.empty() ? "" : " ", x);
  return s;
}

// ---------------------------------------------------------------- 1

void criterion_equation_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  Tally t;
  Rng rng(101);
  const double tol = 1e-10;
  for (int i = 0; i < 20; ++i) {
    const auto r = random_vector(12, rng, 0, 1);
    const double gamma = rng.uniform(0.5, 0.999), scale = rng.uniform(0.5, 20);
    const std::size_t t_ = rng.index(12);
    double g = 0;
    for (std::size_t k = t_; k < 12; ++k) g += std::pow(gamma, static_cast<double>(k - t_)) * r[k];
    t.close("compute_rtg", std::abs(compute_rtg(r, t_, gamma, scale) - g / scale), tol);

    const double u = rng.uniform(-3, 3), tau = rng.uniform();
    t.close("expectile_loss", std::abs(expectile_loss(u, tau) - std::abs(tau - (u < 0 ? 1.0 : 0.0)) * u * u), tol);

    const auto seq = random_seq(8, 3, rng);
    const std::size_t H = 1 + rng.index(7);
    const auto boot = random_vector(H, rng, -1, 10);
    double mve = 0;
    for (std::size_t h = 0; h < H; ++h) mve += std::pow(gamma, static_cast<double>(h)) * seq.rewards[h];
    mve += std::pow(gamma, static_cast<double>(H)) * boot[H - 1];
    t.close("diff_mve_target", std::abs(diff_mve_target(seq, H, gamma, boot[H - 1]) - mve), tol);

    const double lambda = rng.uniform();
    auto G = [&](std::size_t n) {
      double y = 0;
      for (std::size_t h = 0; h < n; ++h) y += std::pow(gamma, static_cast<double>(h)) * seq.rewards[h];
      return y + std::pow(gamma, static_cast<double>(n)) * boot[n - 1];
    };
    double lam = std::pow(lambda, static_cast<double>(H - 1)) * G(H);
    for (std::size_t n = 1; n < H; ++n) lam += (1 - lambda) * std::pow(lambda, static_cast<double>(n - 1)) * G(n);
    t.close("lambda_return_target", std::abs(lambda_return_target(seq, H, gamma, lambda, boot) - lam), tol);

    std::vector<ImaginedSeq> seqs;
    const std::size_t m = 2 + rng.index(4);
    for (std::size_t j = 0; j < m; ++j) seqs.push_back(random_seq(8, 3, rng));
    const double kappa = rng.uniform();
    const auto pr = pql_rewards(seqs, kappa);
    for (std::size_t s = 0; s < pr.size(); ++s) {
      double mean = 0, worst = 0;
      for (const auto& a : seqs) mean += a.rewards[s] / static_cast<double>(m);
      for (const auto& a : seqs)
        for (const auto& b : seqs) {
          double d = (a.rewards[s] - b.rewards[s]) * (a.rewards[s] - b.rewards[s]);
          for (std::size_t k = 0; k < 3; ++k)
            d += (a.state(s + 1)[k] - b.state(s + 1)[k]) * (a.state(s + 1)[k] - b.state(s + 1)[k]);
          worst = std::max(worst, d);
        }
      t.close("pql_rewards", std::abs(pr[s] - (mean - kappa * worst)), tol);
    }

    const double rr = rng.uniform(), gn = rng.uniform(0, 50), vn = rng.uniform(-10, 60);
    t.close("rtg_relabel", std::abs(rtg_relabel(0.0, rr, gn, vn, gamma) - (rr + gamma * (gn > vn ? gn : vn))), tol);

    const auto sched = cosine_schedule(5);
    const auto x0 = random_vector(7, rng), eps = random_vector(7, rng, -2, 2);
    const std::size_t k = 1 + rng.index(5);
    auto xk = forward_noise(x0, k, eps, sched);
    std::vector<double> x0_hat(7);
    Rng r0(0);
    posterior_step(xk, eps, 0, k, sched, 0.5, r0, x0_hat);
    for (int j = 0; j < 7; ++j) t.close("posterior x0 inversion", std::abs(x0_hat[j] - x0[j]), tol);

    const auto init = random_vector(10, rng), live = random_vector(10, rng);
    const double w = rng.uniform();
    EmaTracker ema(init, w);
    ema.update(live);
    for (int j = 0; j < 10; ++j) t.close("ema", std::abs(ema.shadow()[j] - (w * live[j] + (1 - w) * init[j])), tol);
  }
  const double secs = seconds_since(t0);
  t.require("runtime under 10 s", secs < 10);
  report(1, t.ok, fmt::format("20 instances each, {}; {:.2f} s", t.summary(), secs));
}

// ---------------------------------------------------------------- 2

void criterion_reductions(const OfflineDataset& data) {
  Tally t;
  Rng rng(202);
  for (int i = 0; i < 20; ++i) {
    const auto seq = random_seq(8, 2, rng);
    const std::size_t H = 1 + rng.index(7);
    const auto boot = random_vector(H, rng, -1, 10);
    t.close("lambda=1 vs diff-mve",
            std::abs(lambda_return_target(seq, H, 0.99, 1.0, boot) - diff_mve_target(seq, H, 0.99, boot[H - 1])), 1e-12);
    std::vector<ImaginedSeq> seqs;
    for (int j = 0; j < 3; ++j) seqs.push_back(random_seq(8, 2, rng));
    const auto pr = pql_rewards(seqs, 0.0);
    for (std::size_t s = 0; s < pr.size(); ++s) {
      const double mean = (seqs[0].rewards[s] + seqs[1].rewards[s] + seqs[2].rewards[s]) / 3;
      t.close("kappa=0 pql", std::abs(pr[s] - mean), 1e-15);
    }
  }

  DwmConfig c;
  c.hidden = {64, 64};
  auto model = DiffusionWorldModel::create(data, c, 1);
  const auto params = model.net.init_params(rng);
  model.ema.shadow() = params;
  const std::size_t B = 6, dim = model.layout.dim();
  Matrix xk(B, dim);
  for (double& v : xk.data) v = rng.normal();
  const std::vector<std::size_t> ks(B, 3);
  const std::vector<double> gs(B, 0.7);
  const Matrix cond = model.net.forward(params, xk, ks, gs, std::vector<std::uint8_t>(B, 0));
  const Matrix uncond = model.net.forward(params, xk, ks, gs, std::vector<std::uint8_t>(B, 1));
  t.require("omega=1 is the conditional branch", guided_epsilon(model.net, params, xk, 3, 0.7, 1.0) == cond);
  t.require("omega=0 is the unconditional branch", guided_epsilon(model.net, params, xk, 3, 0.7, 0.0) == uncond);

  Matrix prefix(20, model.layout.prefix_dim());
  for (double& v : prefix.data) v = rng.uniform(-1, 1);
  SampleOptions opt = default_sample_options(model.config, 0.6);
  opt.r_infer = 1.0;
  Rng a(99), b(99);
  t.require("r_infer=1 stride == full sampler",
            sample_windows_normalized(model, prefix, opt, a) == sample_windows_full(model, prefix, opt, b));
  report(2, t.ok, t.summary());
}

// ---------------------------------------------------------------- 3

void criterion_inpainting(const OfflineDataset& data) {
  DwmConfig c;
  c.hidden = {64, 64};
  auto model = DiffusionWorldModel::create(data, c, 3);
  Rng rng(303);
  model.ema.shadow() = model.net.init_params(rng);
  Matrix prefix(1000, model.layout.prefix_dim());
  for (double& v : prefix.data) v = rng.uniform(-2, 2);
  bool fixed = true;
  std::size_t steps = 0;
  for (double r : {0.2, 0.5, 1.0}) {
    SampleOptions opt = default_sample_options(model.config, 0.8);
    opt.r_infer = r;
    opt.observer = [&](std::size_t, const Matrix& x) {
      ++steps;
      for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < prefix.cols; ++j) fixed = fixed && x(i, j) == prefix(i, j);
    };
    const Matrix out = sample_windows_normalized(model, prefix, opt, rng);
    for (std::size_t i = 0; i < out.rows; ++i)
      for (std::size_t j = 0; j < prefix.cols; ++j) fixed = fixed && out(i, j) == prefix(i, j);
  }
  report(3, fixed, fmt::format("1000 sequences at r_infer 0.2/0.5/1.0, {} denoising snapshots inspected", steps));
}

// ---------------------------------------------------------------- 4

void criterion_gradients(const OfflineDataset& data) {
  Tally t;
  Rng rng(404);
  const double tol = 1e-4;
  const WindowLayout lay{4, 2, 4};
  for (OutputParam out : {OutputParam::eps, OutputParam::x0}) {
    DwmConfig c;
    c.hidden = {24, 24};
    c.step_encoding_dim = 8;
    c.embed_dim = 8;
    c.output = out;
    NoisePredictor net(lay, c);
    const auto sched = cosine_schedule(5);
    for (int p = 0; p < 10; ++p) {
      const auto params = net.init_params(rng);
      Matrix x0(6, lay.dim());
      for (double& v : x0.data) v = rng.normal();
      const auto g = random_vector(6, rng, 0, 1.2);
      const auto d = draw_diffusion_noise(6, lay.dim(), 5, 0.3, rng);
      std::vector<double> grad(params.size(), 0.0);
      diffusion_loss(net, params, x0, g, d, sched, lay.prefix_dim(), grad);
      t.close("diffusion loss " + to_string(out),
              grad_check([&](std::span<const double> q) { return diffusion_loss(net, q, x0, g, d, sched, lay.prefix_dim(), {}); },
                         params, grad, 80, rng),
              tol);
    }
  }

  OneStepConfig oc;
  oc.hidden = {32, 32};
  auto os = OneStepModel::create(data, oc, 2);
  for (int p = 0; p < 10; ++p) {
    std::vector<double> params(os.params.size());
    os.mean_net.init_params(std::span<double>(params).subspan(0, os.mean_net.param_count()), rng);
    os.var_net.init_params(std::span<double>(params).subspan(os.mean_net.param_count()), rng);
    const auto batch = sample_transitions(data, 8, rng);
    std::vector<double> grad(params.size(), 0.0);
    onestep_nll_loss(os, params, batch, grad);
    t.close("gaussian nll",
            grad_check([&](std::span<const double> q) { return onestep_nll_loss(os, q, batch, {}); }, params, grad, 80,
                       rng),
            tol);
  }

  AgentConfig ac;
  ac.hidden = {16, 16};
  ac.algorithm = Algorithm::iql;
  const auto st = ActorCriticState::create(ac, 4, 2, 3);
  ac.algorithm = Algorithm::td3bc;
  const auto st_td3 = ActorCriticState::create(ac, 4, 2, 4);
  auto jitter = [&](std::vector<double> p) {
    for (double& v : p) v += 0.3 * rng.normal();
    return p;
  };
  for (int p = 0; p < 10; ++p) {
    const Matrix s = random_matrix(8, 4, rng), a = random_matrix(8, 2, rng);
    const auto y = random_vector(8, rng, -2, 2);
    auto check = [&](const std::string& name, std::vector<double> params,
                     const std::function<double(std::span<const double>, std::span<double>)>& loss) {
      std::vector<double> grad(params.size(), 0.0);
      loss(params, grad);
      t.close(name, grad_check([&](std::span<const double> q) { return loss(q, {}); }, params, grad, 60, rng, 1e-5), tol);
    };
    check("critic mse", jitter(st.critic1),
          [&](std::span<const double> q, std::span<double> g) { return critic_mse_loss(st, q, s, a, y, g); });
    check("expectile", jitter(st.value),
          [&](std::span<const double> q, std::span<double> g) { return expectile_value_loss(st, q, s, y, 0.7, g); });
    const auto w = random_vector(8, rng, 0, 3);
    auto actor = jitter(st.actor);
    actor[actor.size() - 2] = rng.uniform(-1, 1);
    actor[actor.size() - 1] = rng.uniform(-1, 1);
    check("awr", actor,
          [&](std::span<const double> q, std::span<double> g) { return awr_actor_loss(st, q, s, a, w, ac.iql, g); });
    const double lt = rng.uniform(0, 2);
    check("td3+bc actor", jitter(st_td3.actor), [&](std::span<const double> q, std::span<double> g) {
      return td3bc_actor_loss(st_td3, q, st_td3.critic1, s, a, lt, g);
    });
  }
  report(4, t.ok, fmt::format("10 points per loss, rel tol 1e-4, {}", t.summary()));
}

// ------------------------------------------------------------ 5 and 7

/// Conditional-mean predictor under the true simulator and the behavior
/// policy, by Monte Carlo. Its error estimates the irreducible floor for any
/// model that sees only (s_t, a_t).
PredErrorReport noise_floor(const OfflineDataset& data, std::size_t T, std::size_t windows, std::uint64_t seed) {
  const auto spec = env_spec(data.env);
  Rng rng(seed);
  const auto tw = sample_truth_windows(data, T, windows, rng);
  WindowPredictor mc = [&](const TruthWindows& w, Rng& r) {
    std::vector<ImaginedSeq> out(w.truth.size());
    const std::size_t n = 64;
    for (std::size_t i = 0; i < out.size(); ++i) {
      auto& seq = out[i];
      seq.state_dim = data.state_dim;
      seq.rewards.assign(T - 1, 0.0);
      seq.states.assign((T - 1) * data.state_dim, 0.0);
      for (std::size_t rep = 0; rep < n; ++rep) {
        ScriptedPolicy pol(spec, policy_level_from_string(data.tier), r.next_u64());
        EnvState s;
        s.x.assign(w.states.row(i).begin(), w.states.row(i).end());
        s.step = w.start[i];
        std::vector<double> a(w.actions.row(i).begin(), w.actions.row(i).end());
        for (std::size_t h = 1; h < T; ++h) {
          const auto step = env_step(spec, s, a);
          seq.rewards[h - 1] += step.reward / n;
          for (std::size_t j = 0; j < data.state_dim; ++j) seq.state(h)[j] += step.next.x[j] / n;
          s = step.next;
          pol.act(s.x, a);
        }
      }
    }
    return out;
  };
  return prediction_error(tw, mc, data.normalizer, rng);
}

struct Models {
  DiffusionWorldModel dwm;
  OneStepModel onestep;
};

void criterion_compounding(const OfflineDataset& data, const Models& m) {
  std::vector<PredErrorReport> os_reps, dwm_reps;
  const SampleOptions opt = default_sample_options(m.dwm.config, 0.0);
  for (std::uint64_t s : {0u, 1u, 2u}) {
    os_reps.push_back(wm_prediction_error(m.onestep, data, 8, 200, 5000 + s));
    dwm_reps.push_back(wm_prediction_error(m.dwm, data, std::nullopt, 8, 200, 5000 + s, opt));
  }
  const auto os = merge_reports(os_reps), dw = merge_reports(dwm_reps);
  const double os_ratio = os.state_mse_median.back() / os.state_mse_median.front();
  const double dw_ratio = dw.state_mse_median.back() / dw.state_mse_median.front();
  info("one-step median state mse by step: " + join(os.state_mse_median));
  info("dwm median state mse by step: " + join(dw.state_mse_median));
  info("dwm mean state mse by step: " + join(dw.state_mse));
  const auto floor = noise_floor(data, 8, 200, 5000);
  info("behavior-policy noise floor, median state mse by step: " + join(floor.state_mse_median));
  info("behavior-policy noise floor, mean state mse by step: " + join(floor.state_mse));
  report(5, os_ratio >= 3.0 && dw_ratio <= 1.5,
         fmt::format("one-step step7/step1 = {:.3g} (need >= 3), dwm step7/step1 = {:.3g} (need <= 1.5)", os_ratio,
                     dw_ratio));
}

void criterion_inference_ratio(const OfflineDataset& data, const Models& m) {
  std::map<double, double> err;
  std::map<double, double> rew;
  for (double r : {0.2, 0.5, 1.0}) {
    SampleOptions opt = default_sample_options(m.dwm.config, 0.0);
    opt.r_infer = r;
    std::vector<PredErrorReport> reps;
    for (std::uint64_t s : {0u, 1u, 2u})
      reps.push_back(wm_prediction_error(m.dwm, data, std::nullopt, 8, 200, 7000 + s, opt));
    const auto merged = merge_reports(reps);
    err[r] = merged.avg_state_mse;
    rew[r] = merged.avg_reward_mse;
    info(fmt::format("r_infer {} (N={}): state mse {:.4g}, reward mse {:.4g}", r, stride_steps(5, r).size(), err[r],
                     rew[r]));
  }
  const double ratio = err[0.2] / err[0.5];
  const double gap = std::abs(err[0.5] - err[1.0]) / err[1.0];
  report(7, ratio >= 2.0 && gap <= 0.2,
         fmt::format("err(0.2)/err(0.5) = {:.3g} (need >= 2), |err(0.5)-err(1.0)|/err(1.0) = {:.3g} (need <= 0.2)",
                     ratio, gap));

  // conditioning beyond the data
  const auto dec = rtg_deciles(data);
  for (double g : {dec[5], dec.back(), 1.5 * dec.back()}) {
    SampleOptions opt = default_sample_options(m.dwm.config, g);
    const auto rep = wm_prediction_error(m.dwm, data, g, 8, 200, 7100, opt);
    info(fmt::format("fixed g_eval {:.3f}: state mse {:.4g}, reward mse {:.4g}", g, rep.avg_state_mse,
                     rep.avg_reward_mse));
  }
}

// ------------------------------------------------------------ 6 and 8

void criterion_agents(const OfflineDataset& data, const Models& m, std::size_t iterations) {
  const auto spec = env_spec(data.env);
  const auto anchors = compute_anchors(spec, 100, 20240);
  std::vector<double> behavior;
  for (const auto& tr : data.trajectories) {
    double R = 0;
    for (double r : tr.rewards) R += r;
    behavior.push_back(normalize_return(R, anchors));
  }
  const double behavior_norm = mean_of(behavior);
  info(fmt::format("anchors random {:.3f} expert {:.3f}; behavior normalized return {:.4f}", anchors.random,
                   anchors.expert, behavior_norm));

  auto train = [&](Algorithm alg, ModelSource src, std::size_t H) {
    std::vector<double> out;
    for (std::uint64_t seed : {0u, 1u, 2u}) {
      AgentConfig cfg;
      cfg.algorithm = alg;
      cfg.source = src;
      cfg.H = H;
      cfg.iterations = iterations;
      cfg.eval_every = iterations;
      ImaginationSourceSet set{src, &m.dwm, &m.onestep, nullptr};
      const auto t0 = std::chrono::steady_clock::now();
      const auto res = train_offline_agent(data, spec, cfg, set, anchors, seed);
      out.push_back(res.final_eval.normalized_mean);
      info(fmt::format("{} {} H={} seed {}: normalized return {:.4f} ({:.0f} s)", to_string(alg), to_string(src), H,
                       seed, out.back(), seconds_since(t0)));
    }
    return out;
  };
  const auto o1 = train(Algorithm::td3bc, ModelSource::onestep, 1);
  const auto o7 = train(Algorithm::td3bc, ModelSource::onestep, 7);
  const auto d1 = train(Algorithm::td3bc, ModelSource::dwm, 1);
  const auto d7 = train(Algorithm::td3bc, ModelSource::dwm, 7);
  const auto i7 = train(Algorithm::iql, ModelSource::dwm, 7);

  const double mo1 = median3(o1), mo7 = median3(o7), md1 = median3(d1), md7 = median3(d7);
  report(6, mo7 < mo1 && md7 >= 0.8 * md1,
         fmt::format("O-TD3BC median H=7 {:.4f} vs H=1 {:.4f} (need lower); DWM-TD3BC median H=7 {:.4f} vs 0.8 x H=1 "
                     "{:.4f}",
                     mo7, mo1, md7, 0.8 * md1));
  const double td3 = mean_of(d7), iql = mean_of(i7);
  report(8, td3 >= behavior_norm && iql >= behavior_norm,
         fmt::format("DWM-TD3BC (H=7) mean {:.4f}, DWM-IQL (H=7) mean {:.4f}, behavior {:.4f}", td3, iql,
                     behavior_norm));
}

// ---------------------------------------------------------------- 9

void criterion_determinism() {
  const auto a = testing::scratch_dir("accept_det_a"), b = testing::scratch_dir("accept_det_b");
  const std::vector<std::vector<std::string>> steps = {
      {"gen-data"},
      {"train-wm", "dwm"},
      {"train-wm", "onestep"},
      {"eval-wm"},
      {"--override", "eval_wm.model=onestep", "eval-wm"},
      {"train-agent"},
      {"eval-agent"},
      {"--override", "agent.iterations=20", "--override", "agent.eval_every=20", "sweep-horizon"},
      {"--override", "agent.iterations=20", "--override", "agent.eval_every=20", "sweep-rtg"},
      {"report"},
  };
  const std::vector<std::string> common = {
      "--log-level", "off", "--seed", "9", "--override", "data.episodes=8", "--override", "dwm.iterations=100",
      "--override", "dwm.hidden=[32,32]", "--override", "dwm.log_every=50", "--override", "onestep.iterations=100",
      "--override", "onestep.log_every=50", "--override", "eval_wm.windows=20", "--override", "agent.H=3",
      "--override", "agent.iterations=40", "--override", "agent.eval_every=20", "--override", "agent.hidden=[16]",
      "--override", "agent.batch=16", "--override", "agent.eval_episodes=2", "--override", "eval.episodes=2",
      "--override", "eval.anchor_episodes=4", "--override", "sweep.horizons=[1,3]", "--override", "sweep.seeds=[0]",
      "--override", "sweep.g_evals=[0.6,0.9]", "--override", "sweep.pred_windows=10"};
  bool ok = true;
  std::string detail;
  for (const auto& dir : {a, b}) {
    for (const auto& step : steps) {
      std::vector<std::string> args = {"--out-dir", dir.string()};
      args.insert(args.end(), common.begin(), common.end());
      args.insert(args.end(), step.begin(), step.end());
      std::ostringstream out, err;
      const int code = run_cli(args, out, err);
      if (code != kExitOk) {
        ok = false;
        detail = "command " + step.back() + " exited with " + std::to_string(code) + ": " + err.str();
      }
    }
  }
  std::size_t compared = 0, skipped = 0;
  std::vector<std::string> differing;
  for (const auto& e : fs::directory_iterator(a)) {
    const auto name = e.path().filename().string();
    if (name.find("timing") != std::string::npos) {
      ++skipped;
      continue;
    }
    ++compared;
    if (!fs::exists(b / name) || io::read_file(e.path()) != io::read_file(b / name)) differing.push_back(name);
  }
  if (!differing.empty()) {
    ok = false;
    detail += " differing:";
    for (const auto& d : differing) detail += " " + d;
  }
  report(9, ok && compared > 0,
         fmt::format("{} artifacts byte-identical across two runs of {} commands ({} wall-clock timing files "
                     "excluded){}",
                     compared - differing.size(), steps.size(), skipped, detail.empty() ? "" : ";" + detail));
}

}  // namespace

int main(int argc, char** argv) {
  std::size_t agent_iterations = 5000, dwm_iterations = 20000, onestep_iterations = 10000;
  bool quick = false;
  for (int i = 1; i < argc; ++i)
    if (std::string(argv[i]) == "--quick") quick = true;
  if (quick) {
    agent_iterations = 200;
    dwm_iterations = 500;
    onestep_iterations = 500;
  }
  log::set_level(log::Level::warn);
  const auto t0 = std::chrono::steady_clock::now();

  const OfflineDataset small = generate_dataset(pointmass_spec(), "medium", 20, 0.99, 77);
  criterion_equation_oracles();
  criterion_reductions(small);
  criterion_inpainting(small);
  criterion_gradients(small);

  const OfflineDataset data = generate_dataset(pointmass_spec(), "medium", 100, 0.99, 0);
  const auto tm = std::chrono::steady_clock::now();
  Models m{DiffusionWorldModel::create(data, DwmConfig{}, derive_seed(0, 10)),
           OneStepModel::create(data, OneStepConfig{}, derive_seed(0, 20))};
  Rng dwm_rng(derive_seed(0, 11)), os_rng(derive_seed(0, 21));
  train_dwm(m.dwm, data, dwm_iterations, dwm_rng);
  train_onestep(m.onestep, data, onestep_iterations, os_rng);
  info(fmt::format("world models trained ({} / {} iterations) in {:.0f} s", dwm_iterations, onestep_iterations,
                   seconds_since(tm)));

  const auto t5 = std::chrono::steady_clock::now();
  criterion_compounding(data, m);
  info(fmt::format("criterion 5 evaluation took {:.0f} s", seconds_since(t5)));
  const auto t6 = std::chrono::steady_clock::now();
  criterion_inference_ratio(data, m);
  criterion_agents(data, m, agent_iterations);
  info(fmt::format("criteria 6-8 took {:.0f} s", seconds_since(t6)));
  criterion_determinism();
  info(fmt::format("total {:.0f} s, {} failed", seconds_since(t0), failures));
  return failures;
}
