#include "dwmlab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "dwmlab/checkpoint.hpp"
#include "dwmlab/errors.hpp"
#include "dwmlab/log.hpp"

namespace dwmlab {

// ------------------------------------------------------------ model training

void train_dwm(DiffusionWorldModel& model, const OfflineDataset& data, std::size_t iterations, Rng& rng,
               std::size_t log_every, const std::function<void(std::uint64_t, double)>& progress) {
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < iterations; ++i) {
    const WindowBatch batch = sample_windows(data, model.config.T, model.config.batch, rng, model.config.rtg_mode);
    acc += dwm_training_step(model, batch, rng);
    ++n;
    if (log_every && progress && (model.iteration % log_every == 0 || i + 1 == iterations)) {
      progress(model.iteration, acc / static_cast<double>(n));
      acc = 0.0;
      n = 0;
    }
  }
}

void train_onestep(OneStepModel& model, const OfflineDataset& data, std::size_t iterations, Rng& rng,
                   std::size_t log_every, const std::function<void(std::uint64_t, double)>& progress) {
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < iterations; ++i) {
    const TransitionBatch batch = sample_transitions(data, model.config.batch, rng);
    acc += onestep_training_step(model, batch);
    ++n;
    if (log_every && progress && (model.iteration % log_every == 0 || i + 1 == iterations)) {
      progress(model.iteration, acc / static_cast<double>(n));
      acc = 0.0;
      n = 0;
    }
  }
}

// -------------------------------------------------------- prediction error

TruthWindows sample_truth_windows(const OfflineDataset& data, std::size_t T, std::size_t n, Rng& rng) {
  const std::size_t L = data.episode_length();
  if (T < 2) throw ConfigError("prediction error: T must be at least 2");
  if (T > L) throw ConfigError("prediction error: T=" + std::to_string(T) + " exceeds episode length");
  const std::size_t ds = data.state_dim, da = data.action_dim;
  TruthWindows w;
  w.T = T;
  w.states.resize(n, ds);
  w.actions.resize(n, da);
  w.future_actions.assign(T >= 3 ? T - 2 : 0, Matrix(n, da));
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t i = rng.index(data.trajectories.size());
    const std::size_t t = rng.index(L - T + 1);
    const auto& tr = data.trajectories[i];
    w.traj.push_back(i);
    w.start.push_back(t);
    w.rtg.push_back(window_rtg(data, i, t, T, RtgMode::episode));
    std::copy(tr.state(t).begin(), tr.state(t).end(), w.states.row(b).begin());
    std::copy(tr.action(t).begin(), tr.action(t).end(), w.actions.row(b).begin());
    for (std::size_t h = 1; h + 1 < T; ++h)
      std::copy(tr.action(t + h).begin(), tr.action(t + h).end(), w.future_actions[h - 1].row(b).begin());
    ImaginedSeq seq;
    seq.state_dim = ds;
    for (std::size_t h = 1; h < T; ++h) {
      seq.rewards.push_back(tr.rewards[t + h - 1]);
      seq.states.insert(seq.states.end(), tr.state(t + h).begin(), tr.state(t + h).end());
    }
    w.truth.push_back(std::move(seq));
  }
  return w;
}

namespace {

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t m = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(m), v.end());
  const double hi = v[m];
  if (v.size() % 2) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<long>(m));
  return 0.5 * (lo + hi);
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void finish_averages(PredErrorReport& r) {
  r.avg_state_mse = mean_of(r.state_mse);
  r.avg_reward_mse = mean_of(r.reward_mse);
}

}  // namespace

PredErrorReport prediction_error(const TruthWindows& windows, const WindowPredictor& predict,
                                 const Normalizer& normalizer, Rng& rng) {
  const std::size_t n = windows.truth.size(), steps = windows.T - 1;
  const auto pred = predict(windows, rng);
  if (pred.size() != n) throw std::invalid_argument("prediction_error: predictor returned the wrong row count");
  std::vector<std::vector<double>> se(steps, std::vector<double>(n)), re(steps, std::vector<double>(n));
  for (std::size_t b = 0; b < n; ++b) {
    const auto& p = pred[b];
    const auto& t = windows.truth[b];
    if (p.max_horizon() < steps) throw ConfigError("prediction error: model horizon shorter than T - 1");
    for (std::size_t h = 1; h <= steps; ++h) {
      const auto ps = normalizer.apply_obs(p.state(h));
      const auto ts = normalizer.apply_obs(t.state(h));
      double d = 0.0;
      for (std::size_t j = 0; j < ps.size(); ++j) d += (ps[j] - ts[j]) * (ps[j] - ts[j]);
      se[h - 1][b] = d / static_cast<double>(ps.size());
      const double dr = normalizer.apply_reward(p.rewards[h - 1]) - normalizer.apply_reward(t.rewards[h - 1]);
      re[h - 1][b] = dr * dr;
    }
  }
  PredErrorReport r;
  r.T = windows.T;
  r.windows = n;
  for (std::size_t h = 0; h < steps; ++h) {
    r.state_mse.push_back(mean_of(se[h]));
    r.reward_mse.push_back(mean_of(re[h]));
    r.state_mse_median.push_back(median_of(se[h]));
    r.reward_mse_median.push_back(median_of(re[h]));
  }
  finish_averages(r);
  return r;
}

PredErrorReport wm_prediction_error(const DiffusionWorldModel& model, const OfflineDataset& data,
                                    std::optional<double> g_eval, std::size_t T, std::size_t n_windows,
                                    std::uint64_t seed, const std::optional<SampleOptions>& opt) {
  if (T != model.config.T)
    throw ConfigError("prediction error: T=" + std::to_string(T) + " but the model was trained with T=" +
                      std::to_string(model.config.T));
  Rng rng(seed);
  const TruthWindows w = sample_truth_windows(data, T, n_windows, rng);
  SampleOptions o = opt ? *opt : default_sample_options(model.config, g_eval.value_or(0.0));
  o.observer = nullptr;
  if (g_eval) {
    o.g_eval = *g_eval;
    o.g_rows.clear();
  } else {
    o.g_rows = w.rtg;
  }
  WindowPredictor predict = [&](const TruthWindows& tw, Rng& r) { return sample_dwm(model, tw.states, tw.actions, o, r); };
  PredErrorReport rep = prediction_error(w, predict, data.normalizer, rng);
  rep.model_tag = "dwm";
  rep.g_eval = g_eval;
  rep.seeds = {seed};
  return rep;
}

PredErrorReport wm_prediction_error(const OneStepModel& model, const OfflineDataset& data, std::size_t T,
                                    std::size_t n_windows, std::uint64_t seed, double noise_scale) {
  Rng rng(seed);
  const TruthWindows w = sample_truth_windows(data, T, n_windows, rng);
  WindowPredictor predict = [&](const TruthWindows& tw, Rng& r) {
    BatchPolicy replay = [&](std::size_t h, const Matrix&) { return tw.future_actions.at(h - 1); };
    return recursive_rollout(model, tw.states, tw.actions, T - 1, replay, r, noise_scale);
  };
  PredErrorReport rep = prediction_error(w, predict, data.normalizer, rng);
  rep.model_tag = "onestep";
  rep.seeds = {seed};
  return rep;
}

PredErrorReport merge_reports(const std::vector<PredErrorReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("merge_reports: no reports");
  PredErrorReport out = reports.front();
  out.seeds.clear();
  out.windows = 0;
  const double n = static_cast<double>(reports.size());
  for (auto* v : {&out.state_mse, &out.reward_mse, &out.state_mse_median, &out.reward_mse_median})
    std::fill(v->begin(), v->end(), 0.0);
  for (const auto& r : reports) {
    if (r.T != out.T) throw std::invalid_argument("merge_reports: T differs");
    out.seeds.insert(out.seeds.end(), r.seeds.begin(), r.seeds.end());
    out.windows += r.windows;
    for (std::size_t h = 0; h < out.state_mse.size(); ++h) {
      out.state_mse[h] += r.state_mse[h] / n;
      out.reward_mse[h] += r.reward_mse[h] / n;
      out.state_mse_median[h] += r.state_mse_median[h] / n;
      out.reward_mse_median[h] += r.reward_mse_median[h] / n;
    }
  }
  finish_averages(out);
  return out;
}

nlohmann::json pred_error_to_json(const PredErrorReport& r) {
  nlohmann::json j = {{"model", r.model_tag},
                      {"T", r.T},
                      {"windows", r.windows},
                      {"seeds", r.seeds},
                      {"state_mse", r.state_mse},
                      {"reward_mse", r.reward_mse},
                      {"state_mse_median", r.state_mse_median},
                      {"reward_mse_median", r.reward_mse_median},
                      {"avg_state_mse", r.avg_state_mse},
                      {"avg_reward_mse", r.avg_reward_mse}};
  j["g_eval"] = r.g_eval ? nlohmann::json(*r.g_eval) : nlohmann::json("data");
  return j;
}

std::string pred_error_csv(const PredErrorReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "step,state_mse,reward_mse,state_mse_median,reward_mse_median\n";
  for (std::size_t h = 0; h < r.state_mse.size(); ++h)
    os << h + 1 << ',' << r.state_mse[h] << ',' << r.reward_mse[h] << ',' << r.state_mse_median[h] << ','
       << r.reward_mse_median[h] << '\n';
  return os.str();
}

// ------------------------------------------------------------------ sweeps

std::string SweepCell::name() const {
  std::ostringstream os;
  os << to_string(source) << "_H" << H << "_g";
  for (std::size_t i = 0; i < g_eval.size(); ++i) os << (i ? "+" : "") << g_eval[i];
  os << "_s" << seed;
  return os.str();
}

namespace {

nlohmann::json cell_to_json(const SweepCell& c, const AgentConfig& cfg) {
  nlohmann::json j = {{"H", c.H},
                      {"source", to_string(c.source)},
                      {"g_eval", c.g_eval},
                      {"seed", c.seed},
                      {"config", agent_config_to_json(cfg)},
                      {"returns", c.final_eval.returns},
                      {"normalized", c.final_eval.normalized},
                      {"anchors", {{"random", c.final_eval.anchors.random}, {"expert", c.final_eval.anchors.expert}}},
                      {"final_critic_loss", c.final_critic_loss}};
  if (c.pred_state_mse) j["pred_state_mse"] = *c.pred_state_mse;
  if (c.pred_reward_mse) j["pred_reward_mse"] = *c.pred_reward_mse;
  return j;
}

void fill_report(ReturnReport& r) {
  mean_std(r.returns, r.mean, r.std);
  mean_std(r.normalized, r.normalized_mean, r.normalized_std);
}

std::optional<SweepCell> load_cell(const std::filesystem::path& path, const SweepCell& want, const AgentConfig& cfg) {
  if (!std::filesystem::exists(path)) return std::nullopt;
  try {
    const auto j = nlohmann::json::parse(io::read_file(path));
    if (j.at("config") != agent_config_to_json(cfg)) return std::nullopt;
    SweepCell c = want;
    c.final_eval.returns = j.at("returns").get<std::vector<double>>();
    c.final_eval.normalized = j.at("normalized").get<std::vector<double>>();
    c.final_eval.anchors.random = j.at("anchors").at("random").get<double>();
    c.final_eval.anchors.expert = j.at("anchors").at("expert").get<double>();
    fill_report(c.final_eval);
    c.final_critic_loss = j.at("final_critic_loss").get<double>();
    if (j.contains("pred_state_mse")) c.pred_state_mse = j["pred_state_mse"].get<double>();
    if (j.contains("pred_reward_mse")) c.pred_reward_mse = j["pred_reward_mse"].get<double>();
    return c;
  } catch (const std::exception& e) {
    log::warn("ignoring unreadable sweep cell " + path.string() + ": " + e.what());
    return std::nullopt;
  }
}

struct CellJob {
  SweepCell cell;
  AgentConfig cfg;
};

std::vector<SweepCell> run_cells(const OfflineDataset& data, const EnvSpec& env, std::vector<CellJob> jobs,
                                 const SweepModels& models, const ReturnAnchors& anchors, const SweepOptions& opt,
                                 const std::function<void(SweepCell&)>& extra) {
  const std::filesystem::path cell_dir = opt.out_dir.empty() ? std::filesystem::path{} : opt.out_dir / "cells";
  if (!cell_dir.empty()) std::filesystem::create_directories(cell_dir);
  std::vector<SweepCell> out(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr failure;

  auto work = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      {
        std::lock_guard lock(mu);
        if (failure) return;
      }
      try {
        const auto& job = jobs[i];
        const std::filesystem::path result =
            cell_dir.empty() ? std::filesystem::path{} : cell_dir / (job.cell.name() + ".json");
        std::optional<SweepCell> cached = result.empty() ? std::nullopt : load_cell(result, job.cell, job.cfg);
        SweepCell c;
        if (cached) {
          c = *cached;
          log::info("reusing sweep cell " + c.name());
        } else {
          c = job.cell;
          ImaginationSourceSet src{job.cfg.source, models.dwm, models.onestep, nullptr};
          const auto t0 = std::chrono::steady_clock::now();
          TrainResult res = train_offline_agent(data, env, job.cfg, src, anchors, job.cell.seed);
          c.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          c.final_eval = res.final_eval;
          c.final_critic_loss = res.log.back().losses.critic_loss;
          if (extra) extra(c);
          if (!cell_dir.empty()) {
            save_agent(cell_dir / (c.name() + ".agent"), res.state, data.normalizer, job.cfg, job.cell.seed);
            io::write_file(cell_dir / (c.name() + ".log.csv"), train_log_csv(res.log));
            io::write_file(result, cell_to_json(c, job.cfg).dump(2) + "\n");
          }
        }
        std::lock_guard lock(mu);
        out[i] = c;
        if (opt.on_cell) opt.on_cell(c);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };

  const std::size_t n_threads = std::max<std::size_t>(1, std::min(opt.max_parallel, jobs.size()));
  if (n_threads == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

}  // namespace

std::vector<SweepCell> horizon_sweep(const OfflineDataset& data, const EnvSpec& env, const AgentConfig& base,
                                     const std::vector<std::size_t>& horizons,
                                     const std::vector<ModelSource>& sources, const std::vector<std::uint64_t>& seeds,
                                     const SweepModels& models, const ReturnAnchors& anchors,
                                     const SweepOptions& opt) {
  if (horizons.empty() || sources.empty() || seeds.empty())
    throw ConfigError("horizon sweep: H list, model list and seed list must be non-empty");
  std::vector<CellJob> jobs;
  for (std::size_t H : horizons)
    for (ModelSource src : sources)
      for (std::uint64_t seed : seeds) {
        CellJob j;
        j.cfg = base;
        j.cfg.H = H;
        j.cfg.source = src;
        j.cfg.validate();
        j.cell.H = H;
        j.cell.source = src;
        j.cell.g_eval = base.g_eval;
        j.cell.seed = seed;
        jobs.push_back(std::move(j));
      }
  return run_cells(data, env, std::move(jobs), models, anchors, opt, {});
}

std::vector<SweepCell> rtg_sweep(const OfflineDataset& data, const EnvSpec& env, const AgentConfig& base,
                                 const std::vector<double>& g_evals, const std::vector<std::uint64_t>& seeds,
                                 const SweepModels& models, const ReturnAnchors& anchors, const SweepOptions& opt,
                                 std::size_t pred_windows) {
  if (g_evals.empty() || seeds.empty()) throw ConfigError("rtg sweep: g_eval list and seed list must be non-empty");
  if (base.source != ModelSource::dwm || !models.dwm)
    throw MissingArtifactError("rtg sweep: needs a diffusion world model source");
  std::vector<CellJob> jobs;
  for (double g : g_evals)
    for (std::uint64_t seed : seeds) {
      CellJob j;
      j.cfg = base;
      j.cfg.g_eval = {g};
      j.cfg.validate();
      j.cell.H = base.H;
      j.cell.source = base.source;
      j.cell.g_eval = {g};
      j.cell.seed = seed;
      jobs.push_back(std::move(j));
    }
  const DiffusionWorldModel& dwm = *models.dwm;
  auto extra = [&](SweepCell& c) {
    if (pred_windows == 0) return;
    const auto rep = wm_prediction_error(dwm, data, c.g_eval.front(), dwm.config.T, pred_windows,
                                         derive_seed(c.seed, 0x505245));
    c.pred_state_mse = rep.avg_state_mse;
    c.pred_reward_mse = rep.avg_reward_mse;
  };
  return run_cells(data, env, std::move(jobs), models, anchors, opt, extra);
}

std::string sweep_csv(const std::vector<SweepCell>& cells) {
  std::ostringstream os;
  os.precision(17);
  os << "H,source,g_eval,seed,return_mean,return_std,normalized_mean,normalized_std,final_critic_loss,"
        "pred_state_mse,pred_reward_mse\n";
  for (const auto& c : cells) {
    os << c.H << ',' << to_string(c.source) << ',';
    for (std::size_t i = 0; i < c.g_eval.size(); ++i) os << (i ? "+" : "") << c.g_eval[i];
    os << ',' << c.seed << ',' << c.final_eval.mean << ',' << c.final_eval.std << ','
       << c.final_eval.normalized_mean << ',' << c.final_eval.normalized_std << ',' << c.final_critic_loss << ',';
    if (c.pred_state_mse) os << *c.pred_state_mse;
    os << ',';
    if (c.pred_reward_mse) os << *c.pred_reward_mse;
    os << '\n';
  }
  return os.str();
}

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

std::vector<SweepCell> parse_sweep_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line.rfind("H,source,g_eval", 0) != 0)
    throw FormatError(FormatError::Kind::malformed_header, "not a sweep table");
  std::vector<SweepCell> cells;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 11) throw FormatError(FormatError::Kind::malformed_header, "sweep row has wrong column count");
    try {
      SweepCell c;
      c.H = std::stoul(f[0]);
      c.source = model_source_from_string(f[1]);
      for (const auto& g : split(f[2], '+')) c.g_eval.push_back(std::stod(g));
      c.seed = std::stoull(f[3]);
      c.final_eval.mean = std::stod(f[4]);
      c.final_eval.std = std::stod(f[5]);
      c.final_eval.normalized_mean = std::stod(f[6]);
      c.final_eval.normalized_std = std::stod(f[7]);
      c.final_critic_loss = std::stod(f[8]);
      if (!f[9].empty()) c.pred_state_mse = std::stod(f[9]);
      if (!f[10].empty()) c.pred_reward_mse = std::stod(f[10]);
      cells.push_back(std::move(c));
    } catch (const std::logic_error& e) {
      throw FormatError(FormatError::Kind::malformed_header, std::string("sweep row: ") + e.what());
    }
  }
  return cells;
}

std::vector<double> rtg_deciles(const OfflineDataset& data) {
  std::vector<double> all;
  for (const auto& tr : data.trajectories) {
    const auto g = rtg_labels(tr, data.gamma, data.reward_scale);
    all.insert(all.end(), g.begin(), g.end());
  }
  std::vector<double> out;
  for (int q = 0; q <= 100; q += 10) out.push_back(percentile(all, q));
  return out;
}

std::string sweep_markdown(const std::vector<SweepCell>& cells) {
  struct Group {
    std::size_t H;
    std::string source, g;
    std::vector<double> scores;
    std::vector<double> pred;
  };
  std::vector<Group> groups;
  std::map<std::string, std::size_t> index;
  for (const auto& c : cells) {
    std::ostringstream g;
    for (std::size_t i = 0; i < c.g_eval.size(); ++i) g << (i ? "+" : "") << c.g_eval[i];
    const std::string key = std::to_string(c.H) + "|" + to_string(c.source) + "|" + g.str();
    auto [it, fresh] = index.emplace(key, groups.size());
    if (fresh) groups.push_back({c.H, to_string(c.source), g.str(), {}, {}});
    groups[it->second].scores.push_back(c.final_eval.normalized_mean);
    if (c.pred_state_mse) groups[it->second].pred.push_back(*c.pred_state_mse);
  }
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  os << "| H | model | g_eval | seeds | normalized return | pred state mse |\n";
  os << "|---|---|---|---|---|---|\n";
  for (const auto& g : groups) {
    double m = 0.0, s = 0.0;
    mean_std(g.scores, m, s);
    os << "| " << g.H << " | " << g.source << " | " << g.g << " | " << g.scores.size() << " | " << m << " ± " << s
       << " | ";
    if (!g.pred.empty()) os << mean_of(g.pred);
    os << " |\n";
  }
  return os.str();
}

}  // namespace dwmlab
