#include "dwmlab/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dwmlab/checkpoint.hpp"
#include "dwmlab/errors.hpp"
#include "dwmlab/harness.hpp"
#include "dwmlab/kernels.hpp"
#include "dwmlab/log.hpp"
#include "dwmlab/run_config.hpp"

namespace dwmlab {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using clock_type = std::chrono::steady_clock;

struct Run {
  std::string command;
  json cfg;
  fs::path out;
  std::uint64_t seed = 0;
  std::ostream* os = nullptr;
};

fs::path artifact(const Run& r, const std::string& key) {
  fs::path p = r.cfg.at("paths").at(key).get<std::string>();
  return p.is_absolute() ? p : r.out / p;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

double seconds_since(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

void write_json(const fs::path& p, const json& j) { io::write_file(p, j.dump(2) + "\n"); }

EnvSpec run_env(const Run& r) { return env_spec(r.cfg.at("env").get<std::string>()); }

ReturnAnchors run_anchors(const Run& r) {
  const auto& e = r.cfg.at("eval");
  return compute_anchors(run_env(r), e.at("anchor_episodes").get<std::size_t>(), e.at("anchor_seed").get<std::uint64_t>());
}

OfflineDataset run_dataset(const Run& r) {
  OfflineDataset data = load_dataset(artifact(r, "dataset"));
  if (data.env != r.cfg.at("env").get<std::string>())
    throw ConfigError("dataset env '" + data.env + "' does not match config env '" + r.cfg.at("env").get<std::string>() +
                      "'");
  return data;
}

json report_json(const ReturnReport& rep) {
  return {{"returns", rep.returns},
          {"normalized", rep.normalized},
          {"mean", rep.mean},
          {"std", rep.std},
          {"normalized_mean", rep.normalized_mean},
          {"normalized_std", rep.normalized_std},
          {"anchors", {{"random", rep.anchors.random}, {"expert", rep.anchors.expert}, {"episodes", rep.anchors.episodes}}}};
}

// ------------------------------------------------------------------ commands

void cmd_gen_data(const Run& r) {
  const EnvSpec env = run_env(r);
  const auto& d = r.cfg.at("data");
  const OfflineDataset data = generate_dataset(env, r.cfg.at("tier").get<std::string>(),
                                               d.at("episodes").get<std::size_t>(), d.at("gamma").get<double>(), r.seed);
  save_dataset(artifact(r, "dataset"), data);

  const ReturnAnchors anchors = run_anchors(r);
  std::vector<double> returns, normalized;
  for (const auto& tr : data.trajectories) {
    double R = 0.0;
    for (double v : tr.rewards) R += v;
    returns.push_back(R);
    normalized.push_back(normalize_return(R, anchors));
  }
  double m = 0, s = 0, nm = 0, ns = 0;
  mean_std(returns, m, s);
  mean_std(normalized, nm, ns);
  const json summary = {{"env", data.env},
                        {"tier", data.tier},
                        {"episodes", data.trajectories.size()},
                        {"transitions", data.transition_count()},
                        {"reward_scale", data.reward_scale},
                        {"behavior_return_mean", m},
                        {"behavior_return_std", s},
                        {"behavior_normalized_mean", nm},
                        {"behavior_normalized_std", ns},
                        {"anchors", {{"random", anchors.random}, {"expert", anchors.expert}}},
                        {"rtg_deciles", rtg_deciles(data)}};
  write_json(r.out / "dataset.summary.json", summary);
  *r.os << "dataset: " << data.trajectories.size() << " episodes, " << data.transition_count()
        << " transitions, behavior normalized return " << fmt(nm) << "\n";
}

void cmd_train_wm(const Run& r, const std::string& model) {
  const OfflineDataset data = run_dataset(r);
  const auto t0 = clock_type::now();
  std::ostringstream loss_csv;
  loss_csv.precision(17);
  loss_csv << "iteration,loss\n";
  std::ostringstream timing;
  timing << "iteration,wall_seconds\n";
  auto progress = [&](std::uint64_t it, double loss) {
    loss_csv << it << ',' << loss << '\n';
    timing << it << ',' << seconds_since(t0) << '\n';
    log::info(model + " iteration " + std::to_string(it) + " loss " + fmt(loss));
  };
  if (model == "dwm") {
    const auto& j = r.cfg.at("dwm");
    DiffusionWorldModel m = DiffusionWorldModel::create(data, dwm_config_from_run(r.cfg), derive_seed(r.seed, 10));
    Rng rng(derive_seed(r.seed, 11));
    train_dwm(m, data, j.at("iterations").get<std::size_t>(), rng, j.at("log_every").get<std::size_t>(), progress);
    save_dwm(artifact(r, "dwm"), m);
  } else {
    const auto& j = r.cfg.at("onestep");
    OneStepModel m = OneStepModel::create(data, onestep_config_from_run(r.cfg), derive_seed(r.seed, 20));
    Rng rng(derive_seed(r.seed, 21));
    train_onestep(m, data, j.at("iterations").get<std::size_t>(), rng, j.at("log_every").get<std::size_t>(),
                  progress);
    save_onestep(artifact(r, "onestep"), m);
  }
  io::write_file(r.out / (model + ".train.csv"), loss_csv.str());
  io::write_file(r.out / (model + ".timing.csv"), timing.str());
  *r.os << "trained " << model << " in " << fmt(seconds_since(t0)) << " s\n";
}

void cmd_eval_wm(const Run& r) {
  const OfflineDataset data = run_dataset(r);
  const auto& e = r.cfg.at("eval_wm");
  const std::string model = e.at("model").get<std::string>();
  if (model != "dwm" && model != "onestep") throw ConfigError("config: eval_wm.model must be dwm or onestep");
  const std::size_t windows = e.at("windows").get<std::size_t>();
  const auto seeds = e.at("seeds").get<std::vector<std::uint64_t>>();
  if (seeds.empty() || windows == 0) throw ConfigError("config: eval_wm needs seeds and windows");
  std::optional<double> g;
  if (!e.at("g_eval").is_null()) {
    if (!e.at("g_eval").is_number()) throw ConfigError("config: eval_wm.g_eval must be a number or null");
    g = e.at("g_eval").get<double>();
  }
  std::vector<PredErrorReport> reps;
  if (model == "dwm") {
    const DiffusionWorldModel m = load_dwm(artifact(r, "dwm"));
    SampleOptions opt = default_sample_options(m.config, g.value_or(0.0));
    if (!e.at("r_infer").is_null()) {
      if (!e.at("r_infer").is_number()) throw ConfigError("config: eval_wm.r_infer must be a number or null");
      opt.r_infer = e.at("r_infer").get<double>();
      if (!(opt.r_infer > 0.0 && opt.r_infer <= 1.0)) throw ConfigError("config: eval_wm.r_infer must lie in (0, 1]");
    }
    for (auto s : seeds) reps.push_back(wm_prediction_error(m, data, g, m.config.T, windows, derive_seed(r.seed, 1000 + s), opt));
  } else {
    const OneStepModel m = load_onestep(artifact(r, "onestep"));
    const std::size_t T = r.cfg.at("dwm").at("T").get<std::size_t>();
    for (auto s : seeds)
      reps.push_back(wm_prediction_error(m, data, T, windows, derive_seed(r.seed, 1000 + s),
                                         e.at("noise_scale").get<double>()));
  }
  const PredErrorReport merged = merge_reports(reps);
  json j = pred_error_to_json(merged);
  j["per_seed"] = json::array();
  for (const auto& rep : reps) j["per_seed"].push_back(pred_error_to_json(rep));
  write_json(r.out / ("eval_wm_" + model + ".json"), j);
  io::write_file(r.out / ("eval_wm_" + model + ".csv"), pred_error_csv(merged));
  *r.os << model << " prediction error: state " << fmt(merged.avg_state_mse) << ", reward "
        << fmt(merged.avg_reward_mse) << "\n";
}

SweepModels load_models(const Run& r, bool need_dwm, bool need_onestep, std::optional<DiffusionWorldModel>& dwm,
                        std::optional<OneStepModel>& onestep) {
  if (need_dwm) dwm = load_dwm(artifact(r, "dwm"));
  if (need_onestep) onestep = load_onestep(artifact(r, "onestep"));
  return {dwm ? &*dwm : nullptr, onestep ? &*onestep : nullptr};
}

void cmd_train_agent(const Run& r) {
  const OfflineDataset data = run_dataset(r);
  const AgentConfig cfg = agent_config_from_run(r.cfg);
  std::optional<DiffusionWorldModel> dwm;
  std::optional<OneStepModel> onestep;
  const SweepModels models =
      load_models(r, cfg.source == ModelSource::dwm, cfg.source == ModelSource::onestep, dwm, onestep);
  const ReturnAnchors anchors = run_anchors(r);
  ImaginationSourceSet src{cfg.source, models.dwm, models.onestep, nullptr};
  TrainResult res = train_offline_agent(data, run_env(r), cfg, src, anchors, r.seed, [](const TrainLogRow& row) {
    log::info("agent iteration " + std::to_string(row.iteration) + " normalized return " +
              fmt(row.eval ? row.eval->normalized_mean : 0.0));
  });
  save_agent(artifact(r, "agent"), res.state, data.normalizer, cfg, r.seed);
  io::write_file(r.out / "agent.log.csv", train_log_csv(res.log));
  io::write_file(r.out / "agent.timing.csv", timing_csv(res.wall_seconds));
  write_json(r.out / "agent.final.json", report_json(res.final_eval));
  *r.os << to_string(cfg.algorithm) << " (" << to_string(cfg.source) << ", H=" << cfg.H
        << ") normalized return " << fmt(res.final_eval.normalized_mean) << " ± "
        << fmt(res.final_eval.normalized_std) << "\n";
}

void cmd_eval_agent(const Run& r) {
  LoadedAgent a = load_agent(artifact(r, "agent"));
  AgentPolicy policy(a.state, a.normalizer, to_string(a.config.algorithm));
  const ReturnReport rep = evaluate_policy(run_env(r), policy, r.cfg.at("eval").at("episodes").get<std::size_t>(),
                                           derive_seed(r.seed, 40), run_anchors(r));
  write_json(r.out / "agent_eval.json", report_json(rep));
  *r.os << "normalized return " << fmt(rep.normalized_mean) << " ± " << fmt(rep.normalized_std) << "\n";
}

std::size_t sweep_parallelism() {
  if (const char* v = std::getenv("DWMLAB_THREADS")) {
    try {
      const long n = std::stol(v);
      if (n >= 1) return static_cast<std::size_t>(n);
    } catch (const std::logic_error&) {
    }
    throw ConfigError(std::string("DWMLAB_THREADS must be a positive integer, got '") + v + "'");
  }
  return 1;
}

void write_sweep(const Run& r, const std::string& name, const std::vector<SweepCell>& cells, json sidecar) {
  io::write_file(r.out / (name + ".csv"), sweep_csv(cells));
  sidecar["config"] = r.cfg;
  sidecar["seed"] = r.seed;
  write_json(r.out / (name + ".json"), sidecar);
  io::write_file(r.out / (name + ".md"), sweep_markdown(cells));
  std::ostringstream timing;
  timing << "cell,wall_seconds\n";
  for (const auto& c : cells) timing << c.name() << ',' << c.wall_seconds << '\n';
  io::write_file(r.out / (name + ".timing.csv"), timing.str());
  *r.os << sweep_markdown(cells);
}

void cmd_sweep_horizon(const Run& r) {
  const OfflineDataset data = run_dataset(r);
  const AgentConfig base = agent_config_from_run(r.cfg);
  const auto& s = r.cfg.at("sweep");
  std::vector<ModelSource> sources;
  for (const auto& m : s.at("models")) sources.push_back(model_source_from_string(m.get<std::string>()));
  const bool need_dwm = std::find(sources.begin(), sources.end(), ModelSource::dwm) != sources.end();
  const bool need_os = std::find(sources.begin(), sources.end(), ModelSource::onestep) != sources.end();
  std::optional<DiffusionWorldModel> dwm;
  std::optional<OneStepModel> onestep;
  const SweepModels models = load_models(r, need_dwm, need_os, dwm, onestep);
  SweepOptions opt{r.out / "sweep_horizon", sweep_parallelism(), [](const SweepCell& c) {
                     log::info("cell " + c.name() + " normalized return " + fmt(c.final_eval.normalized_mean));
                   }};
  const auto cells = horizon_sweep(data, run_env(r), base, s.at("horizons").get<std::vector<std::size_t>>(), sources,
                                   s.at("seeds").get<std::vector<std::uint64_t>>(), models, run_anchors(r), opt);
  write_sweep(r, "sweep_horizon", cells, json::object());
}

void cmd_sweep_rtg(const Run& r) {
  const OfflineDataset data = run_dataset(r);
  AgentConfig base = agent_config_from_run(r.cfg);
  base.source = ModelSource::dwm;
  const auto& s = r.cfg.at("sweep");
  std::optional<DiffusionWorldModel> dwm;
  std::optional<OneStepModel> onestep;
  const SweepModels models = load_models(r, true, false, dwm, onestep);
  SweepOptions opt{r.out / "sweep_rtg", sweep_parallelism(), [](const SweepCell& c) {
                     log::info("cell " + c.name() + " normalized return " + fmt(c.final_eval.normalized_mean));
                   }};
  const auto cells = rtg_sweep(data, run_env(r), base, s.at("g_evals").get<std::vector<double>>(),
                               s.at("seeds").get<std::vector<std::uint64_t>>(), models, run_anchors(r), opt,
                               s.at("pred_windows").get<std::size_t>());
  write_sweep(r, "sweep_rtg", cells, {{"dataset_rtg_deciles", rtg_deciles(data)}});
}

void cmd_report(const Run& r) {
  std::ostringstream md;
  md << "# dwmlab report\n\n";
  bool any = false;
  if (fs::exists(r.out / "dataset.summary.json")) {
    const json j = json::parse(io::read_file(r.out / "dataset.summary.json"));
    md << "## Dataset\n\n" << j.at("env").get<std::string>() << "-" << j.at("tier").get<std::string>() << ", "
       << j.at("episodes") << " episodes, behavior normalized return " << fmt(j.at("behavior_normalized_mean").get<double>())
       << "\n\n";
    any = true;
  }
  for (const std::string model : {"dwm", "onestep"}) {
    const fs::path p = r.out / ("eval_wm_" + model + ".csv");
    if (!fs::exists(p)) continue;
    md << "## Prediction error (" << model << ")\n\n| step | state mse | reward mse |\n|---|---|---|\n";
    std::istringstream is(io::read_file(p));
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) {
      std::istringstream ls(line);
      std::string step, s, rw;
      std::getline(ls, step, ',');
      std::getline(ls, s, ',');
      std::getline(ls, rw, ',');
      md << "| " << step << " | " << s << " | " << rw << " |\n";
    }
    md << "\n";
    any = true;
  }
  for (const std::string name : {"sweep_horizon", "sweep_rtg"}) {
    const fs::path p = r.out / (name + ".csv");
    if (!fs::exists(p)) continue;
    md << "## " << name << "\n\n" << sweep_markdown(parse_sweep_csv(io::read_file(p))) << "\n";
    any = true;
  }
  for (const std::string name : {"agent.final", "agent_eval"}) {
    const fs::path p = r.out / (name + ".json");
    if (!fs::exists(p)) continue;
    const json j = json::parse(io::read_file(p));
    md << "## " << name << "\n\nnormalized return " << fmt(j.at("normalized_mean").get<double>()) << " ± "
       << fmt(j.at("normalized_std").get<double>()) << "\n\n";
    any = true;
  }
  if (!any) throw MissingArtifactError("report: no results found in " + r.out.string());
  io::write_file(r.out / "report.md", md.str());
  *r.os << md.str();
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Diffusion world model offline RL lab"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path, out_dir = ".", wm_model;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::string log_level = "info";
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--out-dir", out_dir, "Run directory for artifacts");
  app.add_option("--seed", seed, "Seed; overrides the config");
  app.add_option("--override", overrides, "key.path=value, repeatable")
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  app.add_option("--log-level", log_level, "debug, info, warn, error or off");

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-data", "Roll out scripted policies into a dataset"},
      {"train-wm", "Train a world model (dwm or onestep)"},
      {"eval-wm", "Per-step prediction error of a trained world model"},
      {"train-agent", "Train an offline agent"},
      {"eval-agent", "Evaluate a trained agent"},
      {"sweep-horizon", "Agents over a grid of horizons, models and seeds"},
      {"sweep-rtg", "Agents over a grid of evaluation RTGs"},
      {"print-config", "Print the resolved configuration"},
      {"report", "Collect results of a run directory into Markdown"}};
  for (const auto& [name, desc] : commands) {
    auto* sub = app.add_subcommand(name, desc);
    sub->fallthrough();
    if (name == "train-wm") sub->add_option("model", wm_model, "dwm or onestep")->check(CLI::IsMember({"dwm", "onestep"}));
  }

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  Run run;
  run.command = app.get_subcommands().front()->get_name();
  run.os = &out;
  try {
    if (log_level == "debug") log::set_level(log::Level::debug);
    else if (log_level == "info") log::set_level(log::Level::info);
    else if (log_level == "warn") log::set_level(log::Level::warn);
    else if (log_level == "error") log::set_level(log::Level::error);
    else if (log_level == "off") log::set_level(log::Level::off);
    else throw ConfigError("unknown log level: " + log_level);

    const json schema = default_run_config();
    json user = json::object();
    if (!config_path.empty()) {
      if (!fs::exists(config_path)) throw MissingArtifactError("config not found: " + config_path);
      try {
        user = json::parse(io::read_file(config_path));
      } catch (const json::parse_error& e) {
        throw ConfigError("config: " + config_path + " is not valid JSON: " + e.what());
      }
    }
    for (const auto& o : overrides) apply_override(user, o, schema);
    if (seed) user["seed"] = *seed;
    if (!wm_model.empty()) user["train_wm"]["model"] = wm_model;
    run.cfg = merge_config(schema, user);
    run.seed = run.cfg.at("seed").get<std::uint64_t>();
    if (run.command == "print-config") {
      out << run.cfg.dump(2) << "\n";
      return kExitOk;
    }
    // Validate every typed section before any work starts.
    (void)dwm_config_from_run(run.cfg);
    (void)onestep_config_from_run(run.cfg);
    (void)agent_config_from_run(run.cfg);
    (void)env_spec(run.cfg.at("env").get<std::string>());

    if (const auto t = run.cfg.at("threads").get<int>(); t > 0) kernels::set_max_threads(t);
    run.out = out_dir;
    fs::create_directories(run.out);
    write_json(run.out / (run.command + ".config.json"), run.cfg);

    if (run.command == "gen-data") cmd_gen_data(run);
    else if (run.command == "train-wm") {
      const std::string m = run.cfg.at("train_wm").at("model").get<std::string>();
      if (m != "dwm" && m != "onestep") throw ConfigError("config: train_wm.model must be dwm or onestep");
      cmd_train_wm(run, m);
    } else if (run.command == "eval-wm") cmd_eval_wm(run);
    else if (run.command == "train-agent") cmd_train_agent(run);
    else if (run.command == "eval-agent") cmd_eval_agent(run);
    else if (run.command == "sweep-horizon") cmd_sweep_horizon(run);
    else if (run.command == "sweep-rtg") cmd_sweep_rtg(run);
    else if (run.command == "report") cmd_report(run);
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const MissingArtifactError& e) {
    err << "missing artifact: " << e.what() << "\n";
    return kExitMissing;
  } catch (const FormatError& e) {
    err << "unreadable artifact: " << e.what() << "\n";
    return kExitMissing;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const nlohmann::json::exception& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
}

}  // namespace dwmlab
