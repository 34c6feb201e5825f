#include <doctest.h>

#include <sstream>

#include <nlohmann/json.hpp>

#include "dwmlab/checkpoint.hpp"
#include "dwmlab/cli.hpp"
#include "dwmlab/dataset.hpp"
#include "dwmlab/errors.hpp"
#include "dwmlab/run_config.hpp"
#include "testing.hpp"

using namespace dwmlab;
using nlohmann::json;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  args.insert(args.begin(), {"--log-level", "error"});
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

}  // namespace

TEST_CASE("config merge overlays user values and rejects unknown keys") {
  const auto schema = default_run_config();
  const auto merged = merge_config(schema, json{{"agent", {{"H", 5}, {"td3", {{"alpha", 1.0}}}}}});
  CHECK(merged["agent"]["H"] == 5);
  CHECK(merged["agent"]["td3"]["alpha"] == 1.0);
  CHECK(merged["agent"]["td3"]["policy_delay"] == 2);
  CHECK(merged["dwm"] == schema["dwm"]);
  CHECK(merged["eval_wm"]["g_eval"].is_null());
  CHECK(merge_config(schema, json{{"eval_wm", {{"g_eval", 0.8}}}})["eval_wm"]["g_eval"] == 0.8);

  try {
    merge_config(schema, json{{"agent", {{"td3", {{"alpah", 1.0}}}}}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("agent.td3.alpah") != std::string::npos);
  }
  CHECK_THROWS_AS(merge_config(schema, json{{"agent", {{"H", "seven"}}}}), ConfigError);
  CHECK_THROWS_AS(merge_config(schema, json::array()), ConfigError);

  json user = json::object();
  apply_override(user, "agent.g_eval=[0.5,1.0]", schema);
  apply_override(user, "env=pendulum", schema);
  CHECK(user["agent"]["g_eval"] == json::array({0.5, 1.0}));
  CHECK(user["env"] == "pendulum");
  CHECK_THROWS_AS(apply_override(user, "agent.nope=1", schema), ConfigError);
  CHECK_THROWS_AS(apply_override(user, "noequals", schema), ConfigError);

  const auto cfg = agent_config_from_run(merge_config(schema, json{{"agent", {{"algorithm", "iql"}}}}));
  CHECK(cfg.algorithm == Algorithm::iql);
  CHECK_THROWS_AS(agent_config_from_run(merge_config(schema, json{{"agent", {{"algorithm", "sac"}}}})), ConfigError);
}

TEST_CASE("cli exit codes") {
  const auto dir = testing::scratch_dir("cli_codes");
  CHECK(run({"--out-dir", dir.string(), "--override", "agent.bogus=1", "print-config"}).code == kExitConfig);
  CHECK(run({"--out-dir", dir.string(), "--override", "agent.algorithm=cql", "gen-data"}).code == kExitConfig);
  CHECK(run({"--out-dir", dir.string(), "no-such-command"}).code == kExitConfig);
  CHECK(run({"--out-dir", dir.string(), "--config", (dir / "absent.json").string(), "print-config"}).code ==
        kExitMissing);
  CHECK(run({"--out-dir", dir.string(), "train-wm", "dwm"}).code == kExitMissing);
  CHECK(run({"--out-dir", dir.string(), "eval-agent"}).code == kExitMissing);
  io::write_file(dir / "dataset.dwmt", "DWMT1\ngarbage");
  CHECK(run({"--out-dir", dir.string(), "train-wm", "onestep"}).code == kExitMissing);

  io::write_file(dir / "bad.json", "{\"agent\": ");
  CHECK(run({"--out-dir", dir.string(), "--config", (dir / "bad.json").string(), "print-config"}).code == kExitConfig);
  io::write_file(dir / "good.json", "{\"agent\": {\"H\": 3}}");
  const auto pc = run({"--out-dir", dir.string(), "--config", (dir / "good.json").string(), "--seed", "4",
                       "print-config"});
  CHECK(pc.code == kExitOk);
  const auto printed = json::parse(pc.out);
  CHECK(printed["agent"]["H"] == 3);
  CHECK(printed["seed"] == 4);
}

TEST_CASE("gen-data writes a loadable dataset and replays byte for byte") {
  const auto a = testing::scratch_dir("cli_gen_a"), b = testing::scratch_dir("cli_gen_b");
  const std::vector<std::string> common = {"--seed", "3", "--override", "data.episodes=5", "--override",
                                           "tier=medium-replay"};
  auto args = [&](const std::filesystem::path& d) {
    std::vector<std::string> v = {"--out-dir", d.string()};
    v.insert(v.end(), common.begin(), common.end());
    v.push_back("gen-data");
    return v;
  };
  REQUIRE(run(args(a)).code == kExitOk);
  REQUIRE(run(args(b)).code == kExitOk);
  CHECK(io::read_file(a / "dataset.dwmt") == io::read_file(b / "dataset.dwmt"));
  const auto d = load_dataset(a / "dataset.dwmt");
  CHECK(d.trajectories.size() == 5);
  CHECK(d.trajectories[0].policy_tag == "random");
  CHECK(std::filesystem::exists(a / "gen-data.config.json"));
  CHECK(std::filesystem::exists(a / "dataset.summary.json"));
}

TEST_CASE("agent pipeline on real transitions") {
  const auto dir = testing::scratch_dir("cli_agent");
  const std::vector<std::string> base = {"--out-dir", dir.string(), "--seed", "2", "--override", "data.episodes=6",
                                         "--override", "agent.source=none", "--override", "agent.iterations=20",
                                         "--override", "agent.eval_every=10", "--override", "agent.hidden=[8]",
                                         "--override", "agent.batch=8", "--override", "eval.episodes=1",
                                         "--override", "eval.anchor_episodes=2"};
  auto with = [&](const std::string& cmd) {
    auto v = base;
    v.push_back(cmd);
    return run(v);
  };
  REQUIRE(with("gen-data").code == kExitOk);
  const auto train = with("train-agent");
  REQUIRE(train.code == kExitOk);
  CHECK(std::filesystem::exists(dir / "agent.ckpt"));
  const auto log = io::read_file(dir / "agent.log.csv");
  CHECK(std::count(log.begin(), log.end(), '\n') == 3);
  const auto final_a = json::parse(io::read_file(dir / "agent.final.json"));
  CHECK(final_a.contains("normalized_mean"));
  REQUIRE(with("eval-agent").code == kExitOk);
  CHECK(std::filesystem::exists(dir / "agent_eval.json"));
  CHECK(with("report").code == kExitOk);
}
