#include "dwmlab/run_config.hpp"

#include "dwmlab/errors.hpp"

namespace dwmlab {

namespace {

using json = nlohmann::json;

const char* type_label(const json& v) {
  if (v.is_boolean()) return "boolean";
  if (v.is_number()) return "number";
  if (v.is_string()) return "string";
  if (v.is_array()) return "array";
  if (v.is_object()) return "object";
  return "null";
}

bool same_kind(const json& a, const json& b) { return std::string(type_label(a)) == type_label(b); }

void check_numbers(const json& def, const json& val, const std::string& path) {
  if (def.is_number_unsigned() || def.is_number_integer()) {
    if (!(val.is_number_integer() || val.is_number_unsigned()) || (def.is_number_unsigned() && val.get<double>() < 0))
      throw ConfigError("config: " + path + " must be a non-negative integer");
  }
}

json merge_at(const json& def, const json& user, const std::string& path) {
  if (def.is_null()) return user;
  if (!same_kind(def, user))
    throw ConfigError("config: " + path + " must be of type " + type_label(def) + ", got " + type_label(user));
  if (def.is_object()) {
    json out = def;
    for (auto it = user.begin(); it != user.end(); ++it) {
      const std::string sub = path.empty() ? it.key() : path + "." + it.key();
      if (!def.contains(it.key())) throw ConfigError("config: unknown key " + sub);
      out[it.key()] = merge_at(def[it.key()], it.value(), sub);
    }
    return out;
  }
  if (def.is_number()) check_numbers(def, user, path);
  if (def.is_array() && !def.empty()) {
    for (std::size_t i = 0; i < user.size(); ++i) {
      const std::string sub = path + "[" + std::to_string(i) + "]";
      if (!same_kind(def.front(), user[i]))
        throw ConfigError("config: " + sub + " must be of type " + type_label(def.front()));
      if (def.front().is_number()) check_numbers(def.front(), user[i], sub);
    }
  }
  return user;
}

}  // namespace

json default_run_config() {
  json dwm = dwm_config_to_json(DwmConfig{});
  dwm.erase("gamma");
  dwm["iterations"] = 20000u;
  dwm["log_every"] = 1000u;

  const OneStepConfig os;
  json onestep = {{"hidden", os.hidden},
                  {"activation", to_string(os.activation)},
                  {"lr", os.adam.lr},
                  {"batch", os.batch},
                  {"iterations", 20000u},
                  {"log_every", 1000u}};

  json agent = agent_config_to_json(AgentConfig{});

  return {{"env", "pointmass"},
          {"tier", "medium"},
          {"seed", 0u},
          {"threads", 0u},
          {"data", {{"episodes", 100u}, {"gamma", 0.99}}},
          {"paths",
           {{"dataset", "dataset.dwmt"},
            {"dwm", "dwm.ckpt"},
            {"onestep", "onestep.ckpt"},
            {"agent", "agent.ckpt"}}},
          {"dwm", dwm},
          {"onestep", onestep},
          {"train_wm", {{"model", "dwm"}}},
          {"eval_wm",
           {{"model", "dwm"},
            {"g_eval", nullptr},
            {"windows", 200u},
            {"seeds", {0u, 1u, 2u}},
            {"r_infer", nullptr},
            {"noise_scale", 1.0}}},
          {"agent", agent},
          {"eval", {{"episodes", 10u}, {"anchor_episodes", 100u}, {"anchor_seed", 20240u}}},
          {"sweep",
           {{"horizons", {1u, 3u, 5u, 7u}},
            {"models", {"dwm", "onestep"}},
            {"seeds", {0u, 1u, 2u}},
            {"g_evals", {0.4, 0.6, 0.8, 1.0, 1.2}},
            {"pred_windows", 200u}}}};
}

json merge_config(const json& defaults, const json& user) {
  if (!user.is_object()) throw ConfigError("config: top level must be a JSON object");
  return merge_at(defaults, user, "");
}

void apply_override(json& user, const std::string& assignment, const json& schema) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &user;
  const json* def = &schema;
  std::size_t pos = 0;
  for (;;) {
    const auto dot = key.find('.', pos);
    const std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (!def->is_object() || !def->contains(part)) throw ConfigError("config: unknown key " + key.substr(0, dot));
    def = &(*def)[part];
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part) || !(*node)[part].is_object()) (*node)[part] = json::object();
    node = &(*node)[part];
    pos = dot + 1;
  }
}

DwmConfig dwm_config_from_run(const json& run) {
  json j = run.at("dwm");
  j["gamma"] = run.at("data").at("gamma");
  DwmConfig c = dwm_config_from_json(j);
  c.validate();
  return c;
}

OneStepConfig onestep_config_from_run(const json& run) {
  const json& j = run.at("onestep");
  OneStepConfig c;
  c.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  c.activation = activation_from_string(j.at("activation").get<std::string>());
  c.adam.lr = j.at("lr").get<double>();
  c.batch = j.at("batch").get<std::size_t>();
  c.validate();
  return c;
}

AgentConfig agent_config_from_run(const json& run) {
  AgentConfig c = agent_config_from_json(run.at("agent"));
  c.validate();
  return c;
}

}  // namespace dwmlab
