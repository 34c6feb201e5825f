#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "dwmlab/agents.hpp"
#include "dwmlab/diffusion.hpp"
#include "dwmlab/onestep.hpp"

namespace dwmlab {

/// The complete run configuration with every default filled in. It doubles
/// as the schema: a user document may only contain keys present here, with
/// the same JSON type. Keys whose default is null accept any value.
nlohmann::json default_run_config();

/// Overlay `user` on `defaults`. Throws ConfigError naming the offending
/// path (for example "agent.td3.alpha") on unknown keys or type mismatches.
nlohmann::json merge_config(const nlohmann::json& defaults, const nlohmann::json& user);

/// Apply "a.b.c=value" to a user document. The value is parsed as JSON when
/// possible and taken as a string otherwise. The path must exist in the schema.
void apply_override(nlohmann::json& user, const std::string& assignment, const nlohmann::json& schema);

DwmConfig dwm_config_from_run(const nlohmann::json& run);
OneStepConfig onestep_config_from_run(const nlohmann::json& run);
AgentConfig agent_config_from_run(const nlohmann::json& run);

}  // namespace dwmlab
