#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace dwmlab {

/// Exit codes of the dwmlab binary.
enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitMissing = 2, kExitNumerical = 3 };

/// Entry point shared by the binary and the tests. args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dwmlab
