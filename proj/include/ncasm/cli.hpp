#pragma once

#include <iosfwd>

namespace ncasm {

/// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Entry point of `ncasm simulate|identify|evaluate|montecarlo|rates`.
/// Normal output goes to `out`, errors to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ncasm
