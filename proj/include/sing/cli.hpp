#pragma once

#include <iosfwd>

namespace sing {

/// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;      // bad flags, invalid input, I/O failure
inline constexpr int kExitNumerical = 3;  // a computation could not produce a result

/// Runs the `sing` command line. Reports go to files or `out`; diagnostics
/// to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sing
