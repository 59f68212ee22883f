#pragma once

#include <iosfwd>

namespace clover {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Runs one `clover` subcommand. Exit codes: 0 success, 1 operation failure,
// 2 usage error.
int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int cli_dispatch(int argc, const char* const* argv);

}  // namespace clover
