#pragma once

#include <iosfwd>

namespace featlab {

// Exit codes of the `featlab` tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;        // bad flag, unknown key, malformed value
inline constexpr int kExitPrecondition = 3;  // missing upstream run, shape mismatch
inline constexpr int kExitRuntime = 4;       // numeric failure, transport, anything else

// Entry point of the command-line tool; in-process so tests can drive it.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace featlab
