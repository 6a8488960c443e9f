#pragma once

#include <string>
#include <vector>

namespace qart::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Parses argv and runs one subcommand. Returns 0 on success, 1 with a
/// one-line reason on stderr when the command fails, 2 on usage errors.
int dispatch(int argc, const char* const* argv);
int dispatch(const std::vector<std::string>& args);

}  // namespace qart::cli
