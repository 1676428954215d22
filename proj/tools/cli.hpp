#pragma once

#include <string>
#include <vector>

namespace dida::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitViolations = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRuntime = 3;

/// Parses and runs one command; returns the process exit code.
int run(int argc, const char* const* argv);

/// Same, with the program name left out of `args`.
int run(const std::vector<std::string>& args);

}  // namespace dida::cli
