#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace regionmir::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitValidation = 4;

/// Runs one command line (args excludes the program name); returns the exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Worker cap from REGIONMIR_THREADS (default: hardware concurrency, at least 1).
unsigned worker_count();

}  // namespace regionmir::cli
