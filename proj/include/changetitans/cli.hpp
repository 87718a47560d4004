#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ctitans {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

/// Runs one subcommand (synth, train, infer, eval, gradcheck, ablate).
/// `args` excludes the program name. Returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Worker threads for parallel stages: hardware concurrency, capped by the
/// TCD_THREADS environment variable when it is set to a positive integer.
unsigned worker_threads();

}  // namespace ctitans
