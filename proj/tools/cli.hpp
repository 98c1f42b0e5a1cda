#pragma once

// The `dila` command line: one function so tests can drive it in-process.

#include <iosfwd>
#include <string>
#include <vector>

namespace dila::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kConfigInvalid = 2, kRuntimeFailure = 3 };

// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dila::cli
