#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace beliefroad::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kInfeasible = 2,
  kNoPath = 3,
  kNumerical = 4,
};

/// Runs one CLI invocation; args exclude the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace beliefroad::cli
