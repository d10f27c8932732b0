#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace duet {

/// Exit codes of the command-line tool.
enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,
    kExitUsage = 2,
    kExitValidation = 3,
    kExitTraining = 4,
    kExitClient = 5,
};

/// Runs one invocation. `args` excludes the program name. Interactive sessions
/// read from `in`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, std::istream& in);

}  // namespace duet
