#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace rad {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 2,
  kExitData = 3,
  kExitNumeric = 4,
};

// `args` excludes the program name, e.g. {"cost", "--preset", "table2"}.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace rad
