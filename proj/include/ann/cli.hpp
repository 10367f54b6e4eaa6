#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ann::cli {

enum ExitCode : int {
  kSuccess = 0,
  kCheckFailed = 1,
  kConfigError = 2,
  kPreflightFailed = 3,
};

// Largest C*H*W accepted by the gradcheck command.
inline constexpr std::size_t kGradcheckElementCap = 4096;

// `args` excludes the program name:
//   <demo|equivalence|flops|gradcheck|bench> --config <path> [--table1] [--full] [--out <path>]
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ann::cli
