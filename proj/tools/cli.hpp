#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace realcompo::cli {

inline constexpr int kExitOk     = 0;
inline constexpr int kExitFailed = 1;  // check failure or runtime error
inline constexpr int kExitUsage  = 2;  // usage or config error

// Entry point behind the `realcompo` executable; args exclude argv[0].
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace realcompo::cli
