#pragma once

#include <string>
#include <vector>

namespace capsdense {

// Command-line front end (train / eval / params / gradcheck / perturb).
// Returns the process exit code: 0 success, 1 usage or config error,
// 2 data format or integrity error, 3 numerical failure.
int run_cli(const std::vector<std::string>& args);  // argv[1..]
int run_cli(int argc, const char* const* argv);

}  // namespace capsdense
