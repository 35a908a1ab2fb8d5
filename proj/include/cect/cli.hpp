#pragma once

// Command-line front end. Subcommands: train, eval, sweep, ablate, embed,
// synth, gradcheck. Exit codes: 0 success, 1 validation/config error,
// 2 runtime/numeric error, 3 IO error.

#include <string>
#include <vector>

namespace cect::cli {

int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args); // args without the program name

} // namespace cect::cli
