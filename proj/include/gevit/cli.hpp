#pragma once

#include <string>
#include <vector>

namespace gevit::cli {

// Exit codes: 0 success, 1 usage, 2 output conflict, 3 numerical failure.
int run(const std::vector<std::string>& args);
int run(int argc, const char* const* argv);

}  // namespace gevit::cli
