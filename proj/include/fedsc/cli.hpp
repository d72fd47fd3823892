#pragma once

#include <ostream>

namespace fedsc {

/// Entry point of the `fedsc` executable. Returns the process exit code:
/// 0 success, 2 configuration error, 3 runtime error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace fedsc
