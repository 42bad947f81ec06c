#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace vblora::cli {

enum ExitCode : int { kOk = 0, kValidation = 1, kRuntime = 2 };

/// Entry point of the `vblora` binary. Results go to `out`, diagnostics and
/// usage text to `err`.
int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr);

int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr);

}  // namespace vblora::cli
